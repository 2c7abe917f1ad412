"""Minimal client for an Ollama-compatible chat endpoint.

Only ``POST <base_url>/api/chat`` with ``stream: false`` is used; the reply's
``message.content`` string is returned.  The startup probe hits
``GET <base_url>/api/version`` and treats any HTTP response as reachable.
"""

from __future__ import annotations

import base64
import json
import logging
import random
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

log = logging.getLogger(__name__)

DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024


class EndpointUnreachable(RuntimeError):
    pass


class RequestFailed(RuntimeError):
    pass


class PayloadTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class VlmEndpointConfig:
    base_url: str
    request_timeout_s: float = 120.0
    max_retries: int = 3
    backoff_base_s: float = 2.0
    max_in_flight: int = 4
    max_payload_bytes: int = DEFAULT_MAX_PAYLOAD

    def __post_init__(self):
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))
        if not self.request_timeout_s > 0:
            raise ValueError("request_timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base_s < 0:
            raise ValueError("backoff_base_s must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def build_chat_request(model: str, text: str, images=(), max_payload_bytes: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    """Serialized JSON body for ``/api/chat``.  Images keep their given order."""
    message = {"role": "user", "content": text}
    if images:
        message["images"] = [base64.b64encode(bytes(im)).decode("ascii") for im in images]
    body = {"model": model, "stream": False, "messages": [message]}
    payload = json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    if len(payload) > max_payload_bytes:
        raise PayloadTooLarge(f"request body is {len(payload)} bytes, cap is {max_payload_bytes}")
    return payload


class OllamaClient:
    def __init__(self, config: VlmEndpointConfig):
        self.config = config
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._jitter = random.Random()

    @property
    def chat_url(self) -> str:
        return self.config.base_url + "/api/chat"

    def probe(self) -> None:
        url = self.config.base_url + "/api/version"
        try:
            with urllib.request.urlopen(url, timeout=min(self.config.request_timeout_s, 10.0)):
                pass
        except urllib.error.HTTPError:
            pass  # the server answered
        except (urllib.error.URLError, OSError) as exc:
            raise EndpointUnreachable(f"endpoint {self.config.base_url} unreachable: {exc}") from None

    def _post_once(self, payload: bytes) -> str:
        req = urllib.request.Request(
            self.chat_url, data=payload, headers={"Content-Type": "application/json"}, method="POST"
        )
        with self._slots:
            with urllib.request.urlopen(req, timeout=self.config.request_timeout_s) as resp:
                raw = resp.read()
        reply = json.loads(raw.decode("utf-8"))
        content = reply["message"]["content"]
        if not isinstance(content, str):
            raise TypeError("message.content is not a string")
        return content

    def chat(self, model: str, text: str, images=()) -> str:
        """Send one chat request, retrying with jittered exponential backoff."""
        payload = build_chat_request(model, text, images, self.config.max_payload_bytes)
        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            try:
                return self._post_once(payload)
            except (OSError, ValueError, KeyError, TypeError) as exc:
                # OSError covers URLError, HTTPError and socket timeouts
                if attempt + 1 == attempts:
                    raise RequestFailed(f"{self.chat_url}: {exc}") from exc
                delay = self.config.backoff_base_s * 2**attempt * self._jitter.uniform(0.5, 1.5)
                log.debug("request to %s failed (%s); retry %d in %.2fs", self.chat_url, exc, attempt + 1, delay)
                time.sleep(delay)
        raise AssertionError("unreachable")
