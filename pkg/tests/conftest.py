import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from wsgully.data import DatasetManifest, ImageRef, LocationRecord


class MockOllama:
    """Local stand-in for an Ollama server.

    ``reply`` maps the decoded request body to a string answer, or returns
    ``None`` to simulate a request that hangs past the client timeout.
    """

    def __init__(self, reply, delay=0.0):
        self.reply = reply
        self.delay = delay
        self.bodies = []
        self.raw_bodies = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_GET(self):
                body = b'{"version":"0.0-mock"}'
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                raw = self.rfile.read(int(self.headers["Content-Length"]))
                body = json.loads(raw)
                with mock._lock:
                    mock.raw_bodies.append(raw)
                    mock.bodies.append(body)
                    mock.in_flight += 1
                    mock.max_in_flight = max(mock.max_in_flight, mock.in_flight)
                try:
                    if mock.delay:
                        time.sleep(mock.delay)
                    answer = mock.reply(body)
                    if answer is None:
                        time.sleep(0.5)
                        return
                    out = json.dumps({"model": body["model"], "message": {"role": "assistant", "content": answer}, "done": True}).encode()
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(out)))
                    self.end_headers()
                    self.wfile.write(out)
                finally:
                    with mock._lock:
                        mock.in_flight -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def mock_ollama():
    servers = []

    def start(reply, delay=0.0):
        srv = MockOllama(reply, delay).__enter__()
        servers.append(srv)
        return srv

    yield start
    for s in servers:
        s.__exit__()


@pytest.fixture
def dead_url():
    """URL of a port nobody listens on."""
    srv = ThreadingHTTPServer(("127.0.0.1", 0), BaseHTTPRequestHandler)
    host, port = srv.server_address
    srv.server_close()
    return f"http://{host}:{port}"


def make_manifest(tmp_path, n_locations, n_images=8):
    """Manifest whose images are small files with distinct contents."""
    records = []
    for k in range(n_locations):
        images = []
        for n in range(n_images):
            rel = f"img/loc{k}_{n}.png"
            p = tmp_path / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(bytes([k % 256, n % 256]) * 4)
            images.append(ImageRef(rel, 100.0 if n % 2 else 15.0, 2010 + n))
        records.append(LocationRecord(f"loc{k}", tuple(images)))
    return DatasetManifest(tuple(records))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def manifest_factory(tmp_path):
    def build(n_locations, n_images=8):
        return make_manifest(tmp_path, n_locations, n_images)

    return build
