"""Labeling functions: synthetic annotators and VLM prompting pipelines.

A labeling function produces one vote per manifest location.  Failures for a
single location (unreadable image, request that keeps failing) become an
abstain for that location and never abort the column.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from ..data import ABSTAIN, NEGATIVE, POSITIVE, DatasetManifest, GroundTruthSet, LocationRecord, check_aligned
from .ollama import OllamaClient, RequestFailed, VlmEndpointConfig
from .synthetic import synthetic_column

log = logging.getLogger(__name__)

NO_ANSWER = "(no answer)"
_ANSWER_TOKEN = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


@dataclass(frozen=True)
class Synthetic:
    accuracy: float
    abstain_rate: float
    seed: int


@dataclass(frozen=True)
class VlmSingleQuestion:
    endpoint: str
    model: str
    question: str


@dataclass(frozen=True)
class VlmMultiQuestion:
    endpoint: str
    vlm_model: str
    llm_model: str
    questions: tuple[str, ...]
    aggregation_prompt: str

    def __post_init__(self):
        object.__setattr__(self, "questions", tuple(self.questions))
        if not self.questions:
            raise ValueError("multi-question labeling function needs at least one question")


LfKind = Union[Synthetic, VlmSingleQuestion, VlmMultiQuestion]


@dataclass(frozen=True)
class LfSpec:
    name: str
    kind: LfKind

    @property
    def uses_endpoint(self) -> bool:
        return not isinstance(self.kind, Synthetic)


def parse_binary_answer(text: str) -> int:
    """First standalone yes/no (any case) decides; otherwise abstain."""
    match = _ANSWER_TOKEN.search(text or "")
    if match is None:
        return ABSTAIN
    return POSITIVE if match.group(1).lower() == "yes" else NEGATIVE


def load_images(record: LocationRecord, image_root=None) -> list[bytes]:
    out = []
    for im in record.images:
        path = Path(im.path)
        if image_root is not None and not path.is_absolute():
            path = Path(image_root) / path
        out.append(path.read_bytes())
    return out


def format_transcript(prompt: str, questions, answers) -> str:
    lines = [prompt.rstrip("\n"), ""]
    for i, (q, a) in enumerate(zip(questions, answers), start=1):
        lines.append(f"{i}. Question: {q}")
        lines.append(f"   Answer: {a}")
    return "\n".join(lines) + "\n"


def single_question_label(kind: VlmSingleQuestion, images, client: OllamaClient) -> int:
    try:
        reply = client.chat(kind.model, kind.question, images)
    except RequestFailed as exc:
        log.warning("single-question request failed: %s", exc)
        return ABSTAIN
    return parse_binary_answer(reply)


def multi_question_label(kind: VlmMultiQuestion, images, client: OllamaClient) -> int:
    """Ask every question to the VLM, then let the LLM aggregate the transcript."""
    answers = []
    for q in kind.questions:
        try:
            answers.append(client.chat(kind.vlm_model, q, images))
        except RequestFailed as exc:
            log.warning("question %r failed: %s", q, exc)
            answers.append(NO_ANSWER)
    transcript = format_transcript(kind.aggregation_prompt, kind.questions, answers)
    try:
        reply = client.chat(kind.llm_model, transcript)
    except RequestFailed as exc:
        log.warning("aggregation request failed: %s", exc)
        return ABSTAIN
    return parse_binary_answer(reply)


def run_labeling_function(
    spec: LfSpec,
    manifest: DatasetManifest,
    endpoint_cfg: VlmEndpointConfig | None = None,
    *,
    ground_truth: GroundTruthSet | None = None,
    image_root=None,
    known: dict[str, int] | None = None,
    on_result: Callable[[str, int], None] | None = None,
    client: OllamaClient | None = None,
    probe: bool = True,
) -> np.ndarray:
    """Votes of one labeling function for every manifest location, in order.

    Synthetic kinds need ``ground_truth``.  For VLM kinds, locations listed
    in ``known`` are not queried again and ``on_result`` is called (from
    worker threads) as each remaining location finishes.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    kind = spec.kind
    if isinstance(kind, Synthetic):
        if ground_truth is None:
            raise ValueError(f"synthetic labeling function {spec.name!r} needs ground truth")
        check_aligned(manifest.location_ids, ground_truth.location_ids, "manifest", "ground truth")
        return synthetic_column(ground_truth.labels, kind.accuracy, kind.abstain_rate, kind.seed)

    if client is None:
        if endpoint_cfg is None:
            raise ValueError(f"labeling function {spec.name!r} needs an endpoint configuration")
        client = OllamaClient(endpoint_cfg)
    if probe:
        client.probe()
    known = known or {}
    column = np.full(len(manifest), ABSTAIN, dtype=np.int8)

    def label_one(index: int) -> None:
        record = manifest.records[index]
        try:
            images = load_images(record, image_root)
        except OSError as exc:
            log.warning("%s: %s: cannot read images (%s); abstaining", spec.name, record.location_id, exc)
            vote = ABSTAIN
        else:
            if isinstance(kind, VlmSingleQuestion):
                vote = single_question_label(kind, images, client)
            else:
                vote = multi_question_label(kind, images, client)
        log.info("%s: %s -> %d", spec.name, record.location_id, vote)
        column[index] = vote
        if on_result is not None:
            on_result(record.location_id, vote)

    todo = []
    for i, loc in enumerate(manifest.location_ids):
        if loc in known:
            column[i] = known[loc]
        else:
            todo.append(i)
    with ThreadPoolExecutor(max_workers=client.config.max_in_flight) as pool:
        futures = [pool.submit(label_one, i) for i in todo]
        try:
            for fut in futures:
                fut.result()
        except BaseException:
            for fut in futures:
                fut.cancel()
            raise
    return column
