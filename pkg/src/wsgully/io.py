"""Readers and writers for every on-disk artifact.

All writers go through :func:`atomic_write` so a crashed run never leaves a
half-written primary output behind.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import (
    ABSTAIN,
    NEGATIVE,
    POSITIVE,
    DatasetManifest,
    ExpertAnnotation,
    FeatureStore,
    FormatError,
    GroundTruthSet,
    ImageRef,
    LabelMatrix,
    LocationRecord,
    PseudoLabelSet,
)

FEATURE_MAGIC = b"EGF1"
_HEADER = struct.Struct("<4sIII")

_VOTE_TOKENS = {"1": POSITIVE, "0": NEGATIVE, "-1": ABSTAIN}
_TOKEN_OF_VOTE = {POSITIVE: "1", NEGATIVE: "0", ABSTAIN: "-1"}


def fmt_float(x: float) -> str:
    """17 significant digits; enough for an exact float64 round trip."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


@contextlib.contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temporary sibling, rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _jsonl_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: malformed JSON at line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: line {lineno} is not a JSON object")
            yield lineno, obj


# -- manifest ---------------------------------------------------------------


def read_manifest(path) -> DatasetManifest:
    records = []
    seen: set[str] = set()
    n_images = None
    for lineno, obj in _jsonl_lines(path):
        try:
            loc_id = obj["location_id"]
            images = tuple(
                ImageRef(str(im["path"]), float(im["gsd_cm"]), int(im["year"]))
                for im in obj["images"]
            )
            record = LocationRecord(loc_id, images)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: invalid record at line {lineno}: {exc}") from None
        if loc_id in seen:
            raise FormatError(f"{path}: duplicate location_id {loc_id!r} at line {lineno}")
        seen.add(loc_id)
        if n_images is None:
            n_images = len(images)
        elif len(images) != n_images:
            raise FormatError(f"{path}: inconsistent image count at line {lineno}")
        records.append(record)
    return DatasetManifest(tuple(records))


def write_manifest(manifest: DatasetManifest, path) -> None:
    with atomic_write(path) as fh:
        for r in manifest.records:
            obj = {
                "location_id": r.location_id,
                "images": [
                    {"path": im.path, "gsd_cm": im.gsd_cm, "year": im.year} for im in r.images
                ],
            }
            fh.write(json.dumps(obj) + "\n")


# -- label matrix -----------------------------------------------------------


def read_label_matrix(path) -> LabelMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "location_id":
        raise FormatError(f"{path}: empty or missing header, expected 'location_id,...'")
    header = rows[0]
    lf_names = header[1:]
    if not lf_names:
        raise FormatError(f"{path}: header names no labeling functions")
    ids, votes = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(
                f"{path}: ragged row at line {lineno}: {len(row)} fields, expected {len(header)}"
            )
        ids.append(row[0])
        try:
            votes.append([_VOTE_TOKENS[tok.strip()] for tok in row[1:]])
        except KeyError as exc:
            raise FormatError(f"{path}: invalid vote token '{exc.args[0]}' at line {lineno}") from None
    try:
        return LabelMatrix(tuple(ids), tuple(lf_names), np.array(votes, dtype=np.int8).reshape(len(ids), len(lf_names)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def format_label_matrix(matrix: LabelMatrix) -> str:
    buf = io.StringIO()
    buf.write(",".join(("location_id",) + matrix.lf_names) + "\n")
    for loc, row in zip(matrix.location_ids, matrix.votes):
        buf.write(loc + "," + ",".join(_TOKEN_OF_VOTE[int(v)] for v in row) + "\n")
    return buf.getvalue()


def write_label_matrix(matrix: LabelMatrix, path) -> None:
    with atomic_write(path) as fh:
        fh.write(format_label_matrix(matrix))


# -- feature store ----------------------------------------------------------


def _ids_path(path) -> Path:
    return Path(str(path) + ".ids")


def read_feature_store(path) -> FeatureStore:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(blob)} bytes)")
    magic, k, n, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    expected = 4 * k * n * d
    found = len(blob) - _HEADER.size
    if found != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {found}")
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(k, n, d)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    ids = _ids_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != k:
        raise FormatError(f"{path}: sidecar lists {len(ids)} ids but header says K={k}")
    try:
        return FeatureStore(tuple(ids), values.astype(np.float32))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_feature_store(store: FeatureStore, path) -> None:
    k, n, d = store.values.shape
    with atomic_write(_ids_path(path)) as fh:
        fh.write("".join(i + "\n" for i in store.location_ids))
    with atomic_write(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, k, n, d))
        fh.write(np.ascontiguousarray(store.values, dtype="<f4").tobytes())


# -- annotations ------------------------------------------------------------


def read_annotations(path, n_images: int | None = None) -> list[ExpertAnnotation]:
    """Read expert annotations; ``n_images`` (if given) fixes the score count."""
    out = []
    for lineno, obj in _jsonl_lines(path):
        try:
            ann = ExpertAnnotation(str(obj["location_id"]), str(obj["labeler_id"]), obj["scores"])
        except KeyError as exc:
            raise FormatError(f"{path}: line {lineno} missing key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        expected = n_images if n_images is not None else (len(out[0].scores) if out else None)
        if expected is not None and len(ann.scores) != expected:
            raise FormatError(
                f"{path}: line {lineno}: location {ann.location_id!r}, labeler "
                f"{ann.labeler_id!r} has {len(ann.scores)} scores, expected {expected}"
            )
        out.append(ann)
    return out


def write_annotations(annotations, path) -> None:
    with atomic_write(path) as fh:
        for a in annotations:
            obj = {"location_id": a.location_id, "labeler_id": a.labeler_id, "scores": list(a.scores)}
            fh.write(json.dumps(obj) + "\n")


# -- ground truth & pseudo-labels -------------------------------------------


def read_ground_truth(path) -> GroundTruthSet:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["location_id", "label"]:
        raise FormatError(f"{path}: expected header 'location_id,label'")
    ids, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 or row[1] not in ("0", "1"):
            raise FormatError(f"{path}: invalid ground-truth row at line {lineno}: {row}")
        ids.append(row[0])
        labels.append(int(row[1]))
    try:
        return GroundTruthSet(tuple(ids), np.array(labels, dtype=np.int8))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_ground_truth(gt: GroundTruthSet, path) -> None:
    with atomic_write(path) as fh:
        fh.write("location_id,label\n")
        for loc, y in zip(gt.location_ids, gt.labels):
            fh.write(f"{loc},{int(y)}\n")


def read_pseudo_labels(path) -> PseudoLabelSet:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["location_id", "p_neg", "p_pos"]:
        raise FormatError(f"{path}: expected header 'location_id,p_neg,p_pos'")
    ids, probs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            ids.append(row[0])
            probs.append((float(row[1]), float(row[2])))
        except (IndexError, ValueError):
            raise FormatError(f"{path}: invalid pseudo-label row at line {lineno}") from None
    try:
        return PseudoLabelSet(tuple(ids), np.array(probs, dtype=np.float64).reshape(-1, 2))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_pseudo_labels(labels: PseudoLabelSet, path) -> None:
    with atomic_write(path) as fh:
        fh.write("location_id,p_neg,p_pos\n")
        for loc, (p0, p1) in zip(labels.location_ids, labels.probs):
            fh.write(f"{loc},{fmt_float(p0)},{fmt_float(p1)}\n")
