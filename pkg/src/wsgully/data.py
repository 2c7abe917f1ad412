"""Domain types shared across the pipeline.

Votes and labels are stored as small integer arrays so that label matrices
with tens of thousands of rows stay cheap to manipulate:

    -1  abstain
     0  negative
     1  positive
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

ABSTAIN = -1
NEGATIVE = 0
POSITIVE = 1

NORMALIZATION_TOL = 1e-6


class WeakLabel(enum.IntEnum):
    ABSTAIN = ABSTAIN
    NEGATIVE = NEGATIVE
    POSITIVE = POSITIVE


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class AlignmentError(ValueError):
    """Two artifacts that must share location order do not."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _check_location_id(loc_id: str) -> None:
    if not isinstance(loc_id, str) or not loc_id:
        raise ValueError(f"location id must be a non-empty string, got {loc_id!r}")
    if any(ch in loc_id for ch in ",\n\r"):
        raise ValueError(f"location id {loc_id!r} contains a comma or newline")


def _check_ids(ids) -> None:
    for i in ids:
        _check_location_id(i)
    _check_unique(ids, "location_id")


def _check_unique(ids, what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate {what} {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class ImageRef:
    path: str
    gsd_cm: float
    year: int

    def __post_init__(self):
        if not self.gsd_cm > 0:
            raise ValueError(f"gsd_cm must be positive, got {self.gsd_cm}")


@dataclass(frozen=True)
class LocationRecord:
    location_id: str
    images: tuple[ImageRef, ...]

    def __post_init__(self):
        _check_location_id(self.location_id)
        if len(self.images) < 1:
            raise ValueError(f"location {self.location_id!r} has no images")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[LocationRecord, ...]

    def __post_init__(self):
        _check_ids(self.location_ids)
        counts = {len(r.images) for r in self.records}
        if len(counts) > 1:
            raise ValueError(f"records have inconsistent image counts {sorted(counts)}")

    @property
    def n_images(self) -> int:
        return len(self.records[0].images) if self.records else 0

    @property
    def location_ids(self) -> tuple[str, ...]:
        return tuple(r.location_id for r in self.records)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    """K x m grid of weak votes; row order follows the manifest."""

    location_ids: tuple[str, ...]
    lf_names: tuple[str, ...]
    votes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location_ids", tuple(self.location_ids))
        object.__setattr__(self, "lf_names", tuple(self.lf_names))
        votes = _frozen_array(self.votes, np.int8)
        if votes.size == 0:
            votes = votes.reshape(len(self.location_ids), len(self.lf_names))
        object.__setattr__(self, "votes", votes)
        if votes.ndim != 2 or votes.shape != (len(self.location_ids), len(self.lf_names)):
            raise ValueError(
                f"votes shape {votes.shape} does not match "
                f"{len(self.location_ids)} locations x {len(self.lf_names)} labeling functions"
            )
        if not np.isin(votes, (ABSTAIN, NEGATIVE, POSITIVE)).all():
            raise ValueError("votes must be -1, 0 or 1")
        _check_ids(self.location_ids)
        _check_unique(self.lf_names, "labeling function name")

    @property
    def n_locations(self) -> int:
        return self.votes.shape[0]

    @property
    def n_lfs(self) -> int:
        return self.votes.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.votes[:, self.lf_names.index(name)]

    def take_rows(self, rows) -> "LabelMatrix":
        rows = np.asarray(rows)
        return LabelMatrix(
            tuple(self.location_ids[i] for i in rows), self.lf_names, self.votes[rows]
        )

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return (
            self.location_ids == other.location_ids
            and self.lf_names == other.lf_names
            and np.array_equal(self.votes, other.votes)
        )


@dataclass(frozen=True)
class ClassDistribution:
    p_neg: float
    p_pos: float

    def __post_init__(self):
        for p in (self.p_neg, self.p_pos):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if abs(self.p_neg + self.p_pos - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"({self.p_neg}, {self.p_pos}) does not sum to 1")

    @classmethod
    def from_pos(cls, p_pos: float) -> "ClassDistribution":
        return cls(1.0 - p_pos, p_pos)

    def as_array(self) -> np.ndarray:
        return np.array([self.p_neg, self.p_pos])


@dataclass(frozen=True, eq=False)
class PseudoLabelSet:
    """Probabilistic labels; ``probs[k] = (p_neg, p_pos)`` for location k."""

    location_ids: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location_ids", tuple(self.location_ids))
        probs = _frozen_array(self.probs, np.float64).reshape(-1, 2)
        object.__setattr__(self, "probs", probs)
        if probs.shape[0] != len(self.location_ids):
            raise ValueError("number of distributions does not match number of ids")
        if probs.size and (
            (probs < 0).any()
            or (probs > 1).any()
            or np.abs(probs.sum(axis=1) - 1.0).max() > NORMALIZATION_TOL
        ):
            raise ValueError("pseudo-labels must be valid distributions")
        _check_ids(self.location_ids)

    @property
    def p_pos(self) -> np.ndarray:
        return self.probs[:, 1]

    @property
    def distributions(self) -> list[ClassDistribution]:
        return [ClassDistribution(float(a), float(b)) for a, b in self.probs]

    def __len__(self):
        return len(self.location_ids)

    def __eq__(self, other):
        if not isinstance(other, PseudoLabelSet):
            return NotImplemented
        return self.location_ids == other.location_ids and np.array_equal(
            self.probs, other.probs
        )


@dataclass(frozen=True)
class ExpertAnnotation:
    location_id: str
    labeler_id: str
    scores: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(self.scores))
        for s in self.scores:
            if isinstance(s, bool) or not isinstance(s, (int, np.integer)) or not 0 <= s <= 4:
                raise ValueError(
                    f"score {s!r} outside 0-4 for location {self.location_id!r}, "
                    f"labeler {self.labeler_id!r}"
                )


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    """Binary labels (0 negative, 1 positive) with no abstains."""

    location_ids: tuple[str, ...]
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location_ids", tuple(self.location_ids))
        labels = _frozen_array(self.labels, np.int8).reshape(-1)
        object.__setattr__(self, "labels", labels)
        if labels.shape[0] != len(self.location_ids):
            raise ValueError("number of labels does not match number of ids")
        if not np.isin(labels, (NEGATIVE, POSITIVE)).all():
            raise ValueError("ground-truth labels must be 0 or 1")
        _check_ids(self.location_ids)

    def __len__(self):
        return len(self.location_ids)

    def __eq__(self, other):
        if not isinstance(other, GroundTruthSet):
            return NotImplemented
        return self.location_ids == other.location_ids and np.array_equal(
            self.labels, other.labels
        )


@dataclass(frozen=True, eq=False)
class FeatureStore:
    """Precomputed per-image feature vectors, shape (K, N, D), float32."""

    location_ids: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "location_ids", tuple(self.location_ids))
        values = _frozen_array(self.values, np.float32)
        object.__setattr__(self, "values", values)
        if values.ndim != 3 or values.shape[0] != len(self.location_ids):
            raise ValueError(
                f"values shape {values.shape} does not match {len(self.location_ids)} ids"
            )
        if not np.isfinite(values).all():
            raise ValueError("feature values must be finite")
        _check_ids(self.location_ids)

    @property
    def n_images(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        """Per-location concatenation of image features, shape (K, N*D)."""
        return self.values.reshape(self.values.shape[0], -1)

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return self.location_ids == other.location_ids and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )


def check_aligned(a, b, what_a: str = "left", what_b: str = "right") -> None:
    """Raise AlignmentError unless the two id sequences are identical."""
    a, b = tuple(a), tuple(b)
    if a == b:
        return
    if len(a) != len(b):
        raise AlignmentError(f"{what_a} has {len(a)} locations but {what_b} has {len(b)}")
    for k, (x, y) in enumerate(zip(a, b)):
        if x != y:
            raise AlignmentError(f"row {k}: {what_a} has {x!r} but {what_b} has {y!r}")
