"""Expert-vote aggregation into binary ground truth.

Each labeler scores every image of a location on a 0-4 confidence scale
(0 certain negative ... 4 certain positive, 2 unsure).  Four schemes map
the per-labeler score lists to one label per location.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import NEGATIVE, POSITIVE, ExpertAnnotation, GroundTruthSet


class VotingScheme(enum.Enum):
    STRICT_POSITIVE = "strict-positive"
    LENIENT_POSITIVE = "lenient-positive"
    LENIENT_NEGATIVE = "lenient-negative"
    STRICT_NEGATIVE = "strict-negative"

    @classmethod
    def parse(cls, name: str) -> "VotingScheme":
        try:
            return cls(name.lower().replace("_", "-"))
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown voting scheme {name!r}; choose one of {choices}") from None


@dataclass(frozen=True)
class LocationAnnotations:
    location_id: str
    per_labeler: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "per_labeler", tuple(tuple(s) for s in self.per_labeler))
        if not self.per_labeler:
            raise ValueError(f"location {self.location_id!r} has no annotations")
        if len({len(s) for s in self.per_labeler}) != 1:
            raise ValueError(f"location {self.location_id!r} has score lists of different lengths")
        for scores in self.per_labeler:
            if any(not 0 <= s <= 4 for s in scores):
                raise ValueError(f"location {self.location_id!r} has a score outside 0-4")


def _labeler_positive(scores, scheme: VotingScheme) -> bool:
    if scheme is VotingScheme.STRICT_POSITIVE:
        # a 4 plus a second, distinct image above 2
        return max(scores) == 4 and sum(s > 2 for s in scores) >= 2
    if scheme is VotingScheme.LENIENT_POSITIVE:
        return max(scores) == 4
    if scheme is VotingScheme.LENIENT_NEGATIVE:
        return max(scores) > 1
    return max(scores) > 0


def aggregate_location(ann: LocationAnnotations, scheme: VotingScheme) -> int:
    votes = [_labeler_positive(s, scheme) for s in ann.per_labeler]
    if scheme in (VotingScheme.STRICT_POSITIVE, VotingScheme.LENIENT_POSITIVE):
        # positive only if every labeler finds the evidence
        return POSITIVE if all(votes) else NEGATIVE
    # negative only if every labeler finds no evidence
    return POSITIVE if any(votes) else NEGATIVE


def group_annotations(annotations, location_ids=None) -> list[LocationAnnotations]:
    """Group annotations by location, in ``location_ids`` order if given,
    otherwise in order of first appearance."""
    grouped: dict[str, list[tuple[int, ...]]] = {}
    for a in annotations:
        grouped.setdefault(a.location_id, []).append(tuple(a.scores))
    order = list(grouped) if location_ids is None else list(location_ids)
    missing = [loc for loc in order if loc not in grouped]
    if missing:
        raise ValueError(f"{len(missing)} location(s) have no annotations, e.g. {missing[0]!r}")
    return [LocationAnnotations(loc, tuple(grouped[loc])) for loc in order]


def build_ground_truth(
    annotations: list[ExpertAnnotation],
    scheme: VotingScheme = VotingScheme.STRICT_NEGATIVE,
    location_ids=None,
) -> GroundTruthSet:
    groups = group_annotations(annotations, location_ids)
    labels = np.array([aggregate_location(g, scheme) for g in groups], dtype=np.int8)
    return GroundTruthSet(tuple(g.location_id for g in groups), labels)
