"""Confusion-matrix metrics and binarization of probabilistic labels.

Metrics that would be 0/0 are reported as ``None`` rather than 0 or NaN.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import NEGATIVE, POSITIVE, ClassDistribution, GroundTruthSet, check_aligned

# column order of the report table
TABLE_COLUMNS = (
    ("npv", "NPV"),
    ("recall", "Recall"),
    ("precision", "Precision"),
    ("f1", "F1 Score"),
    ("accuracy", "Accuracy"),
)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    npv: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def f1_score(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def confusion(preds, gt: GroundTruthSet, pred_ids=None) -> ConfusionMatrix:
    """Count outcomes of binary ``preds`` against ``gt``.

    ``preds`` may be a GroundTruthSet (ids are checked) or a plain 0/1
    sequence aligned with ``gt``; ``pred_ids`` adds the id check for the latter.
    """
    if isinstance(preds, GroundTruthSet):
        pred_ids, preds = preds.location_ids, preds.labels
    preds = np.asarray(preds).reshape(-1)
    if pred_ids is not None:
        check_aligned(pred_ids, gt.location_ids, "predictions", "ground truth")
    if preds.shape[0] != len(gt):
        raise ValueError(f"{preds.shape[0]} predictions for {len(gt)} ground-truth labels")
    if preds.shape[0] == 0:
        raise ValueError("cannot build a confusion matrix from empty input")
    if not np.isin(preds, (NEGATIVE, POSITIVE)).all():
        raise ValueError("predictions must be 0 or 1")
    p = preds == POSITIVE
    t = gt.labels == POSITIVE
    return ConfusionMatrix(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)), tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t))
    )


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total < 1:
        raise ValueError("confusion matrix is empty")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        npv=_ratio(cm.tn, cm.tn + cm.fn),
    )


def binarize(p: ClassDistribution, threshold: float = 0.5) -> int:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return POSITIVE if p.p_pos >= threshold else NEGATIVE


def binarize_all(p_pos, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(p_pos) >= threshold).astype(np.int8)


def format_table(rows: dict[str, MetricsReport], digits: int = 3) -> str:
    """Aligned plain-text table, one row per named report."""
    header = ["Model / Approach"] + [title for _, title in TABLE_COLUMNS]
    body = []
    for name, rep in rows.items():
        cells = [name]
        for key, _ in TABLE_COLUMNS:
            v = getattr(rep, key)
            cells.append("n/a" if v is None else f"{v:.{digits}f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for r in [header] + body:
        first = r[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join([first] + rest))
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
