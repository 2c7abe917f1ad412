"""Generative label model over weak votes.

The joint over a row of votes ``lam`` (m entries in {-1, 0, 1}) and the
latent class ``y`` is

    p_w(lam, y) = exp(w . phi(lam, y)) / Z_w

with ``phi = [lab_1..lab_m, acc_1..acc_m, corr_1..corr_|C|]``:

    lab_j  = 1{lam_j != abstain}
    acc_j  = 1{lam_j == y}                 (never 1 for an abstain)
    corr_p = 1{lam_j == lam_d}, p = (j, d) (two abstains count as equal)

Rows are independent, so the marginal likelihood of a label matrix is a
product of per-row sums over ``y``.  ``Z_w`` is computed exactly: given y,
LFs in different connected components of the correlation graph are
independent, so each component is enumerated on its own (3**s configs).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ABSTAIN,
    NEGATIVE,
    POSITIVE,
    ClassDistribution,
    GroundTruthSet,
    LabelMatrix,
    PseudoLabelSet,
)
from .io import atomic_write, fmt_float
from .optim import Adam

CLASSES = (NEGATIVE, POSITIVE)
_VOTE_VALUES = (ABSTAIN, NEGATIVE, POSITIVE)


class ComponentTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationSet:
    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        pairs = tuple((int(j), int(d)) for j, d in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        for j, d in pairs:
            if not 0 <= j < d:
                raise ValueError(f"correlation pair ({j}, {d}) must satisfy 0 <= j < d")
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate correlation pairs")

    def check(self, m: int) -> None:
        for j, d in self.pairs:
            if d >= m:
                raise ValueError(f"correlation pair ({j}, {d}) out of range for {m} LFs")

    def __len__(self):
        return len(self.pairs)


@dataclass
class FactorWeights:
    w_lab: np.ndarray
    w_acc: np.ndarray
    w_corr: np.ndarray

    def __post_init__(self):
        self.w_lab = np.asarray(self.w_lab, dtype=np.float64).reshape(-1)
        self.w_acc = np.asarray(self.w_acc, dtype=np.float64).reshape(-1)
        self.w_corr = np.asarray(self.w_corr, dtype=np.float64).reshape(-1)
        if self.w_lab.shape != self.w_acc.shape:
            raise ValueError("w_lab and w_acc must have the same length")
        if not all(np.isfinite(a).all() for a in (self.w_lab, self.w_acc, self.w_corr)):
            raise ValueError("weights must be finite")

    @property
    def m(self) -> int:
        return self.w_lab.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.w_lab, self.w_acc, self.w_corr])

    @classmethod
    def from_vector(cls, vec, m: int) -> "FactorWeights":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:m].copy(), vec[m : 2 * m].copy(), vec[2 * m :].copy())

    @classmethod
    def initial(cls, m: int, n_corr: int) -> "FactorWeights":
        return cls(np.zeros(m), np.ones(m), np.zeros(n_corr))

    def __eq__(self, other):
        if not isinstance(other, FactorWeights):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.w_lab, self.w_acc, self.w_corr), (other.w_lab, other.w_acc, other.w_corr)
            )
        )


@dataclass(frozen=True)
class LabelModelConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    correlations: CorrelationSet = field(default_factory=CorrelationSet)
    max_component_size: int = 12

    def __post_init__(self):
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.max_component_size < 1:
            raise ValueError("max_component_size must be positive")
        if not isinstance(self.correlations, CorrelationSet):
            object.__setattr__(self, "correlations", CorrelationSet(tuple(self.correlations)))


@dataclass
class TrainedLabelModel:
    lf_names: tuple[str, ...]
    weights: FactorWeights
    correlations: CorrelationSet
    final_nll: float

    def to_json(self) -> str:
        def floats(a):
            return "[" + ",".join(fmt_float(v) for v in a) + "]"

        return (
            "{"
            f'"lf_names":{json.dumps(list(self.lf_names))},'
            f'"w_lab":{floats(self.weights.w_lab)},'
            f'"w_acc":{floats(self.weights.w_acc)},'
            f'"corr_pairs":{json.dumps([list(p) for p in self.correlations.pairs])},'
            f'"w_corr":{floats(self.weights.w_corr)},'
            f'"final_nll":{fmt_float(self.final_nll)}'
            "}\n"
        )

    @classmethod
    def from_json(cls, text: str) -> "TrainedLabelModel":
        obj = json.loads(text)
        expected = {"lf_names", "w_lab", "w_acc", "corr_pairs", "w_corr", "final_nll"}
        if set(obj) != expected:
            raise ValueError(f"checkpoint keys {sorted(obj)} != {sorted(expected)}")
        corr = CorrelationSet(tuple(tuple(p) for p in obj["corr_pairs"]))
        weights = FactorWeights(obj["w_lab"], obj["w_acc"], obj["w_corr"])
        if len(obj["lf_names"]) != weights.m or len(corr) != len(weights.w_corr):
            raise ValueError("checkpoint dimensions are inconsistent")
        return cls(tuple(obj["lf_names"]), weights, corr, float(obj["final_nll"]))

    def save(self, path) -> None:
        with atomic_write(path) as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "TrainedLabelModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# -- featurization ------------------------------------------------------------


def featurize(votes, y: int, correlations: CorrelationSet = CorrelationSet()) -> np.ndarray:
    votes = np.asarray(votes)
    lab = votes != ABSTAIN
    acc = votes == y
    corr = [votes[j] == votes[d] for j, d in correlations.pairs]
    return np.concatenate([lab, acc, np.array(corr, dtype=bool)]).astype(np.float64)


def _row_scores(votes: np.ndarray, w: FactorWeights, correlations: CorrelationSet) -> np.ndarray:
    """w . phi(votes_k, y) for every row k and both classes, shape (K, 2)."""
    base = (votes != ABSTAIN) @ w.w_lab
    if correlations.pairs:
        js, ds = np.array(correlations.pairs).T
        base = base + (votes[:, js] == votes[:, ds]) @ w.w_corr
    return np.stack([base + (votes == y) @ w.w_acc for y in CLASSES], axis=1)


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    mx = np.max(a, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


# -- exact partition function ---------------------------------------------------


def correlation_components(m: int, correlations: CorrelationSet) -> list[list[int]]:
    """Connected components of the LF correlation graph (singletons included)."""
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for j, d in correlations.pairs:
        parent[find(j)] = find(d)
    groups: dict[int, list[int]] = {}
    for i in range(m):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def _model_statistics(w: FactorWeights, correlations: CorrelationSet, max_component_size: int = 12):
    """Return (log Z_w, E_{p_w}[phi]) computed exactly by component enumeration."""
    m = w.m
    correlations.check(m)
    if len(w.w_corr) != len(correlations):
        raise ValueError("w_corr length does not match the correlation set")
    pairs = correlations.pairs
    n_feat = 2 * m + len(pairs)

    # per component and class: log-sum of exp scores, and conditional expectations
    log_s = np.zeros(2)
    cond = np.zeros((2, n_feat))
    for comp in correlation_components(m, correlations):
        s = len(comp)
        if s > max_component_size:
            raise ComponentTooLarge(
                f"correlation component {comp} has {s} LFs, above max_component_size="
                f"{max_component_size}; raise the limit to enumerate 3**{s} configurations"
            )
        local = {lf: i for i, lf in enumerate(comp)}
        comp_pairs = [p for p, (j, d) in enumerate(pairs) if j in local]
        configs = np.array(list(itertools.product(_VOTE_VALUES, repeat=s)), dtype=np.int8)
        lab = (configs != ABSTAIN).astype(np.float64)
        if comp_pairs:
            js = [local[pairs[p][0]] for p in comp_pairs]
            ds = [local[pairs[p][1]] for p in comp_pairs]
            corr = (configs[:, js] == configs[:, ds]).astype(np.float64)
        else:
            corr = np.zeros((len(configs), 0))
        base = lab @ w.w_lab[comp] + corr @ w.w_corr[comp_pairs]
        for yi, y in enumerate(CLASSES):
            acc = (configs == y).astype(np.float64)
            score = base + acc @ w.w_acc[comp]
            log_s[yi] += _logsumexp(score)
            p = _softmax(score, axis=0)
            cond[yi, comp] = p @ lab
            cond[yi, [m + lf for lf in comp]] = p @ acc
            cond[yi, [2 * m + q for q in comp_pairs]] = p @ corr
    log_z = float(_logsumexp(log_s))
    p_y = _softmax(log_s, axis=0)
    return log_z, p_y @ cond


def log_partition_function(w: FactorWeights, correlations: CorrelationSet, max_component_size: int = 12) -> float:
    return _model_statistics(w, correlations, max_component_size)[0]


def partition_function(w: FactorWeights, correlations: CorrelationSet, max_component_size: int = 12) -> float:
    return math.exp(log_partition_function(w, correlations, max_component_size))


def brute_force_partition(w: FactorWeights, correlations: CorrelationSet) -> float:
    """Reference Z_w by enumerating every (votes, y); only for m <= 8."""
    m = w.m
    if m > 8:
        raise ValueError(f"brute-force enumeration limited to m <= 8, got m={m}")
    correlations.check(m)
    vec = w.as_vector()
    terms = []
    for votes in itertools.product(_VOTE_VALUES, repeat=m):
        for y in CLASSES:
            terms.append(math.exp(float(featurize(votes, y, correlations) @ vec)))
    return math.fsum(terms)


# -- likelihood -----------------------------------------------------------------


def _check_matrix(w: FactorWeights, matrix: LabelMatrix) -> np.ndarray:
    if matrix.n_lfs != w.m:
        raise ValueError(f"label matrix has {matrix.n_lfs} columns but weights are for {w.m} LFs")
    return matrix.votes


def nll(w: FactorWeights, matrix: LabelMatrix, correlations: CorrelationSet, max_component_size: int = 12) -> float:
    """Negative log marginal likelihood of the label matrix, summed over rows."""
    votes = _check_matrix(w, matrix)
    if votes.shape[0] == 0:
        raise ValueError("label matrix is empty")
    log_z, _ = _model_statistics(w, correlations, max_component_size)
    log_marg = _logsumexp(_row_scores(votes, w, correlations), axis=1)
    return float(votes.shape[0] * log_z - np.sum(log_marg))


def nll_gradient(w: FactorWeights, matrix: LabelMatrix, correlations: CorrelationSet, max_component_size: int = 12) -> np.ndarray:
    """Gradient of :func:`nll` in the ``FactorWeights.as_vector`` layout."""
    votes = _check_matrix(w, matrix)
    k = votes.shape[0]
    if k == 0:
        raise ValueError("label matrix is empty")
    _, model_expect = _model_statistics(w, correlations, max_component_size)
    post = _softmax(_row_scores(votes, w, correlations), axis=1)
    lab = np.sum(votes != ABSTAIN, axis=0)
    acc = np.sum((votes == NEGATIVE) * post[:, :1] + (votes == POSITIVE) * post[:, 1:], axis=0)
    if correlations.pairs:
        js, ds = np.array(correlations.pairs).T
        corr = np.sum(votes[:, js] == votes[:, ds], axis=0)
    else:
        corr = np.zeros(0)
    observed = np.concatenate([lab, acc, corr]).astype(np.float64)
    return k * model_expect - observed


# -- fitting & inference --------------------------------------------------------


def fit(matrix: LabelMatrix, config: LabelModelConfig = LabelModelConfig()) -> TrainedLabelModel:
    """Full-batch Adam on the negative log marginal likelihood."""
    corr = config.correlations
    corr.check(matrix.n_lfs)
    if matrix.n_locations == 0 or not (matrix.votes != ABSTAIN).any():
        raise ValueError("no signal to fit: every vote in the label matrix is an abstain")
    m = matrix.n_lfs
    vec = FactorWeights.initial(m, len(corr)).as_vector()
    opt = Adam([vec], lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    for _ in range(config.epochs):
        grad = nll_gradient(FactorWeights.from_vector(vec, m), matrix, corr, config.max_component_size)
        opt.step([grad])
    weights = FactorWeights.from_vector(vec, m)
    final = nll(weights, matrix, corr, config.max_component_size)
    return TrainedLabelModel(matrix.lf_names, weights, corr, final)


def _logistic_pair(z: np.ndarray) -> np.ndarray:
    """(p_neg, p_pos) for log-odds z; each side computed on its own so that
    negating z swaps the two columns exactly."""
    z = np.asarray(z, dtype=np.float64)

    def sigmoid(t):
        out = np.empty_like(t)
        pos = t >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
        e = np.exp(t[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return np.stack([sigmoid(-z), sigmoid(z)], axis=-1)


def _posterior(w_acc: np.ndarray, votes: np.ndarray) -> np.ndarray:
    votes = np.atleast_2d(votes)
    z = (votes == POSITIVE) @ w_acc - (votes == NEGATIVE) @ w_acc
    return _logistic_pair(z)


def predict_proba(model: TrainedLabelModel, votes) -> ClassDistribution:
    votes = np.asarray(votes)
    if votes.shape != (model.weights.m,):
        raise ValueError(f"expected a row of {model.weights.m} votes, got shape {votes.shape}")
    p_neg, p_pos = _posterior(model.weights.w_acc, votes)[0]
    return ClassDistribution(float(p_neg), float(p_pos))


def predict_all(model: TrainedLabelModel, matrix: LabelMatrix) -> PseudoLabelSet:
    if matrix.n_lfs != model.weights.m:
        raise ValueError(
            f"label matrix has {matrix.n_lfs} columns but the model was fit on {model.weights.m}"
        )
    probs = _posterior(model.weights.w_acc, matrix.votes).reshape(-1, 2)
    return PseudoLabelSet(matrix.location_ids, probs)


def majority_vote(matrix: LabelMatrix) -> GroundTruthSet:
    """Unweighted vote ignoring abstains; ties and all-abstain rows go Positive."""
    n_pos = np.sum(matrix.votes == POSITIVE, axis=1)
    n_neg = np.sum(matrix.votes == NEGATIVE, axis=1)
    return GroundTruthSet(matrix.location_ids, (n_pos >= n_neg).astype(np.int8))
