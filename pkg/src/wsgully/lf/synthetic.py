"""Synthetic noisy labelers and the desk-scale benchmark generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import (
    ABSTAIN,
    DatasetManifest,
    FeatureStore,
    GroundTruthSet,
    ImageRef,
    LabelMatrix,
    LocationRecord,
)


def _check_rates(accuracy: float, abstain_rate: float) -> None:
    if not 0.0 < accuracy <= 1.0:
        raise ValueError(f"accuracy must be in (0, 1], got {accuracy}")
    if not 0.0 <= abstain_rate < 1.0:
        raise ValueError(f"abstain_rate must be in [0, 1), got {abstain_rate}")


def synthetic_label(true_y: int, accuracy: float, abstain_rate: float, rng: np.random.Generator) -> int:
    """One noisy vote. Always consumes exactly two uniforms: abstain, then flip."""
    u_abstain = rng.random()
    u_correct = rng.random()
    if u_abstain < abstain_rate:
        return ABSTAIN
    return int(true_y) if u_correct < accuracy else 1 - int(true_y)


def synthetic_column(true_y, accuracy: float, abstain_rate: float, seed: int) -> np.ndarray:
    """Vectorised :func:`synthetic_label` over a column; same draws, same order."""
    _check_rates(accuracy, abstain_rate)
    true_y = np.asarray(true_y, dtype=np.int8)
    u = np.random.default_rng(seed).random((true_y.shape[0], 2))
    votes = np.where(u[:, 1] < accuracy, true_y, 1 - true_y).astype(np.int8)
    votes[u[:, 0] < abstain_rate] = ABSTAIN
    return votes


@dataclass(frozen=True)
class BenchmarkParams:
    n_locations: int = 1000
    accuracies: tuple[float, ...] = (0.85, 0.75, 0.65)
    abstain_rates: tuple[float, ...] = (0.1, 0.1, 0.1)
    class_prior: float = 0.5
    n_images: int = 8
    dim: int = 16
    separation: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "accuracies", tuple(float(a) for a in self.accuracies))
        object.__setattr__(self, "abstain_rates", tuple(float(b) for b in self.abstain_rates))
        if self.n_locations < 1:
            raise ValueError("n_locations must be >= 1")
        if len(self.accuracies) < 1:
            raise ValueError("need at least one labeling function")
        if len(self.accuracies) != len(self.abstain_rates):
            raise ValueError("accuracies and abstain_rates must have the same length")
        for a, b in zip(self.accuracies, self.abstain_rates):
            _check_rates(a, b)
        if not 0.0 <= self.class_prior <= 1.0:
            raise ValueError("class_prior must be in [0, 1]")
        if self.n_images < 1 or self.dim < 1:
            raise ValueError("n_images and dim must be >= 1")
        if not self.separation > 0:
            raise ValueError(f"separation must be positive, got {self.separation}")

    @property
    def n_lfs(self) -> int:
        return len(self.accuracies)


@dataclass(frozen=True)
class SyntheticBenchmark:
    params: BenchmarkParams
    seed: int
    lf_seeds: tuple[int, ...]
    manifest: DatasetManifest
    label_matrix: LabelMatrix
    feature_store: FeatureStore
    ground_truth: GroundTruthSet


def lf_seed(seed: int, j: int) -> int:
    """Seed of synthetic labeling function ``j`` within benchmark ``seed``."""
    return int(np.random.SeedSequence([seed, 1, j]).generate_state(1, dtype=np.uint32)[0])


def lf_name(j: int) -> str:
    return f"lf{j}"


def generate_benchmark(params: BenchmarkParams, seed: int) -> SyntheticBenchmark:
    k = params.n_locations
    y_rng = np.random.default_rng([seed, 0])
    feat_rng = np.random.default_rng([seed, 2])

    y = (y_rng.random(k) < params.class_prior).astype(np.int8)
    ids = tuple(f"loc{i:06d}" for i in range(k))

    seeds = tuple(lf_seed(seed, j) for j in range(params.n_lfs))
    columns = [
        synthetic_column(y, a, b, s)
        for a, b, s in zip(params.accuracies, params.abstain_rates, seeds)
    ]
    matrix = LabelMatrix(ids, tuple(lf_name(j) for j in range(params.n_lfs)), np.stack(columns, axis=1))

    sign = np.where(y == 1, 1.0, -1.0)[:, None, None]
    noise = feat_rng.standard_normal((k, params.n_images, params.dim))
    features = FeatureStore(ids, (noise + sign * params.separation).astype(np.float32))

    images = tuple(
        ImageRef(f"synthetic/{{id}}/img{n}.png", 100.0, 2010 + n) for n in range(params.n_images)
    )
    records = tuple(
        LocationRecord(i, tuple(ImageRef(im.path.format(id=i), im.gsd_cm, im.year) for im in images))
        for i in ids
    )
    return SyntheticBenchmark(
        params=params,
        seed=seed,
        lf_seeds=seeds,
        manifest=DatasetManifest(records),
        label_matrix=matrix,
        feature_store=features,
        ground_truth=GroundTruthSet(ids, y),
    )
