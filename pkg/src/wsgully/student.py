"""Student classifier trained on probabilistic pseudo-labels.

The network is an MLP over the concatenated per-image features of a
location.  Hidden layers use ReLU, the two-unit output a softmax.  Training
minimizes the mean KL divergence KL(target || prediction), i.e. the expected
cross-entropy under the pseudo-label distribution plus a constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClassDistribution, FeatureStore, PseudoLabelSet, check_aligned
from .io import atomic_write, fmt_float
from .optim import Adam

_EVAL_CHUNK = 4096


@dataclass(frozen=True)
class MlpConfig:
    layer_dims: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output entry")
        if any(d < 1 for d in dims):
            raise ValueError("layer dims must be positive")
        if dims[-1] != 2:
            raise ValueError(f"last layer must have 2 outputs, got {dims[-1]}")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(eq=False)
class MlpParams:
    """Weights ``W[i]`` have shape (fan_in, fan_out); a layer computes x @ W + b."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim does not chain with previous layer")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(np.array_equal(a, b) for a, b in zip(mine, theirs))

    def to_json(self) -> str:
        layers = []
        for w, b in zip(self.weights, self.biases):
            layers.append(
                '{"rows":%d,"cols":%d,"weights":[%s],"bias":[%s]}'
                % (w.shape[0], w.shape[1], ",".join(map(fmt_float, w.ravel())), ",".join(map(fmt_float, b)))
            )
        return '{"layer_dims":%s,"layers":[%s]}\n' % (json.dumps(list(self.layer_dims), separators=(",", ":")), ",".join(layers))

    @classmethod
    def from_json(cls, text: str) -> "MlpParams":
        obj = json.loads(text)
        weights, biases = [], []
        for layer in obj["layers"]:
            w = np.array(layer["weights"], dtype=np.float64)
            if w.size != layer["rows"] * layer["cols"]:
                raise ValueError("layer weight count does not match rows x cols")
            weights.append(w.reshape(layer["rows"], layer["cols"]))
            biases.append(np.array(layer["bias"], dtype=np.float64))
        params = cls(weights, biases)
        if list(params.layer_dims) != list(obj["layer_dims"]):
            raise ValueError("layer_dims does not match the stored layers")
        return params

    def save(self, path) -> None:
        with atomic_write(path) as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def init_params(config: MlpConfig) -> MlpParams:
    # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_dims[:-1], config.layer_dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases)


def _forward_logits(params: MlpParams, x: np.ndarray):
    """Logits plus the per-layer inputs and pre-activations needed by backprop."""
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, inputs, pre


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _as_batch(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ValueError(f"expected {params.weights[0].shape[0]} input features, got {x.shape[-1]}")
    return x


def predict_batch(params: MlpParams, x) -> np.ndarray:
    """Class probabilities (p_neg, p_pos) for each row of ``x``."""
    logits, _, _ = _forward_logits(params, _as_batch(params, x))
    return softmax(logits)


def forward(params: MlpParams, features) -> ClassDistribution:
    features = np.asarray(features)
    if features.ndim != 1:
        raise ValueError("forward takes a single feature vector")
    p_neg, p_pos = predict_batch(params, features)[0]
    return ClassDistribution(float(p_neg), float(p_pos))


def _kl_terms(target: np.ndarray, log_pred: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = target * (np.log(target) - log_pred)
    return np.where(target > 0, terms, 0.0)


def noise_aware_loss(pred: ClassDistribution, target: ClassDistribution) -> float:
    """KL(target || pred) in nats; ``math.inf`` if pred rules out a target class."""
    p, t = pred.as_array(), target.as_array()
    if np.any((p == 0) & (t > 0)):
        return math.inf
    with np.errstate(divide="ignore"):
        return float(np.sum(_kl_terms(t, np.log(p))))


def batch_loss(params: MlpParams, x, targets) -> float:
    """Mean KL over a batch, computed from logits via log-softmax."""
    logits, _, _ = _forward_logits(params, _as_batch(params, x))
    return float(np.mean(np.sum(_kl_terms(np.asarray(targets, dtype=np.float64), _log_softmax(logits)), axis=1)))


def loss_and_gradient(params: MlpParams, x, targets):
    """Mean batch KL and its gradient as an MlpParams-shaped object."""
    x = _as_batch(params, x)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    n = x.shape[0]
    if n == 0 or targets.shape[0] != n:
        raise ValueError("need a nonempty batch with one target per row")
    logits, inputs, pre = _forward_logits(params, x)
    log_p = _log_softmax(logits)
    loss = float(np.mean(np.sum(_kl_terms(targets, log_p), axis=1)))

    delta = (np.exp(log_p) - targets) / n
    gw: list[np.ndarray] = [None] * len(params.weights)
    gb: list[np.ndarray] = [None] * len(params.weights)
    for i in reversed(range(len(params.weights))):
        gw[i] = inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0)
    return loss, MlpParams(gw, gb)


def loss_gradient(params: MlpParams, batch) -> MlpParams:
    """Gradient of the mean noise-aware loss over ``batch = (features, targets)``."""
    x, targets = batch
    return loss_and_gradient(params, x, targets)[1]


def _mean_loss(params: MlpParams, x: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for start in range(0, x.shape[0], _EVAL_CHUNK):
        xb = x[start : start + _EVAL_CHUNK].astype(np.float64)
        tb = targets[start : start + _EVAL_CHUNK]
        total += batch_loss(params, xb, tb) * xb.shape[0]
    return total / x.shape[0]


def train_student(
    features: FeatureStore,
    targets: PseudoLabelSet,
    mlp: MlpConfig,
    training: TrainingConfig = TrainingConfig(),
) -> tuple[MlpParams, list[float]]:
    """Train with Adam on seeded minibatches.

    Returns the parameters and the mean training loss before training
    (entry 0) and after each epoch.
    """
    check_aligned(features.location_ids, targets.location_ids, "features", "pseudo-labels")
    x = features.flat()
    if x.shape[1] != mlp.layer_dims[0]:
        raise ValueError(
            f"features have {x.shape[1]} dims per location but layer_dims[0] = {mlp.layer_dims[0]}"
        )
    if x.shape[0] == 0:
        raise ValueError("no training data")
    t = np.asarray(targets.probs, dtype=np.float64)
    params = init_params(mlp)
    arrays = params.arrays()
    opt = Adam(arrays, lr=training.learning_rate, beta1=training.beta1, beta2=training.beta2, eps=training.eps)
    rng = np.random.default_rng(training.seed)
    history = [_mean_loss(params, x, t)]
    for _ in range(training.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], training.batch_size):
            idx = order[start : start + training.batch_size]
            _, grad = loss_and_gradient(params, x[idx], t[idx])
            opt.step(grad.arrays())
        history.append(_mean_loss(params, x, t))
    return params, history


def predict_store(params: MlpParams, features: FeatureStore) -> PseudoLabelSet:
    x = features.flat()
    probs = np.concatenate(
        [predict_batch(params, x[s : s + _EVAL_CHUNK]) for s in range(0, x.shape[0], _EVAL_CHUNK)]
    ) if x.shape[0] else np.zeros((0, 2))
    return PseudoLabelSet(features.location_ids, probs)


def write_loss_log(history, path) -> None:
    with atomic_write(path) as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(history):
            fh.write(f"{epoch},{fmt_float(loss)}\n")


def patch_size_for_gsd(gsd_cm: float, ref_gsd_cm: float, ref_patch_px: int) -> int:
    """Patch size (pixels) covering the same ground extent as the reference patch."""
    if not (gsd_cm > 0 and ref_gsd_cm > 0 and ref_patch_px > 0):
        raise ValueError("gsd and patch size arguments must be positive")
    return max(1, math.floor(ref_patch_px * ref_gsd_cm / gsd_cm + 0.5))
