"""Pipeline configuration file.

A single JSON document drives every subcommand.  Parsing is strict: unknown
keys anywhere are rejected so that typos surface before a long labeling run.
Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .labelmodel import CorrelationSet, LabelModelConfig
from .lf.functions import LfSpec, Synthetic, VlmMultiQuestion, VlmSingleQuestion
from .lf.ollama import DEFAULT_MAX_PAYLOAD, VlmEndpointConfig
from .lf.synthetic import BenchmarkParams
from .student import TrainingConfig
from .voting import VotingScheme


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StudentSettings:
    hidden_dims: tuple[int, ...] = ()
    training: TrainingConfig = field(default_factory=TrainingConfig)
    # trailing share of locations kept out of student training
    holdout_fraction: float = 0.0

    def n_train(self, n_locations: int) -> int:
        return n_locations - round(n_locations * self.holdout_fraction)


@dataclass(frozen=True)
class Paths:
    output_dir: Path
    manifest: Path | None = None
    features: Path | None = None
    annotations: Path | None = None
    ground_truth: Path | None = None
    label_matrix: Path | None = None
    image_root: Path | None = None

    def out(self, name: str) -> Path:
        return self.output_dir / name


@dataclass(frozen=True)
class EvalSettings:
    scheme: VotingScheme = VotingScheme.STRICT_NEGATIVE
    threshold: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    endpoints: dict[str, VlmEndpointConfig]
    lfs: tuple[LfSpec, ...]
    label_model: LabelModelConfig
    student: StudentSettings
    paths: Paths
    eval: EvalSettings
    synth: BenchmarkParams


def _take(obj, allowed: dict, where: str) -> dict:
    """Check keys against ``allowed`` ({key: required?}) and return ``obj``."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(k for k, req in allowed.items() if req and k not in obj)
    if missing:
        raise ConfigError(f"{where}: missing key(s) {', '.join(missing)}")
    return obj


def _endpoint(obj, where) -> VlmEndpointConfig:
    o = _take(
        obj,
        {
            "base_url": True,
            "request_timeout_s": False,
            "max_retries": False,
            "backoff_base_s": False,
            "max_in_flight": False,
            "max_payload_bytes": False,
        },
        where,
    )
    return VlmEndpointConfig(
        base_url=str(o["base_url"]),
        request_timeout_s=float(o.get("request_timeout_s", 120.0)),
        max_retries=int(o.get("max_retries", 3)),
        backoff_base_s=float(o.get("backoff_base_s", 2.0)),
        max_in_flight=int(o.get("max_in_flight", 4)),
        max_payload_bytes=int(o.get("max_payload_bytes", DEFAULT_MAX_PAYLOAD)),
    )


def read_lines(path: Path) -> tuple[str, ...]:
    return tuple(
        line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()
    )


def _lf(obj, where, base: Path, endpoints) -> LfSpec:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{where}: expected an object with a 'kind'")
    kind = obj["kind"]
    if kind == "synthetic":
        o = _take(obj, {"name": True, "kind": True, "accuracy": True, "abstain_rate": False, "seed": True}, where)
        spec = Synthetic(float(o["accuracy"]), float(o.get("abstain_rate", 0.0)), int(o["seed"]))
        if not 0 < spec.accuracy <= 1 or not 0 <= spec.abstain_rate < 1:
            raise ConfigError(f"{where}: accuracy must be in (0, 1] and abstain_rate in [0, 1)")
    elif kind == "vlm_single_question":
        o = _take(obj, {"name": True, "kind": True, "endpoint": True, "model": True, "question": True}, where)
        spec = VlmSingleQuestion(str(o["endpoint"]), str(o["model"]), str(o["question"]))
    elif kind == "vlm_multi_question":
        o = _take(
            obj,
            {
                "name": True,
                "kind": True,
                "endpoint": True,
                "vlm_model": True,
                "llm_model": True,
                "questions_file": True,
                "aggregation_prompt_file": True,
            },
            where,
        )
        q_path = base / o["questions_file"]
        p_path = base / o["aggregation_prompt_file"]
        for p in (q_path, p_path):
            if not p.is_file():
                raise ConfigError(f"{where}: file not found: {p}")
        questions = read_lines(q_path)
        if not questions:
            raise ConfigError(f"{where}: question file {q_path} is empty")
        spec = VlmMultiQuestion(
            str(o["endpoint"]), str(o["vlm_model"]), str(o["llm_model"]), questions,
            p_path.read_text(encoding="utf-8"),
        )
    else:
        raise ConfigError(f"{where}: unknown labeling function kind {kind!r}")
    if not isinstance(spec, Synthetic) and spec.endpoint not in endpoints:
        raise ConfigError(f"{where}: endpoint {spec.endpoint!r} is not defined under 'endpoints'")
    name = obj["name"]
    if not isinstance(name, str) or not name or any(c in name for c in ",\n\r"):
        raise ConfigError(f"{where}: invalid name {name!r}")
    return LfSpec(name, spec)


def parse_config(obj, base_dir=".") -> PipelineConfig:
    base = Path(base_dir)
    try:
        return _parse(obj, base)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def _parse(obj, base: Path) -> PipelineConfig:
    top = _take(
        obj,
        {k: False for k in ("endpoints", "lfs", "label_model", "student", "paths", "eval", "synth")},
        "config",
    )

    eps_obj = top.get("endpoints", {})
    if not isinstance(eps_obj, dict):
        raise ConfigError("endpoints: expected an object")
    endpoints = {name: _endpoint(v, f"endpoints.{name}") for name, v in eps_obj.items()}

    lfs_obj = top.get("lfs", [])
    if not isinstance(lfs_obj, list):
        raise ConfigError("lfs: expected a list")
    lfs = tuple(_lf(v, f"lfs[{i}]", base, endpoints) for i, v in enumerate(lfs_obj))
    names = [lf.name for lf in lfs]
    if len(set(names)) != len(names):
        raise ConfigError("lfs: labeling function names must be unique")

    lm = _take(
        top.get("label_model", {}),
        {k: False for k in ("epochs", "learning_rate", "seed", "correlations", "max_component_size")},
        "label_model",
    )
    label_model = LabelModelConfig(
        epochs=lm.get("epochs", 100),
        learning_rate=float(lm.get("learning_rate", 0.01)),
        seed=int(lm.get("seed", 0)),
        correlations=CorrelationSet(tuple(tuple(p) for p in lm.get("correlations", []))),
        max_component_size=int(lm.get("max_component_size", 12)),
    )
    if lfs:
        label_model.correlations.check(len(lfs))

    st = _take(
        top.get("student", {}),
        {k: False for k in ("hidden_dims", "epochs", "batch_size", "learning_rate", "seed", "holdout_fraction")},
        "student",
    )
    hidden = tuple(int(d) for d in st.get("hidden_dims", []))
    if any(d < 1 for d in hidden):
        raise ConfigError("student.hidden_dims must be positive")
    student = StudentSettings(
        hidden,
        TrainingConfig(
            epochs=int(st.get("epochs", 20)),
            batch_size=int(st.get("batch_size", 64)),
            learning_rate=float(st.get("learning_rate", 1e-3)),
            seed=int(st.get("seed", 0)),
        ),
        float(st.get("holdout_fraction", 0.0)),
    )
    if not 0.0 <= student.holdout_fraction < 1.0:
        raise ConfigError("student.holdout_fraction must be in [0, 1)")

    path_keys = ("manifest", "features", "annotations", "ground_truth", "label_matrix", "image_root")
    po = _take(top.get("paths", {}), {k: False for k in path_keys + ("output_dir",)}, "paths")
    paths = Paths(
        output_dir=base / po.get("output_dir", "out"),
        **{k: (base / po[k]) if po.get(k) is not None else None for k in path_keys},
    )

    ev = _take(top.get("eval", {}), {"scheme": False, "threshold": False}, "eval")
    evs = EvalSettings(VotingScheme.parse(ev.get("scheme", "strict-negative")), float(ev.get("threshold", 0.5)))
    if not 0 < evs.threshold < 1:
        raise ConfigError("eval.threshold must be in (0, 1)")

    sy = _take(
        top.get("synth", {}),
        {k: False for k in ("n_locations", "accuracies", "abstain_rates", "class_prior", "n_images", "dim", "separation")},
        "synth",
    )
    defaults = BenchmarkParams()
    accuracies = tuple(sy.get("accuracies", defaults.accuracies))
    abstain = sy.get("abstain_rates")
    if abstain is None:
        abstain = defaults.abstain_rates if len(accuracies) == len(defaults.abstain_rates) else (0.1,) * len(accuracies)
    synth = BenchmarkParams(
        n_locations=int(sy.get("n_locations", defaults.n_locations)),
        accuracies=accuracies,
        abstain_rates=tuple(abstain),
        class_prior=float(sy.get("class_prior", defaults.class_prior)),
        n_images=int(sy.get("n_images", defaults.n_images)),
        dim=int(sy.get("dim", defaults.dim)),
        separation=float(sy.get("separation", defaults.separation)),
    )
    return PipelineConfig(endpoints, lfs, label_model, student, paths, evs, synth)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(obj, path.parent)
