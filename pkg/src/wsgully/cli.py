"""``wsgully`` command line: one subcommand per pipeline stage.

Stages talk to each other only through files in the output directory:

    synth  -> manifest.jsonl, features.egf(.ids), ground_truth.csv,
              synthetic_label_matrix.csv
    label  -> label_matrix.csv
    fit    -> label_model.json
    infer  -> pseudo_labels.csv
    vote   -> ground_truth_<scheme>.csv
    train  -> student.json, student_loss.csv
    eval   -> metrics_<source>[_<split>].json, metrics_<source>[_<split>].txt

Exit codes: 0 ok, 1 usage, 2 invalid config or data, 3 endpoint failure,
4 misaligned data.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import threading
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as wio
from .config import ConfigError, PipelineConfig, load_config, parse_config
from .data import (
    ABSTAIN,
    POSITIVE,
    AlignmentError,
    FeatureStore,
    FormatError,
    GroundTruthSet,
    LabelMatrix,
    PseudoLabelSet,
    check_aligned,
)
from .labelmodel import TrainedLabelModel, fit, majority_vote, predict_all
from .lf.functions import run_labeling_function
from .lf.ollama import EndpointUnreachable, OllamaClient
from .lf.synthetic import generate_benchmark
from .metrics import binarize_all, compute_metrics, confusion, format_table
from .student import MlpConfig, MlpParams, predict_store, train_student, write_loss_log
from .voting import VotingScheme, build_ground_truth

log = logging.getLogger("wsgully")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_ENDPOINT, EXIT_ALIGNMENT = 0, 1, 2, 3, 4

LABEL_MATRIX = "label_matrix.csv"
LABEL_MODEL = "label_model.json"
PSEUDO_LABELS = "pseudo_labels.csv"
STUDENT = "student.json"
STUDENT_LOSS = "student_loss.csv"


class UsageError(Exception):
    pass


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"config does not set paths.{what}")
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _out(cfg: PipelineConfig, name: str) -> Path:
    return cfg.paths.out(name)


# -- subcommands ----------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, seed: int, out_dir: Path) -> list[Path]:
    bench = generate_benchmark(cfg.synth, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [
        out_dir / "manifest.jsonl",
        out_dir / "synthetic_label_matrix.csv",
        out_dir / "features.egf",
        out_dir / "ground_truth.csv",
    ]
    wio.write_manifest(bench.manifest, files[0])
    wio.write_label_matrix(bench.label_matrix, files[1])
    wio.write_feature_store(bench.feature_store, files[2])
    wio.write_ground_truth(bench.ground_truth, files[3])
    return files


def _journal_path(cfg: PipelineConfig) -> Path:
    return _out(cfg, LABEL_MATRIX + ".partial.jsonl")


def _read_journal(path: Path) -> dict[str, dict[str, int]]:
    done: dict[str, dict[str, int]] = {}
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                rec = json.loads(line)
                done.setdefault(rec["lf"], {})[rec["location_id"]] = int(rec["vote"])
            except (ValueError, KeyError, TypeError):
                continue  # torn final line from an interrupted run
    return done


class _Journal:
    def __init__(self, path: Path):
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, lf: str, location_id: str, vote: int) -> None:
        line = json.dumps({"lf": lf, "location_id": location_id, "vote": vote}) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()

    def close(self):
        self._fh.close()


def cmd_label(cfg: PipelineConfig, resume: bool = False) -> Path:
    manifest = wio.read_manifest(_require(cfg.paths.manifest, "manifest"))
    if not cfg.lfs:
        raise ConfigError("config defines no labeling functions")
    gt = None
    if any(not lf.uses_endpoint for lf in cfg.lfs):
        gt = wio.read_ground_truth(_require(cfg.paths.ground_truth, "ground_truth"))
        check_aligned(manifest.location_ids, gt.location_ids, "manifest", "ground truth")

    clients = {}
    for lf in cfg.lfs:
        if lf.uses_endpoint and lf.kind.endpoint not in clients:
            clients[lf.kind.endpoint] = OllamaClient(cfg.endpoints[lf.kind.endpoint])
    for client in clients.values():
        client.probe()

    out = _out(cfg, LABEL_MATRIX)
    out.parent.mkdir(parents=True, exist_ok=True)
    journal_path = _journal_path(cfg)
    if not resume and journal_path.exists():
        journal_path.unlink()
    done = _read_journal(journal_path)
    journal = _Journal(journal_path)
    columns = []
    try:
        for lf in cfg.lfs:
            known = done.get(lf.name, {})
            if known:
                log.info("%s: resuming, %d locations already labeled", lf.name, len(known))
            col = run_labeling_function(
                lf,
                manifest,
                ground_truth=gt,
                image_root=cfg.paths.image_root or (cfg.paths.manifest.parent if cfg.paths.manifest else None),
                known=known,
                on_result=lambda loc, vote, name=lf.name: journal.append(name, loc, vote),
                client=clients.get(getattr(lf.kind, "endpoint", None)),
                probe=False,
            )
            columns.append(col)
            rate = float(np.mean(col == ABSTAIN))
            print(f"{lf.name}: abstain rate {rate:.3f} ({int(np.sum(col == ABSTAIN))}/{len(col)})", file=sys.stderr)
    finally:
        journal.close()
    matrix = LabelMatrix(manifest.location_ids, tuple(lf.name for lf in cfg.lfs), np.stack(columns, axis=1))
    wio.write_label_matrix(matrix, out)
    journal_path.unlink()
    return out


def _label_matrix_path(cfg: PipelineConfig) -> Path:
    return cfg.paths.label_matrix or _out(cfg, LABEL_MATRIX)


def cmd_fit(cfg: PipelineConfig) -> TrainedLabelModel:
    matrix = wio.read_label_matrix(_require(_label_matrix_path(cfg), "label_matrix"))
    model = fit(matrix, cfg.label_model)
    model.save(_out(cfg, LABEL_MODEL))
    print(f"final NLL: {model.final_nll:.6f}")
    return model


def cmd_infer(cfg: PipelineConfig) -> Path:
    matrix = wio.read_label_matrix(_require(_label_matrix_path(cfg), "label_matrix"))
    model = TrainedLabelModel.load(_require(_out(cfg, LABEL_MODEL), "label model checkpoint"))
    if tuple(model.lf_names) != matrix.lf_names:
        raise AlignmentError(f"label matrix columns {matrix.lf_names} != model LFs {model.lf_names}")
    if cfg.paths.manifest is not None:
        manifest = wio.read_manifest(_require(cfg.paths.manifest, "manifest"))
        check_aligned(manifest.location_ids, matrix.location_ids, "manifest", "label matrix")
    out = _out(cfg, PSEUDO_LABELS)
    wio.write_pseudo_labels(predict_all(model, matrix), out)
    return out


def cmd_vote(cfg: PipelineConfig, scheme: VotingScheme) -> Path:
    location_ids = None
    if cfg.paths.manifest is not None:
        location_ids = wio.read_manifest(_require(cfg.paths.manifest, "manifest")).location_ids
    annotations = wio.read_annotations(_require(cfg.paths.annotations, "annotations"))
    try:
        gt = build_ground_truth(annotations, scheme, location_ids)
    except ValueError as exc:
        raise AlignmentError(str(exc)) from None
    out = _out(cfg, f"ground_truth_{scheme.value}.csv")
    wio.write_ground_truth(gt, out)
    return out


def cmd_train(cfg: PipelineConfig) -> Path:
    features = wio.read_feature_store(_require(cfg.paths.features, "features"))
    targets = wio.read_pseudo_labels(_require(_out(cfg, PSEUDO_LABELS), "pseudo-labels"))
    check_aligned(features.location_ids, targets.location_ids, "features", "pseudo-labels")
    n_train = cfg.student.n_train(len(features.location_ids))
    if n_train < 1:
        raise ConfigError("student.holdout_fraction leaves no training locations")
    if n_train < len(features.location_ids):
        ids = features.location_ids[:n_train]
        features = FeatureStore(ids, features.values[:n_train])
        targets = PseudoLabelSet(ids, targets.probs[:n_train])
    dims = (features.n_images * features.dim,) + cfg.student.hidden_dims + (2,)
    mlp = MlpConfig(dims, seed=cfg.student.training.seed)
    params, history = train_student(features, targets, mlp, cfg.student.training)
    out = _out(cfg, STUDENT)
    params.save(out)
    write_loss_log(history, _out(cfg, STUDENT_LOSS))
    print(f"student loss: {history[0]:.6f} -> {history[-1]:.6f}")
    return out


def _predictions(cfg: PipelineConfig, source: str, threshold: float) -> GroundTruthSet:
    if source.startswith("lf:"):
        matrix = wio.read_label_matrix(_require(_label_matrix_path(cfg), "label_matrix"))
        name = source[3:]
        if name not in matrix.lf_names:
            raise ConfigError(f"label matrix has no column {name!r}")
        col = matrix.column(name)
        # an abstain counts as a positive call, like the other tie rules
        return GroundTruthSet(matrix.location_ids, np.where(col == ABSTAIN, POSITIVE, col))
    if source == "mv":
        return majority_vote(wio.read_label_matrix(_require(_label_matrix_path(cfg), "label_matrix")))
    if source == "pseudo":
        pl = wio.read_pseudo_labels(_require(_out(cfg, PSEUDO_LABELS), "pseudo-labels"))
        return GroundTruthSet(pl.location_ids, binarize_all(pl.p_pos, threshold))
    if source == "student":
        params = MlpParams.load(_require(_out(cfg, STUDENT), "student checkpoint"))
        features = wio.read_feature_store(_require(cfg.paths.features, "features"))
        pl = predict_store(params, features)
        return GroundTruthSet(pl.location_ids, binarize_all(pl.p_pos, threshold))
    if source.startswith("csv:"):
        return wio.read_ground_truth(_require(Path(source[4:]), "reference csv"))
    raise UsageError(f"unknown prediction source {source!r}")


def _slug(source: str) -> str:
    if source.startswith("csv:"):
        source = "csv_" + Path(source[4:]).stem
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", source)


def _split_rows(cfg: PipelineConfig, split: str, ids: tuple[str, ...]) -> np.ndarray:
    """Row indices of ``split`` ("train" or "holdout"), following feature-store order."""
    feature_ids = wio.read_feature_store(_require(cfg.paths.features, "features")).location_ids
    check_aligned(feature_ids, ids, "features", "evaluation set")
    n_train = cfg.student.n_train(len(ids))
    return np.arange(n_train) if split == "train" else np.arange(n_train, len(ids))


def _subset(gt: GroundTruthSet, rows: np.ndarray) -> GroundTruthSet:
    return GroundTruthSet(tuple(gt.location_ids[i] for i in rows), gt.labels[rows])


def cmd_eval(
    cfg: PipelineConfig,
    source: str,
    reference: Path | None = None,
    threshold: float | None = None,
    split: str = "all",
):
    threshold = cfg.eval.threshold if threshold is None else threshold
    ref_path = reference or cfg.paths.ground_truth
    gt = wio.read_ground_truth(_require(ref_path, "ground_truth"))
    preds = _predictions(cfg, source, threshold)
    check_aligned(preds.location_ids, gt.location_ids, "predictions", "reference")
    if split != "all":
        rows = _split_rows(cfg, split, gt.location_ids)
        if rows.size == 0:
            raise ConfigError(f"the {split} split is empty; check student.holdout_fraction")
        preds, gt = _subset(preds, rows), _subset(gt, rows)
    report = compute_metrics(confusion(preds, gt))
    label = source if split == "all" else f"{source} ({split})"
    table = format_table({label: report})
    print(table, end="")
    cfg.paths.output_dir.mkdir(parents=True, exist_ok=True)
    slug = _slug(source) if split == "all" else f"{_slug(source)}_{split}"
    with wio.atomic_write(_out(cfg, f"metrics_{slug}.json")) as fh:
        fh.write(report.to_json() + "\n")
    with wio.atomic_write(_out(cfg, f"metrics_{slug}.txt")) as fh:
        fh.write(table)
    return report


# -- entry point --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsgully", description="Weak-supervision pipeline for ephemeral gully detection.")
    p.add_argument("command", choices=["synth", "label", "fit", "infer", "vote", "train", "eval"])
    p.add_argument("--config", type=Path, help="pipeline JSON config (optional for synth)")
    p.add_argument("--seed", type=int, help="overrides synth/student seeds")
    p.add_argument("--out", type=Path, help="overrides paths.output_dir")
    p.add_argument("--resume", action="store_true", help="label: continue an interrupted run")
    p.add_argument("--scheme", choices=[s.value for s in VotingScheme], help="vote: voting scheme")
    p.add_argument("--threshold", type=float, help="eval: binarization threshold")
    p.add_argument(
        "--source",
        default="student",
        help="eval: predictions to score: lf:<name>, mv, pseudo, student or csv:<path>",
    )
    p.add_argument("--reference", type=Path, help="eval: ground-truth CSV (default paths.ground_truth)")
    p.add_argument(
        "--split",
        choices=["all", "train", "holdout"],
        default="all",
        help="eval: score every location or only one side of student.holdout_fraction",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _dispatch(args) -> None:
    if args.config is None:
        if args.command != "synth":
            raise UsageError(f"{args.command} requires --config")
        cfg = parse_config({})
    else:
        cfg = load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, output_dir=args.out))
    if args.seed is not None:
        training = replace(cfg.student.training, seed=args.seed)
        cfg = replace(cfg, student=replace(cfg.student, training=training))
    if args.threshold is not None and not 0 < args.threshold < 1:
        raise ConfigError("--threshold must be in (0, 1)")

    if args.command == "synth":
        for f in cmd_synth(cfg, args.seed or 0, cfg.paths.output_dir):
            print(f)
    elif args.command == "label":
        print(cmd_label(cfg, resume=args.resume))
    elif args.command == "fit":
        cmd_fit(cfg)
    elif args.command == "infer":
        print(cmd_infer(cfg))
    elif args.command == "vote":
        scheme = VotingScheme(args.scheme) if args.scheme else cfg.eval.scheme
        print(cmd_vote(cfg, scheme))
    elif args.command == "train":
        print(cmd_train(cfg))
    elif args.command == "eval":
        cmd_eval(cfg, args.source, args.reference, args.threshold, args.split)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"wsgully: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AlignmentError as exc:
        print(f"wsgully: misaligned data: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except EndpointUnreachable as exc:
        print(f"wsgully: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"wsgully: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
