"""Compare labeling functions, majority vote, label model and student on a
held-out split of the synthetic benchmark.

    python3 scripts/synthetic_benchmark.py --seed 1 --locations 12000 --holdout 2000
"""

import argparse
import time

import numpy as np

from wsgully.data import ABSTAIN, FeatureStore, GroundTruthSet
from wsgully.labelmodel import LabelModelConfig, fit, majority_vote, predict_all
from wsgully.lf import BenchmarkParams, generate_benchmark
from wsgully.metrics import binarize_all, compute_metrics, confusion, format_table
from wsgully.student import MlpConfig, TrainingConfig, predict_store, train_student


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--locations", type=int, default=12_000)
    ap.add_argument("--holdout", type=int, default=2_000)
    ap.add_argument("--accuracies", type=float, nargs="+", default=[0.85, 0.75, 0.65])
    ap.add_argument("--abstain", type=float, default=0.1)
    ap.add_argument("--separation", type=float, default=0.5)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--hidden", type=int, nargs="*", default=[])
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    if not 0 < args.holdout < args.locations:
        ap.error("--holdout must be between 0 and --locations")

    params = BenchmarkParams(
        n_locations=args.locations,
        accuracies=tuple(args.accuracies),
        abstain_rates=(args.abstain,) * len(args.accuracies),
        n_images=args.images,
        dim=args.dim,
        separation=args.separation,
    )
    start = time.perf_counter()
    bench = generate_benchmark(params, args.seed)
    n_train = args.locations - args.holdout
    train, held = np.arange(n_train), np.arange(n_train, args.locations)
    ids = bench.ground_truth.location_ids
    gt = GroundTruthSet(tuple(ids[i] for i in held), bench.ground_truth.labels[held])

    train_lm = bench.label_matrix.take_rows(train)
    held_lm = bench.label_matrix.take_rows(held)
    model = fit(train_lm, LabelModelConfig())
    pseudo = predict_all(model, train_lm)

    fs = bench.feature_store
    mlp = MlpConfig((args.images * args.dim, *args.hidden, 2), seed=args.seed)
    student, history = train_student(
        FeatureStore(pseudo.location_ids, fs.values[train]), pseudo, mlp, TrainingConfig(epochs=args.epochs, seed=args.seed)
    )
    held_fs = FeatureStore(gt.location_ids, fs.values[held])

    rows = {}
    for name in held_lm.lf_names:
        col = held_lm.column(name)
        rows[name] = compute_metrics(confusion(np.where(col == ABSTAIN, 1, col), gt))
    rows["majority vote"] = compute_metrics(confusion(majority_vote(held_lm), gt))
    rows["label model"] = compute_metrics(confusion(binarize_all(predict_all(model, held_lm).p_pos), gt))
    rows["student"] = compute_metrics(confusion(binarize_all(predict_store(student, held_fs).p_pos), gt))

    print(f"fitted w_acc: {np.round(model.weights.w_acc, 3).tolist()}")
    print(f"student loss: {history[0]:.4f} -> {history[-1]:.4f}")
    print(f"held-out locations: {len(gt)}\n")
    print(format_table(rows), end="")
    print(f"\nelapsed {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
