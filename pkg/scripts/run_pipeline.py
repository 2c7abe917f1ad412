"""Run every pipeline stage in order for one config.

    python3 scripts/run_pipeline.py configs/synthetic.json --synth --seed 0

``--synth`` first generates the synthetic benchmark; ``--vote`` builds the
ground truth from expert annotations before evaluating.
"""

import argparse
import sys

from wsgully.cli import main as wsgully


def main():
    ap = argparse.ArgumentParser(description="Run the full pipeline for one config.")
    ap.add_argument("config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--synth", action="store_true", help="generate the synthetic benchmark first")
    ap.add_argument("--vote", action="store_true", help="build ground truth from annotations")
    ap.add_argument("--resume", action="store_true", help="resume an interrupted labeling run")
    ap.add_argument("--holdout", action="store_true", help="also score the student holdout split")
    args = ap.parse_args()

    cfg = ["--config", args.config]
    stages = []
    if args.synth:
        stages.append(["synth", *cfg, "--seed", str(args.seed)])
    stages.append(["label", *cfg] + (["--resume"] if args.resume else []))
    stages += [["fit", *cfg], ["infer", *cfg]]
    if args.vote:
        stages.append(["vote", *cfg])
    stages.append(["train", *cfg])
    stages += [["eval", *cfg, "--source", s] for s in ("mv", "pseudo", "student")]
    if args.holdout:
        stages += [["eval", *cfg, "--source", s, "--split", "holdout"] for s in ("mv", "student")]

    for argv in stages:
        print(f"$ wsgully {' '.join(argv)}", file=sys.stderr)
        code = wsgully(argv)
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
