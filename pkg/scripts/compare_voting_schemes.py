"""Score the ground truth produced by each voting scheme against a reference
labeling (for example an existing gully database).

    python3 scripts/compare_voting_schemes.py annotations.jsonl reference.csv
"""

import argparse

from wsgully.io import read_annotations, read_ground_truth
from wsgully.metrics import compute_metrics, confusion, format_table
from wsgully.voting import VotingScheme, build_ground_truth


def main():
    ap = argparse.ArgumentParser(description="Compare voting schemes against a reference labeling.")
    ap.add_argument("annotations", help="expert annotations (JSONL)")
    ap.add_argument("reference", help="reference labels, location_id,label CSV")
    args = ap.parse_args()

    reference = read_ground_truth(args.reference)
    annotations = read_annotations(args.annotations)
    rows = {}
    for scheme in VotingScheme:
        gt = build_ground_truth(annotations, scheme, reference.location_ids)
        positives = int(gt.labels.sum())
        rows[f"{scheme.value} ({positives} pos)"] = compute_metrics(confusion(gt, reference))
    print(format_table(rows), end="")


if __name__ == "__main__":
    main()
