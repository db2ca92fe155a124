#!/usr/bin/env python3
"""A/B the nodule-labelling strategies on an existing run directory.

For each strategy the script counts mislabelled training nodules against
the synthetic ground truth, trains a classifier (same seed and
hyperparameters), and reports held-out F1 on annotation-matched
candidates.

Usage: scripts/labelling_ab.py RUN_DIR [--w 0.7]
"""

import argparse

import numpy as np

from lungpipe.classifier import ClassifierTrainConfig, classify_nodules, train_classifier
from lungpipe.config import PipelineConfig
from lungpipe.gridlabels import LabellingStrategy
from lungpipe.metrics import ScoredSet, confusion, sensitivity_specificity_f1
from lungpipe.pipeline import (
    RunDir,
    _candidates_by_patient,
    _canon_records,
    _nodule_volumes,
    build_nodule_label_set,
    derive_seed,
    match_candidate,
)


def candidate_truth(run, records):
    cands = _candidates_by_patient(run)
    truth = []
    for rec in records:
        for row in cands.get(rec["patient_id"], []):
            gt = match_candidate(row, rec["nodules"])
            truth.append(1 if gt is not None and gt["label"] == "malignant" else 0)
    return np.asarray(truth)


def held_out_f1(run, net, records):
    cands = _candidates_by_patient(run)
    pairs = []
    for rec in records:
        rows = cands.get(rec["patient_id"], [])
        if not rows:
            continue
        probs = classify_nodules(net, list(_nodule_volumes(run, rec["patient_id"])))
        for row, p in zip(rows, probs):
            gt = match_candidate(row, rec["nodules"])
            if gt is not None and gt.get("label") is not None:
                pairs.append((p, 1 if gt["label"] == "malignant" else 0))
    s = ScoredSet(
        np.asarray([p for p, _ in pairs]), np.asarray([y for _, y in pairs]), threshold=0.5
    )
    return sensitivity_specificity_f1(confusion(s))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir")
    ap.add_argument("--w", type=float, default=0.7, help="largest-nodule size proportion")
    args = ap.parse_args()

    run = RunDir(args.run_dir, PipelineConfig(), force=True)
    cfg = run.cfg
    train_records = _canon_records(run, "train")
    test_records = _canon_records(run, "test")
    truth = candidate_truth(run, train_records)
    hyper = ClassifierTrainConfig(
        iterations=cfg.classifier.iterations,
        batch_size=cfg.classifier.batch_size,
        learning_rate=cfg.classifier.learning_rate,
        weight_decay=cfg.classifier.weight_decay,
        val_fraction=cfg.classifier.val_fraction,
        seed=derive_seed(cfg.seed, "train-classifier"),
    )

    strategies = [
        LabellingStrategy("largest-nodule", w=args.w),
        LabellingStrategy("patient-label"),
    ]
    for strategy in strategies:
        data = build_nodule_label_set(run, train_records, strategy)
        mislabels = int(np.sum(truth != np.asarray(data.labels)))
        net, _log = train_classifier(data, hyper)
        sens, spec, f1 = held_out_f1(run, net, test_records)
        print(
            f"{data.strategy:24s} mislabelled {mislabels:4d}/{len(truth)}  "
            f"held-out sens {sens:.3f} spec {spec:.3f} F1 {f1:.3f}"
        )


if __name__ == "__main__":
    main()
