#!/usr/bin/env python3
"""Sweep patient-classifier regularization on pooled features from a run.

Trains the patient net on ``features_train_aug.csv`` for each
(learning-rate, weight-decay, iterations) combination and reports clipped
log-loss on the run's train and test patients. Useful for checking that
the network neither saturates (weak decay) nor collapses to the uniform
predictor (excessive decay).

Usage: scripts/patient_sweep.py RUN_DIR [--wd 30 100 300] [--iters 600]
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from lungpipe.patient import PROB_CLIP, PatientTrainConfig, predict_patient, train_patient
from lungpipe.pipeline import read_features_csv


def clipped_log_loss(probs, labels):
    p = np.clip(probs, PROB_CLIP[0], PROB_CLIP[1])
    y = np.asarray(labels)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--wd", type=float, nargs="+", default=[30.0, 100.0, 300.0])
    ap.add_argument("--lr", type=float, nargs="+", default=[1e-3])
    ap.add_argument("--iters", type=int, nargs="+", default=[600])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    aug = read_features_csv(args.run_dir / "features_train_aug.csv")
    x_train = np.stack([r[2] for r in aug])
    y_train = [r[1] for r in aug]
    split = {
        json.loads(l)["patient_id"]: json.loads(l)["split"]
        for l in (args.run_dir / "manifest.jsonl").read_text().splitlines()
    }
    rows = read_features_csv(args.run_dir / "features.csv")

    for lr in args.lr:
        for wd in args.wd:
            for iters in args.iters:
                hyper = PatientTrainConfig(
                    iterations=iters, learning_rate=lr, weight_decay=wd, seed=args.seed
                )
                net, _log = train_patient(x_train, y_train, hyper)
                by_split = {"train": ([], []), "test": ([], [])}
                for pid, label, values in rows:
                    probs, labels = by_split[split[pid]]
                    probs.append(predict_patient(net, values))
                    labels.append(label)
                report = "  ".join(
                    f"{name} log-loss {clipped_log_loss(p, y):.4f}"
                    for name, (p, y) in by_split.items()
                )
                print(f"lr={lr:g} wd={wd:g} iters={iters}  {report}")


if __name__ == "__main__":
    main()
