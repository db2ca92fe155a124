"""Nodule malignancy classifier: a pre-activation basic-block ResNet over
32^3 nodule volumes with lighter strides than the stock 18-layer layout
(strides removed in stages 1, 2 and 4), global average pooling and a
2-way softmax head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .extract import NoduleVolume32, augment_orientations
from .nncore import AdamState, GradientError, PreActBasic, adam_step, backward, he_init_

_BASE_WIDTHS = (64, 128, 256, 512)
BENIGN_IDX, MALIGNANT_IDX = 0, 1


@dataclass
class ClassifierConfig:
    """Nodule classifier architecture; strides (1, 2, 1, 1) reproduce the
    light-stride layout, (2, 2, 2, 2) the original one for A/B runs."""

    input_side: int = 32
    block_repeats: tuple = (2, 2, 2, 2)
    stage_strides: tuple = (1, 2, 1, 1)
    width_divisor: int = 4  # 1 for the full-scale network

    def __post_init__(self):
        if self.input_side % 4 != 0:
            raise ValueError(f"input side must be a multiple of 4, got {self.input_side}")
        if len(self.block_repeats) != 4 or len(self.stage_strides) != 4:
            raise ValueError("expected 4 stages")


@dataclass
class NoduleLabelSet:
    """Labelled 32^3 nodule volumes ready for classifier training."""

    volumes: list  # of (32, 32, 32) float arrays
    labels: list  # of int: 0 benign, 1 malignant
    patient_ids: list  # of str, parallel to volumes
    strategy: str = ""  # labelling strategy used, informational
    augmentation_multiplicity: int = 1

    def __post_init__(self):
        if not (len(self.volumes) == len(self.labels) == len(self.patient_ids)):
            raise ValueError("volumes, labels and patient_ids must be parallel")


class ClassifierNet(nn.Module):
    """Stem conv + maxpool, four basic-block stages, global pool, FC, softmax."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        widths = [w // cfg.width_divisor for w in _BASE_WIDTHS]
        self.stem = nn.Conv3d(1, widths[0], 7, stride=2, padding=3, bias=False)
        self.pool = nn.MaxPool3d(3, stride=2, padding=1)
        blocks = []
        in_ch = widths[0]
        for width, repeats, stride in zip(widths, cfg.block_repeats, cfg.stage_strides):
            for i in range(repeats):
                blocks.append(PreActBasic(in_ch, width, stride=stride if i == 0 else 1))
                in_ch = width
        self.blocks = nn.Sequential(*blocks)
        self.final_bn = nn.BatchNorm3d(in_ch, momentum=0.1)
        self.fc = nn.Linear(in_ch, 2)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, s, s, s) input, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.input_side:
            raise ValueError(
                f"input side {x.shape[2]} does not match configured {self.cfg.input_side}"
            )
        out = self.pool(self.stem(x))
        out = self.blocks(out)
        out = F.leaky_relu(self.final_bn(out), 0.1)
        out = F.adaptive_avg_pool3d(out, 1).flatten(1)
        return self.fc(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class probabilities (N, 2): [benign, malignant]."""
        return torch.softmax(self.logits(x), dim=1)

    def stage_output_sides(self) -> list[int]:
        """Spatial sides after stem, pool and each stage (shape ledger probe)."""
        sides = []
        x = torch.zeros(1, 1, *(self.cfg.input_side,) * 3)
        was_training = self.training
        self.eval()  # batch statistics are undefined on a 1-voxel probe
        with torch.no_grad():
            x = self.stem(x)
            sides.append(x.shape[-1])
            x = self.pool(x)
            sides.append(x.shape[-1])
            i = 0
            for repeats in self.cfg.block_repeats:
                for _ in range(repeats):
                    x = self.blocks[i](x)
                    i += 1
                sides.append(x.shape[-1])
        self.train(was_training)
        return sides


def build_classifier(cfg: ClassifierConfig, seed: int = 0) -> ClassifierNet:
    net = ClassifierNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    he_init_(net, gen)
    return net


@dataclass
class ClassifierTrainConfig:
    """Training hyperparameters; the full-scale step count is 6000."""

    iterations: int = 1000
    batch_size: int = 32
    learning_rate: float = 0.001
    weight_decay: float = 1e-4
    val_fraction: float = 0.1  # of patients, never of nodules
    seed: int = 0
    log_every: int = 100


def split_by_patient(patient_ids: list[str], val_fraction: float, rng: np.random.Generator):
    """Patient-disjoint index split; returns (train_idx, val_idx)."""
    unique = sorted(set(patient_ids))
    perm = rng.permutation(len(unique))
    n_val = max(1, int(round(val_fraction * len(unique)))) if len(unique) > 1 else 0
    val_patients = {unique[i] for i in perm[:n_val]}
    train_idx = [i for i, p in enumerate(patient_ids) if p not in val_patients]
    val_idx = [i for i, p in enumerate(patient_ids) if p in val_patients]
    return train_idx, val_idx


def rebalance_malignant(
    volumes, labels, patient_ids, rng: np.random.Generator, target_low=0.8, target_high=1.25
):
    """Augment malignant examples by flips/rotations until the
    malignant:benign ratio falls within [target_low, target_high]."""
    volumes = list(volumes)
    labels = list(labels)
    patient_ids = list(patient_ids)
    mal = [i for i, l in enumerate(labels) if l == MALIGNANT_IDX]
    ben = [i for i, l in enumerate(labels) if l == BENIGN_IDX]
    if not mal or not ben:
        return volumes, labels, patient_ids
    per_source = {i: 1 for i in mal}
    n_mal, n_ben = len(mal), len(ben)
    while n_mal < target_low * n_ben:
        src = mal[int(rng.integers(len(mal)))]
        k = per_source[src]
        if k >= 48:
            break  # all orientations of every source exhausted eventually
        nv = NoduleVolume32(voxels=np.asarray(volumes[src]), source=("", src), scale_factor=1.0)
        aug = augment_orientations(nv, k + 1, seed=src)[-1]
        volumes.append(aug.voxels)
        labels.append(MALIGNANT_IDX)
        patient_ids.append(patient_ids[src])
        per_source[src] = k + 1
        n_mal += 1
    return volumes, labels, patient_ids


def train_classifier(data: NoduleLabelSet, hyper: ClassifierTrainConfig):
    """Train the nodule classifier; returns ``(net, log_rows)``.

    The validation split is patient-disjoint. Malignant examples are
    rebalanced by orientation augmentation before training. Log rows are
    ``(step, train_loss, val_loss)``.
    """
    if not data.volumes:
        raise ValueError("empty nodule set")
    present = set(data.labels)
    for idx, name in ((BENIGN_IDX, "benign"), (MALIGNANT_IDX, "malignant")):
        if idx not in present:
            raise ValueError(f"single-class dataset: no {name} examples")
    rng = np.random.default_rng(hyper.seed)
    torch.manual_seed(hyper.seed)

    train_idx, val_idx = split_by_patient(data.patient_ids, hyper.val_fraction, rng)
    tv = [np.asarray(data.volumes[i], dtype=np.float32) for i in train_idx]
    tl = [data.labels[i] for i in train_idx]
    tp = [data.patient_ids[i] for i in train_idx]
    tv, tl, tp = rebalance_malignant(tv, tl, tp, rng)

    val_x = None
    if val_idx:
        val_x = torch.from_numpy(
            np.stack([np.asarray(data.volumes[i], dtype=np.float32) for i in val_idx])[:, None]
        )
        val_t = torch.tensor([data.labels[i] for i in val_idx])

    cfg = ClassifierConfig()
    net = build_classifier(cfg, seed=hyper.seed)
    params = dict(net.named_parameters())
    state = AdamState(learning_rate=hyper.learning_rate, weight_decay=hyper.weight_decay)
    xs = np.stack(tv)[:, None]
    ts = np.asarray(tl, dtype=np.int64)
    log = []
    for step in range(1, hyper.iterations + 1):
        idx = rng.integers(len(xs), size=min(hyper.batch_size, len(xs)))
        x = torch.from_numpy(xs[idx])
        t = torch.from_numpy(ts[idx])
        net.train()
        # cross-entropy on log-softmax of logits for numerical stability
        loss = F.nll_loss(F.log_softmax(net.logits(x), dim=1), t)
        if not math.isfinite(float(loss.detach())):
            raise GradientError(f"non-finite loss at step {step}")
        grads = backward(loss, net)
        adam_step(params, grads, state)
        if step % hyper.log_every == 0 or step == 1:
            val_loss = float("nan")
            if val_x is not None:
                net.eval()
                with torch.no_grad():
                    vl = F.log_softmax(net.logits(val_x), dim=1)
                    val_loss = float(F.nll_loss(vl, val_t))
            log.append((step, float(loss.detach()), val_loss))
    return net, log


def classify_nodules(net: ClassifierNet, nodules: list, batch_size: int = 64) -> list[float]:
    """Malignancy probability per 32^3 nodule volume (eval mode)."""
    if not nodules:
        return []
    net.eval()
    vols = [nv.voxels if isinstance(nv, NoduleVolume32) else np.asarray(nv) for nv in nodules]
    for v in vols:
        if v.shape != (net.cfg.input_side,) * 3:
            raise ValueError(f"nodule volume shape {v.shape} != {(net.cfg.input_side,) * 3}")
    out = []
    with torch.no_grad():
        for start in range(0, len(vols), batch_size):
            x = torch.from_numpy(np.stack(vols[start : start + batch_size])[:, None].astype(np.float32))
            out.extend(float(p) for p in net(x)[:, MALIGNANT_IDX])
    return out
