"""Grid-cell detectors: the 2-class nodule detector and the 3-class
malignancy detector, with class-balanced cross-entropy losses and their
training loops.

The backbone is a pre-activation bottleneck ResNet over 3D volumes whose
stride ledger (2, 2, 2, 2, 1, 1) maps a crop of side s to an (s/16)^3
class probability map; the usual global average pooling is replaced by a
1x1x1 convolution so each output cell covers one 16^3 block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .gridlabels import BINARY, CellLabelGrid, HAS_NODULE, label_cells, malignancy_cell_labels
from .nncore import (
    AdamState,
    GradientError,
    PreActBottleneck,
    adam_step,
    backward,
    he_init_,
    load_module_arrays,
    module_arrays,
)
from .volume import CELL

DEPTH_VARIANTS = {
    "full-101": {"repeats": (3, 4, 23, 3), "width_divisor": 1},
    "desk": {"repeats": (1, 1, 2, 1), "width_divisor": 4},
}

_BASE_WIDTHS = (64, 128, 256, 512)
_STAGE_STRIDES = (2, 2, 1, 1)
LOG_EPS = 1e-12


@dataclass
class DetectorConfig:
    """Detector architecture knobs; crop_size must be a multiple of 16."""

    class_count: int = 2
    depth_variant: str = "desk"
    crop_size: int = 32

    def __post_init__(self):
        if self.class_count not in (2, 3):
            raise ValueError(f"class_count must be 2 or 3, got {self.class_count}")
        if self.depth_variant not in DEPTH_VARIANTS:
            raise ValueError(f"unknown depth_variant {self.depth_variant!r}")
        if self.crop_size % CELL != 0:
            raise ValueError(f"crop_size must be divisible by {CELL}, got {self.crop_size}")

    @property
    def map_side(self) -> int:
        return self.crop_size // CELL


@dataclass
class ClassProbMap:
    """Per-cell class distributions for one crop: shape (g, g, g, c)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 4:
            raise ValueError(f"expected 4D (d, h, w, c), got shape {self.probs.shape}")
        if np.any(self.probs < 0):
            raise ValueError("negative probabilities")
        sums = self.probs.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("cell distributions must sum to 1")

    @property
    def class_count(self) -> int:
        return self.probs.shape[-1]


@dataclass
class BatchClassFreqs:
    """Per-class cell counts within one mini-batch."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("class counts must be non-negative")


def batch_class_freqs(truth: torch.Tensor | np.ndarray, class_count: int) -> BatchClassFreqs:
    """Count how often each class occurs among the batch's cells."""
    t = np.asarray(truth.detach().cpu() if isinstance(truth, torch.Tensor) else truth)
    return BatchClassFreqs(np.bincount(t.ravel(), minlength=class_count))


class DetectorNet(nn.Module):
    """Stem conv + maxpool, four bottleneck stages, 1x1x1 head, softmax."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        variant = DEPTH_VARIANTS[cfg.depth_variant]
        div = variant["width_divisor"]
        widths = [w // div for w in _BASE_WIDTHS]
        self.stem = nn.Conv3d(1, widths[0], 7, stride=2, padding=3, bias=False)
        self.pool = nn.MaxPool3d(3, stride=2, padding=1)
        blocks = []
        in_ch = widths[0]
        for width, repeats, stride in zip(widths, variant["repeats"], _STAGE_STRIDES):
            for i in range(repeats):
                blocks.append(
                    PreActBottleneck(in_ch, width, width * 4, stride=stride if i == 0 else 1)
                )
                in_ch = width * 4
        self.blocks = nn.Sequential(*blocks)
        self.final_bn = nn.BatchNorm3d(in_ch, momentum=0.1)
        self.head = nn.Conv3d(in_ch, cfg.class_count, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, s, s, s) input, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.crop_size:
            raise ValueError(
                f"input side {x.shape[2]} does not match configured crop {self.cfg.crop_size}"
            )
        out = self.pool(self.stem(x))
        out = self.blocks(out)
        out = F.leaky_relu(self.final_bn(out), 0.1)
        return self.head(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class probabilities, shape (N, c, g, g, g)."""
        return torch.softmax(self.logits(x), dim=1)


def build_detector(cfg: DetectorConfig, seed: int = 0) -> DetectorNet:
    """Construct and He-initialize a detector."""
    net = DetectorNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    he_init_(net, gen)
    return net


def _as_prob_tensor(pred) -> torch.Tensor:
    if isinstance(pred, ClassProbMap):
        # (g, g, g, c) -> (1, c, g, g, g)
        return torch.from_numpy(np.moveaxis(pred.probs, -1, 0)[None]).double()
    if isinstance(pred, np.ndarray):
        return torch.from_numpy(pred).double()
    return pred


def _as_truth_tensor(truth) -> torch.Tensor:
    if isinstance(truth, CellLabelGrid):
        return torch.from_numpy(truth.cells[None].astype(np.int64))
    if isinstance(truth, np.ndarray):
        return torch.from_numpy(truth.astype(np.int64))
    return truth.long()


def _freq_counts(freqs) -> np.ndarray:
    if isinstance(freqs, BatchClassFreqs):
        return freqs.counts.astype(np.float64)
    return np.asarray(freqs, dtype=np.float64)


def loss_balanced_binary(pred, truth, freqs) -> torch.Tensor:
    """Class-balanced binary cross-entropy over grid cells.

    The positive (has-nodule) class is upweighted by the batch frequency
    ratio f_no-nodule / f_nodule, then the per-cell terms
    ``-w(true) * log p(true)`` are averaged over cells and divided by the
    class count. When no nodule cell is present the weight is 1.
    """
    p = _as_prob_tensor(pred)
    t = _as_truth_tensor(truth)
    if p.shape[1] != 2:
        raise ValueError(f"binary loss expects 2 classes, got {p.shape[1]}")
    if torch.any(p < 0):
        raise ValueError("negative probabilities")
    counts = _freq_counts(freqs)
    w_pos = counts[0] / counts[1] if counts[1] > 0 else 1.0
    weights = torch.tensor([1.0, float(w_pos)], dtype=p.dtype)
    p_true = p.gather(1, t.unsqueeze(1)).squeeze(1)
    per_cell = -weights[t] * torch.log(p_true.clamp_min(LOG_EPS))
    return per_cell.mean() / 2.0


def loss_inverse_freq(pred, truth, freqs) -> torch.Tensor:
    """Inverse-frequency balanced cross-entropy for multiple classes.

    Per-cell term is ``-(1/f_true) * log p(true)``, averaged over cells and
    divided by the class count. Classes absent from the batch contribute no
    terms; scaling all frequencies by k scales the loss by 1/k exactly.
    """
    p = _as_prob_tensor(pred)
    t = _as_truth_tensor(truth)
    if torch.any(p < 0):
        raise ValueError("negative probabilities")
    counts = torch.from_numpy(_freq_counts(freqs)).to(p.dtype)
    c = p.shape[1]
    if len(counts) != c:
        raise ValueError(f"frequency vector length {len(counts)} != class count {c}")
    f_true = counts[t]
    if torch.any(f_true <= 0):
        raise ValueError("a cell's true class has zero batch frequency")
    p_true = p.gather(1, t.unsqueeze(1)).squeeze(1)
    per_cell = -torch.log(p_true.clamp_min(LOG_EPS)) / f_true
    return per_cell.mean() / c


@dataclass
class TrainConfig:
    """Detector training hyperparameters (desk-scale defaults).

    Paper-scale values: 100 000 iterations of 24 mini-batches for the
    nodule detector; 20 000 + 30 000 for the malignancy fine-tune.
    """

    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    crops_per_patient: int = 128
    seed: int = 0
    loss: str = "balanced"  # "balanced" (2-class) | "inverse-freq"
    log_every: int = 50
    # malignancy fine-tune schedule: (iterations, lr) phases
    finetune_phases: tuple = ((800, 0.01), (1200, 0.001))


@dataclass
class PatientCrops:
    """Per-patient training material: crops plus their cell labels."""

    patient_id: str
    crops: np.ndarray  # (n, s, s, s) float32
    cell_labels: np.ndarray  # (n, g, g, g) int8, binary alphabet
    cancer: bool = False

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.cell_labels.reshape(len(self.crops), -1).any(axis=1))


def build_patient_crops(norm_volume, annotations, crop_size: int, stride: int, cancer: bool):
    """Tile a canonical volume and label each crop's cells."""
    from .volume import tile_crops

    cs = tile_crops(norm_volume, crop_size, stride)
    crops = np.stack(cs.crops).astype(np.float32)
    labels = np.stack(
        [label_cells(origin, crop_size, annotations).cells for origin in cs.origins]
    )
    return PatientCrops(
        patient_id=norm_volume.patient_id, crops=crops, cell_labels=labels, cancer=cancer
    ), cs.origins


def sample_epoch_crops(
    dataset: list[PatientCrops], rng: np.random.Generator, crops_per_patient: int
) -> list[tuple[int, int]]:
    """Assemble one epoch's crop pool as (patient_idx, crop_idx) pairs.

    At most ``crops_per_patient`` random crops are taken per patient;
    nodule-positive crops are then duplicated (sampling with replacement
    from the positive pool) until positives >= negatives.
    """
    pool: list[tuple[int, int]] = []
    positives: list[tuple[int, int]] = []
    for pi, patient in enumerate(dataset):
        n = len(patient.crops)
        take = min(crops_per_patient, n)
        chosen = rng.choice(n, size=take, replace=False)
        pos = set(patient.positive_indices.tolist())
        for ci in chosen:
            pool.append((pi, int(ci)))
            if int(ci) in pos:
                positives.append((pi, int(ci)))
    if positives:
        n_pos = len(positives)
        n_neg = len(pool) - n_pos
        while n_pos < n_neg:
            pool.append(positives[rng.integers(len(positives))])
            n_pos += 1
    return pool


def _train_loop(net, batches, lr_schedule, hyper: TrainConfig, loss_fn, class_count):
    """Shared optimizer loop; returns log rows (step, loss, lr)."""
    params = dict(net.named_parameters())
    state = AdamState(learning_rate=lr_schedule(0), weight_decay=hyper.weight_decay)
    log = []
    net.train()
    for step, (x, t) in enumerate(batches, start=1):
        state.learning_rate = lr_schedule(step - 1)
        probs = net(x)
        freqs = batch_class_freqs(t, class_count)
        loss = loss_fn(probs, t, freqs)
        if not math.isfinite(float(loss.detach())):
            raise GradientError(f"non-finite loss at step {step}")
        grads = backward(loss, net)
        adam_step(params, grads, state)
        if step % hyper.log_every == 0 or step == 1:
            log.append((step, float(loss.detach()), state.learning_rate))
    return log


def _batch_iterator(dataset, pool, hyper, rng, iterations, label_transform=None):
    for _ in range(iterations):
        idx = rng.integers(len(pool), size=hyper.batch_size)
        xs, ts = [], []
        for i in idx:
            pi, ci = pool[i]
            patient = dataset[pi]
            xs.append(patient.crops[ci])
            lab = patient.cell_labels[ci]
            if label_transform is not None:
                lab = label_transform(patient, lab)
            ts.append(lab.astype(np.int64))
        x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
        t = torch.from_numpy(np.stack(ts))
        yield x, t


def train_nodule_detector(dataset: list[PatientCrops], cfg: DetectorConfig, hyper: TrainConfig):
    """Train the 2-class nodule detector; returns ``(net, log_rows)``."""
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.class_count != 2:
        raise ValueError("nodule detector must have class_count 2")
    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    net = build_detector(cfg, seed=hyper.seed)
    pool = sample_epoch_crops(dataset, rng, hyper.crops_per_patient)
    loss_fn = loss_balanced_binary if hyper.loss == "balanced" else loss_inverse_freq
    batches = _batch_iterator(dataset, pool, hyper, rng, hyper.iterations)
    log = _train_loop(net, batches, lambda s: hyper.learning_rate, hyper, loss_fn, 2)
    return net, log


def finetune_malignancy(
    base_arrays: dict[str, np.ndarray],
    base_cfg: DetectorConfig,
    dataset: list[PatientCrops],
    hyper: TrainConfig,
):
    """Fine-tune a 3-class malignancy detector from nodule-detector weights.

    All layers except the final 1x1x1 head are initialized from the base
    checkpoint; the head is freshly He-initialized for 3 classes. Training
    uses only nodule-bearing crops, ternary labels derived from patient
    cancer status, the inverse-frequency loss, and a two-phase learning
    rate schedule.
    """
    if not dataset:
        raise ValueError("empty dataset")
    cfg = replace(base_cfg, class_count=3)
    torch.manual_seed(hyper.seed)
    net = build_detector(cfg, seed=hyper.seed)

    own = module_arrays(net)
    shared = {n: a for n, a in base_arrays.items() if not n.startswith("head.")}
    expect_shared = {n for n in own if not n.startswith("head.")}
    if set(shared) != expect_shared:
        raise ValueError("base checkpoint architecture does not match except for the head")
    for name, arr in shared.items():
        if tuple(arr.shape) != tuple(own[name].shape):
            raise ValueError(f"base checkpoint shape mismatch at {name!r}")
    load_module_arrays(net, {**own, **shared})

    # restrict to crops that contain a nodule
    filtered = []
    for patient in dataset:
        pos = patient.positive_indices
        if len(pos):
            filtered.append(
                PatientCrops(
                    patient_id=patient.patient_id,
                    crops=patient.crops[pos],
                    cell_labels=patient.cell_labels[pos],
                    cancer=patient.cancer,
                )
            )
    if not filtered:
        raise ValueError("no nodule-bearing crops in dataset")

    def ternary(patient, lab):
        grid = CellLabelGrid(cells=lab, alphabet=BINARY)
        return malignancy_cell_labels(grid, patient.cancer).cells

    rng = np.random.default_rng(hyper.seed)
    pool = sample_epoch_crops(filtered, rng, hyper.crops_per_patient)
    phases = hyper.finetune_phases
    total = sum(int(n) for n, _ in phases)

    def lr_schedule(step):
        remaining = step
        for n, lr in phases:
            if remaining < n:
                return lr
            remaining -= n
        return phases[-1][1]

    batches = _batch_iterator(filtered, pool, hyper, rng, total, label_transform=ternary)
    log = _train_loop(net, batches, lr_schedule, hyper, loss_inverse_freq, 3)
    return net, log


def detect_crops(net: DetectorNet, crops: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode inference over crops; returns (n, g, g, g, c) probabilities."""
    net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            x = torch.from_numpy(crops[start : start + batch_size][:, None].astype(np.float32))
            probs = net(x)  # (b, c, g, g, g)
            outs.append(np.moveaxis(probs.numpy(), 1, -1))
    return np.concatenate(outs) if outs else np.zeros((0,))
