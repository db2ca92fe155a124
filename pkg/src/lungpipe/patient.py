"""Patient-level feature pooling and the final cancer classifier.

The 113-dimensional patient descriptor concatenates (weighted) a 97-value
block pooled from the malignancy detector (three 32-bin density histograms
over per-cell softmax outputs plus the count of nodule-bearing crops) with
a 16-value block pooled from the nodule classifier (count, min, max, mean,
std, sum and a 10-bin density histogram of per-nodule probabilities).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nncore import AdamState, GradientError, adam_step, backward, he_init_

MALIGNANCY_BINS = 32
CLASSIFIER_BINS = 10
FEATURE_DIM = 3 * MALIGNANCY_BINS + 1 + 6 + CLASSIFIER_BINS  # 113
# Output probabilities are clipped to ~[0.1, 0.9] so that no single patient
# can contribute more than MAX_PATIENT_LOG_LOSS to the score. The bounds are
# exp(-bound) rather than exactly 0.1 so the documented bound holds exactly.
MAX_PATIENT_LOG_LOSS = 2.302585
PROB_CLIP = (math.exp(-MAX_PATIENT_LOG_LOSS), 1.0 - math.exp(-MAX_PATIENT_LOG_LOSS))


@dataclass
class MalignancyFeatures:
    """Pooled malignancy-detector features: 3 x 32 histograms + crop count."""

    hist: np.ndarray  # (3, 32), each row sums to 1 (or all zero)
    crop_nodule_count: int

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.hist.ravel(), [float(self.crop_nodule_count)]])


@dataclass
class ClassifierFeatures:
    """Pooled nodule-classifier features: 6 statistics + 10-bin histogram."""

    nodule_count: int
    minimum: float
    maximum: float
    mean: float
    std: float
    total: float
    hist: np.ndarray  # (10,)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                [float(self.nodule_count), self.minimum, self.maximum, self.mean, self.std, self.total],
                self.hist,
            ]
        )


@dataclass
class PatientFeatureVector:
    """The pooled 113-dimensional patient descriptor."""

    values: np.ndarray
    weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (FEATURE_DIM,):
            raise ValueError(f"feature vector must have length {FEATURE_DIM}, got {self.values.shape}")


def _density_histogram(values: np.ndarray, bins: int) -> np.ndarray:
    """Count-normalized histogram on [0, 1]; value 1.0 lands in the top bin."""
    if values.size == 0:
        return np.zeros(bins)
    idx = np.minimum((np.asarray(values, dtype=np.float64) * bins).astype(int), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    return hist / values.size


def pool_malignancy(cell_probs: np.ndarray, crop_nodule_count: int) -> MalignancyFeatures:
    """Pool fused 3-class cell probabilities into histogram features.

    ``cell_probs`` has shape (..., 3); for each class a 32-bin density
    histogram of that class's probability across all cells is built. With
    zero cells every feature is zero.
    """
    cell_probs = np.asarray(cell_probs, dtype=np.float64)
    if cell_probs.size and cell_probs.shape[-1] != 3:
        raise ValueError(f"expected 3 classes, got shape {cell_probs.shape}")
    if np.any(cell_probs < 0) or np.any(cell_probs > 1):
        raise ValueError("cell probabilities must lie in [0, 1]")
    flat = cell_probs.reshape(-1, 3) if cell_probs.size else np.zeros((0, 3))
    hist = np.stack([_density_histogram(flat[:, c], MALIGNANCY_BINS) for c in range(3)])
    return MalignancyFeatures(hist=hist, crop_nodule_count=int(crop_nodule_count))


def pool_classifier(probs) -> ClassifierFeatures:
    """Pool per-nodule malignancy probabilities into summary statistics.

    A patient without any detected nodule pools to all zeros. Standard
    deviation is the population one (zero for a single nodule).
    """
    p = np.asarray(list(probs), dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if p.size == 0:
        return ClassifierFeatures(0, 0.0, 0.0, 0.0, 0.0, 0.0, np.zeros(CLASSIFIER_BINS))
    return ClassifierFeatures(
        nodule_count=int(p.size),
        minimum=float(p.min()),
        maximum=float(p.max()),
        mean=float(p.mean()),
        std=float(p.std()),
        total=float(p.sum()),
        hist=_density_histogram(p, CLASSIFIER_BINS),
    )


def assemble_features(
    m: MalignancyFeatures, c: ClassifierFeatures, weights: tuple = (1.0, 1.0)
) -> PatientFeatureVector:
    """Weight and concatenate the two feature blocks into the 113-vector."""
    values = np.concatenate([weights[0] * m.as_vector(), weights[1] * c.as_vector()])
    return PatientFeatureVector(values=values, weights=tuple(weights))


class PatientNet(nn.Module):
    """FC 1024 (dropout 0.5), FC 1024 (dropout 0.5), FC 2, softmax.

    Inputs are standardized with statistics fitted on the training rows
    (stored as buffers so they travel with the checkpoint).
    """

    def __init__(self):
        super().__init__()
        self.register_buffer("feature_mean", torch.zeros(FEATURE_DIM))
        self.register_buffer("feature_std", torch.ones(FEATURE_DIM))
        self.fc1 = nn.Linear(FEATURE_DIM, 1024)
        self.fc2 = nn.Linear(1024, 1024)
        self.fc3 = nn.Linear(1024, 2)
        self.drop = nn.Dropout(0.5)

    def set_standardization(self, features: torch.Tensor):
        """Fit the input standardization buffers on training features."""
        with torch.no_grad():
            self.feature_mean.copy_(features.mean(dim=0))
            self.feature_std.copy_(features.std(dim=0, unbiased=False).clamp_min(1e-6))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != FEATURE_DIM:
            raise ValueError(f"expected {FEATURE_DIM} features, got {x.shape[-1]}")
        x = (x - self.feature_mean) / self.feature_std
        h = self.drop(F.relu(self.fc1(x)))
        h = self.drop(F.relu(self.fc2(h)))
        return self.fc3(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=-1)


@dataclass
class PatientTrainConfig:
    iterations: int = 2000
    learning_rate: float = 0.001
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 100


def build_patient_net(seed: int = 0) -> PatientNet:
    net = PatientNet()
    gen = torch.Generator().manual_seed(seed)
    he_init_(net, gen)
    return net


def train_patient(features: np.ndarray, cancer_labels, hyper: PatientTrainConfig):
    """Full-batch training of the patient classifier; returns (net, log).

    Every iteration takes exactly one optimizer step over all rows.
    """
    x = torch.from_numpy(np.asarray(features, dtype=np.float32))
    t = torch.tensor(np.asarray(cancer_labels, dtype=np.int64))
    if x.ndim != 2 or x.shape[1] != FEATURE_DIM:
        raise ValueError(f"features must be (n, {FEATURE_DIM}), got {tuple(x.shape)}")
    classes = set(t.tolist())
    if classes != {0, 1}:
        raise ValueError(f"need both classes present, got labels {sorted(classes)}")
    torch.manual_seed(hyper.seed)
    net = build_patient_net(seed=hyper.seed)
    net.set_standardization(x)
    params = dict(net.named_parameters())
    state = AdamState(learning_rate=hyper.learning_rate, weight_decay=hyper.weight_decay)
    log = []
    for step in range(1, hyper.iterations + 1):
        net.train()
        # cross-entropy on log-softmax of logits: numerically stable where
        # log(softmax(...)) saturates and stops producing gradients
        loss = F.nll_loss(F.log_softmax(net.logits(x), dim=-1), t)
        if not math.isfinite(float(loss.detach())):
            raise GradientError(f"non-finite loss at step {step}")
        grads = backward(loss, net)
        adam_step(params, grads, state)
        if step % hyper.log_every == 0 or step == 1:
            log.append((step, float(loss.detach())))
    return net, log


def predict_patient(net: PatientNet, fv) -> float:
    """Cancer probability for one patient, clipped to the allowed band."""
    values = fv.values if isinstance(fv, PatientFeatureVector) else np.asarray(fv, dtype=np.float64)
    if values.shape != (FEATURE_DIM,):
        raise ValueError(f"feature vector must have length {FEATURE_DIM}, got {values.shape}")
    net.eval()
    with torch.no_grad():
        p = float(net(torch.from_numpy(values.astype(np.float32))[None])[0, 1])
    return float(min(max(p, PROB_CLIP[0]), PROB_CLIP[1]))
