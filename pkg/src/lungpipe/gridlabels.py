"""Grid-cell ground truth for the detectors and nodule labelling heuristics.

Cells are half-open 16^3 voxel boxes; a cell is positive when any nodule's
axis-aligned bounding box intersects it. Class indices are shared with the
detector softmax channels: 0 = no-nodule, 1 = has-nodule (binary) and
0 = no-nodule, 1 = benign, 2 = malignant (ternary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import CELL, NoduleAnnotation

NO_NODULE = 0
HAS_NODULE = 1
BENIGN = 1
MALIGNANT = 2

BINARY = "binary"
TERNARY = "ternary"


@dataclass
class CellLabelGrid:
    """Per-cell labels over a (crop_size/16)^3 lattice."""

    cells: np.ndarray  # int8, shape (g, g, g)
    alphabet: str  # BINARY or TERNARY

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.alphabet not in (BINARY, TERNARY):
            raise ValueError(f"unknown alphabet {self.alphabet!r}")
        top = 1 if self.alphabet == BINARY else 2
        if self.cells.min(initial=0) < 0 or self.cells.max(initial=0) > top:
            raise ValueError(f"labels out of range for {self.alphabet} alphabet")


@dataclass
class LabellingStrategy:
    """How nodules in cancer patients get malignancy labels.

    ``patient-label`` marks every nodule of a cancer patient malignant;
    ``largest-nodule`` marks those whose size is at least proportion ``w``
    of the patient's largest nodule.
    """

    kind: str  # "patient-label" | "largest-nodule"
    w: float | None = None

    def __post_init__(self):
        if self.kind not in ("patient-label", "largest-nodule"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "largest-nodule":
            if self.w is None or not (0 < self.w <= 1):
                raise ValueError("largest-nodule strategy requires w in (0, 1]")
        elif self.w is not None:
            raise ValueError("w is only meaningful for the largest-nodule strategy")


def label_cells(
    crop_origin, crop_size: int, annotations: list[NoduleAnnotation]
) -> CellLabelGrid:
    """Binary cell labels for one crop.

    A cell (half-open box) is HAS_NODULE iff it intersects the closed
    bounding box of any nodule; coordinates are canonical voxels.
    """
    if crop_size % CELL != 0:
        raise ValueError(f"crop_size must be divisible by {CELL}, got {crop_size}")
    g = crop_size // CELL
    origin = np.asarray(crop_origin, dtype=np.float64)
    cells = np.zeros((g, g, g), dtype=np.int8)
    for a in annotations:
        lo, hi = a.bbox
        lo = lo - origin
        hi = hi - origin
        # cell [16i, 16(i+1)) intersects closed [lo, hi] iff 16i <= hi and lo < 16(i+1)
        first = np.maximum(np.floor(lo / CELL).astype(int), 0)
        last = np.minimum(np.floor(hi / CELL).astype(int), g - 1)
        if np.any(first > last) or np.any(hi < 0) or np.any(lo >= crop_size):
            continue
        sl = tuple(slice(f, l + 1) for f, l in zip(first, last))
        cells[sl] = HAS_NODULE
    return CellLabelGrid(cells=cells, alphabet=BINARY)


def assign_nodule_labels(
    strategy: LabellingStrategy, patient_cancer: bool, sizes
) -> list[str]:
    """Label nodules benign/malignant from patient status and sizes.

    All nodules in non-cancer patients are benign. For cancer patients the
    patient-label strategy marks everything malignant, while largest-nodule
    marks a nodule malignant iff size >= w * max size (ties malignant).
    """
    sizes = [float(s) for s in sizes]
    if any(s <= 0 for s in sizes):
        raise ValueError("nodule sizes must be positive")
    if not sizes:
        return []
    if not patient_cancer:
        return ["benign"] * len(sizes)
    if strategy.kind == "patient-label":
        return ["malignant"] * len(sizes)
    threshold = strategy.w * max(sizes)
    return ["malignant" if s >= threshold else "benign" for s in sizes]


def malignancy_cell_labels(binary_grid: CellLabelGrid, patient_cancer: bool) -> CellLabelGrid:
    """Promote binary cell labels to ternary using the patient cancer status."""
    if binary_grid.alphabet != BINARY:
        raise ValueError("expected a binary cell grid")
    out = np.zeros_like(binary_grid.cells)
    out[binary_grid.cells == HAS_NODULE] = MALIGNANT if patient_cancer else BENIGN
    return CellLabelGrid(cells=out, alphabet=TERNARY)
