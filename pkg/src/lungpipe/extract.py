"""Whole-scan detection fusion, nodule candidate stitching, 32^3 extraction,
and cube-symmetry orientation augmentation.

Fusion averages per-cell class distributions over all crops covering a
cell; candidates are 6-connected components of cells whose nodule
probability exceeds the threshold (strictly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import CELL, NormVolume, resample_trilinear

NODULE_THRESHOLD = 0.5


@dataclass
class DetectionVolume:
    """Fused per-cell class distributions over the whole canonical lattice."""

    cell_probs: np.ndarray  # (G, G, G, c) float64
    coverage_counts: np.ndarray  # (G, G, G) int

    def nodule_probability(self) -> np.ndarray:
        """P(nodule) per cell: channel 1 for binary maps, 1 - P(no-nodule)
        for ternary ones (class 0 is always no-nodule)."""
        c = self.cell_probs.shape[-1]
        if c == 2:
            return self.cell_probs[..., 1]
        return 1.0 - self.cell_probs[..., 0]


@dataclass
class NoduleCandidate:
    """A stitched detection: face-connected super-threshold cells."""

    cells: list  # of (i, j, k) lattice coordinates
    bbox: tuple  # ((lo0, lo1, lo2), (hi0, hi1, hi2)) voxel box, hi exclusive
    confidence: float  # max member-cell nodule probability
    size: float  # bbox volume in voxels

    @property
    def bbox_shape(self) -> tuple[int, int, int]:
        lo, hi = self.bbox
        return tuple(int(h - l) for l, h in zip(lo, hi))


@dataclass
class NoduleVolume32:
    """A candidate region resampled into a 32^3 cube, aspect preserved."""

    voxels: np.ndarray  # (32, 32, 32) float32 in [0, 1]
    source: tuple  # (patient_id, candidate_index)
    scale_factor: float


def fuse_overlapping(maps: list[tuple], lattice_side: int) -> DetectionVolume:
    """Average per-crop class probability maps over the whole-scan lattice.

    ``maps`` holds ``(origin_voxels, probs)`` pairs where probs has shape
    (g, g, g, c) and the origin lies on the crop stride lattice (a multiple
    of the 16-voxel cell size). Every lattice cell must be covered.
    """
    if not maps:
        raise ValueError("no maps to fuse")
    c = maps[0][1].shape[-1]
    acc = np.zeros((lattice_side,) * 3 + (c,), dtype=np.float64)
    counts = np.zeros((lattice_side,) * 3, dtype=np.int64)
    for origin, probs in maps:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape[-1] != c:
            raise ValueError("maps disagree on class count")
        origin = np.asarray(origin)
        if np.any(origin % CELL):
            raise ValueError(f"crop origin {tuple(origin)} not on the cell lattice")
        co = origin // CELL
        g = probs.shape[0]
        sl = tuple(slice(int(o), int(o + g)) for o in co)
        acc[sl] += probs
        counts[sl] += 1
    if np.any(counts == 0):
        raise ValueError("lattice cell covered by zero crops")
    return DetectionVolume(cell_probs=acc / counts[..., None], coverage_counts=counts)


_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def find_candidates(dv: DetectionVolume, threshold: float = NODULE_THRESHOLD) -> list[NoduleCandidate]:
    """Stitch super-threshold cells into candidates (6-connectivity).

    Cells with nodule probability strictly above the threshold form
    candidates; the result is sorted by descending confidence.
    """
    hot = dv.nodule_probability() > threshold
    labels, n = ndimage.label(hot, structure=_SIX_CONN)
    prob = dv.nodule_probability()
    out = []
    for lab in range(1, n + 1):
        coords = np.argwhere(labels == lab)
        lo = coords.min(axis=0) * CELL
        hi = (coords.max(axis=0) + 1) * CELL
        out.append(
            NoduleCandidate(
                cells=[tuple(int(x) for x in c) for c in coords],
                bbox=(tuple(int(x) for x in lo), tuple(int(x) for x in hi)),
                confidence=float(prob[tuple(coords.T)].max()),
                size=float(np.prod(hi - lo)),
            )
        )
    out.sort(key=lambda cand: -cand.confidence)
    return out


def extract_resize(volume: NormVolume, cand: NoduleCandidate, out_side: int = 32) -> NoduleVolume32:
    """Cut a candidate's bounding box and resample it into a 32^3 cube.

    The largest box axis is scaled to exactly ``out_side`` (uniform scale,
    trilinear); remaining axes are centered with zero padding. The box is
    clamped to the volume bounds first.
    """
    lo = np.maximum(np.asarray(cand.bbox[0]), 0)
    hi = np.minimum(np.asarray(cand.bbox[1]), volume.side)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate candidate bbox {cand.bbox}")
    sub = volume.voxels[tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))]
    dims = np.array(sub.shape, dtype=np.float64)
    scale = out_side / dims.max()  # output voxels per source voxel
    new_dims = np.maximum(np.rint(dims * scale).astype(int), 1)
    new_dims[int(np.argmax(dims))] = out_side
    positions = [(np.arange(new_dims[a]) + 0.5) / scale - 0.5 for a in range(3)]
    resampled = resample_trilinear(sub, tuple(new_dims), positions)
    out = np.zeros((out_side,) * 3, dtype=np.float32)
    off = (out_side - new_dims) // 2
    sl = tuple(slice(int(o), int(o + n)) for o, n in zip(off, new_dims))
    out[sl] = np.clip(resampled, 0.0, 1.0).astype(np.float32)
    return NoduleVolume32(voxels=out, source=(volume.patient_id, -1), scale_factor=float(scale))


def _orientations() -> list[tuple[tuple[int, int, int], tuple[bool, bool, bool]]]:
    """The 48 cube symmetries as (axis permutation, per-axis flip) pairs,
    identity first."""
    import itertools

    perms = list(itertools.permutations((0, 1, 2)))
    flips = list(itertools.product((False, True), repeat=3))
    out = [(p, f) for p in perms for f in flips]
    out.remove(((0, 1, 2), (False, False, False)))
    return [((0, 1, 2), (False, False, False))] + out


ORIENTATIONS = _orientations()


def apply_orientation(voxels: np.ndarray, orientation) -> np.ndarray:
    """Apply one cube symmetry: permute axes, then flip."""
    perm, flips = orientation
    out = np.transpose(voxels, perm)
    axes = [a for a, f in enumerate(flips) if f]
    if axes:
        out = np.flip(out, axis=axes)
    return np.ascontiguousarray(out)


def invert_orientation(orientation):
    """The inverse cube symmetry (apply-after to recover the input)."""
    probe = np.arange(27).reshape(3, 3, 3)
    image = apply_orientation(probe, orientation)
    for cand in ORIENTATIONS:
        if np.array_equal(apply_orientation(image, cand), probe):
            return cand
    raise ValueError(f"no inverse found for {orientation}")  # unreachable


def augment_orientations(nv: NoduleVolume32, count: int, seed: int = 0) -> list[NoduleVolume32]:
    """Sample distinct cube-symmetry copies of a nodule volume.

    The identity always comes first; the remaining orientations are drawn
    without replacement, deterministically under the seed.
    """
    if count > len(ORIENTATIONS):
        raise ValueError(f"count {count} exceeds the {len(ORIENTATIONS)} cube symmetries")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    order = [0] + (1 + rng.permutation(len(ORIENTATIONS) - 1)).tolist()
    out = []
    for idx in order[:count]:
        vox = apply_orientation(nv.voxels, ORIENTATIONS[idx])
        out.append(NoduleVolume32(voxels=vox, source=nv.source, scale_factor=nv.scale_factor))
    return out
