"""CT volume handling: HU normalization, canonical resampling, crop tiling,
and the synthetic phantom generator used in place of clinical datasets.

Coordinate convention: arrays are indexed ``(a0, a1, a2)`` in C order, so the
last axis is the fastest-varying one on disk. Points are voxel-center
coordinates (voxel ``i`` is centered at coordinate ``i``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

HU_MIN = -1024.0
HU_MAX = 3071.0
HU_SPAN = HU_MAX - HU_MIN  # 4095
CELL = 16  # grid-cell edge in canonical voxels


@dataclass
class HUVolume:
    """Raw CT scan in Hounsfield units with physical voxel spacing (mm)."""

    voxels: np.ndarray  # int16, shape (d0, d1, d2)
    spacing: np.ndarray  # float, shape (3,), mm per voxel
    patient_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3D and non-empty, got shape {self.voxels.shape}")
        if self.spacing.shape != (3,) or np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")


@dataclass
class NormVolume:
    """Canonical cubic volume: normalized to [0, 1], aspect-ratio preserving.

    ``scale_factor`` converts original physical millimeters to canonical
    voxels; ``pad_offset`` is the centering shift so annotation coordinates
    can be mapped between the two frames.
    """

    voxels: np.ndarray  # float32, shape (side, side, side)
    side: int
    scale_factor: float
    pad_offset: np.ndarray  # float, shape (3,), canonical voxels
    source_spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    patient_id: str = ""

    def __post_init__(self):
        self.pad_offset = np.asarray(self.pad_offset, dtype=np.float64)
        self.source_spacing = np.asarray(self.source_spacing, dtype=np.float64)

    def map_point(self, p) -> np.ndarray:
        """Map a point from original voxel coordinates to canonical ones."""
        p = np.asarray(p, dtype=np.float64)
        return (p + 0.5) * self.source_spacing * self.scale_factor - 0.5 + self.pad_offset

    def unmap_point(self, p) -> np.ndarray:
        """Inverse of :meth:`map_point`."""
        p = np.asarray(p, dtype=np.float64)
        return (p + 0.5 - self.pad_offset) / (self.source_spacing * self.scale_factor) - 0.5

    def map_radius(self, r: float) -> float:
        """Map a radius from original voxels to canonical voxels.

        Exact for isotropic spacing; for anisotropic input the largest
        spacing is used so the mapped radius bounds the true extent.
        """
        return float(r * self.scale_factor * np.max(self.source_spacing))


@dataclass
class CropSet:
    """Overlapping cubic crops tiling a canonical volume on a stride lattice."""

    crop_size: int
    stride: int
    origins: list  # of (i, j, k) int tuples, lexicographic
    crops: list  # of float32 arrays, each crop_size^3
    padded_side: int


@dataclass
class NoduleAnnotation:
    """Ground-truth nodule: center and radius, optionally a malignancy label."""

    center: np.ndarray  # float, shape (3,), voxel coordinates
    radius: float
    label: str | None = None  # "benign" | "malignant" | None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.label not in (None, "benign", "malignant"):
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (low, high), both inclusive."""
        return self.center - self.radius, self.center + self.radius


def normalize_hu(voxels: np.ndarray) -> np.ndarray:
    """Map Hounsfield units affinely so that [-1024, 3071] -> [0, 1], clamped."""
    x = (np.asarray(voxels, dtype=np.float64) - HU_MIN) / HU_SPAN
    return np.clip(x, 0.0, 1.0)


def denormalize_hu(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_hu` on in-range values."""
    return np.asarray(x, dtype=np.float64) * HU_SPAN + HU_MIN


def _resample_axis(arr: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``arr`` along one axis at fractional positions.

    Out-of-range positions clamp to the edge samples.
    """
    n = arr.shape[axis]
    pos = np.clip(positions, 0.0, n - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, n - 2) if n > 1 else np.zeros_like(i0)
    frac = pos - i0
    shape = [1] * arr.ndim
    shape[axis] = len(positions)
    frac = frac.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, np.minimum(i0 + 1, n - 1), axis=axis)
    return lo * (1.0 - frac) + hi * frac


def resample_trilinear(vol: np.ndarray, out_shape, in_positions) -> np.ndarray:
    """Separable trilinear resampling.

    ``in_positions[a]`` gives, for each output index along axis ``a``, the
    (fractional) input coordinate to sample.
    """
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        out = _resample_axis(out, axis, np.asarray(in_positions[axis], dtype=np.float64))
    assert out.shape == tuple(out_shape)
    return out


def canonicalize(v: HUVolume, side: int) -> NormVolume:
    """Normalize and resample a scan into a cubic ``side``^3 canonical volume.

    A single uniform scale is chosen so the largest physical extent fits
    exactly; the remainder is centered zero-padding (normalized air).
    """
    if side < 16:
        raise ValueError(f"canonical side must be >= 16, got {side}")
    if np.any(v.spacing <= 0):
        raise ValueError(f"degenerate spacing {v.spacing}")
    dims = np.array(v.voxels.shape, dtype=np.float64)
    extents = dims * v.spacing  # mm
    scale = side / float(extents.max())  # canonical voxels per mm
    new_dims = np.rint(dims * v.spacing * scale).astype(int)
    new_dims = np.clip(new_dims, 1, side)
    new_dims[int(np.argmax(extents))] = side  # the largest extent fits exactly

    norm = normalize_hu(v.voxels)
    positions = [
        (np.arange(new_dims[a]) + 0.5) / (v.spacing[a] * scale) - 0.5 for a in range(3)
    ]
    resampled = resample_trilinear(norm, tuple(new_dims), positions)

    pad_offset = (side - new_dims) // 2
    out = np.zeros((side, side, side), dtype=np.float32)
    sl = tuple(slice(int(o), int(o + n)) for o, n in zip(pad_offset, new_dims))
    out[sl] = resampled.astype(np.float32)
    return NormVolume(
        voxels=out,
        side=side,
        scale_factor=scale,
        pad_offset=pad_offset.astype(np.float64),
        source_spacing=v.spacing.copy(),
        patient_id=v.patient_id,
    )


def tile_origins(side: int, crop_size: int, stride: int) -> tuple[list, int]:
    """Lexicographic crop origins and the (possibly padded) volume side.

    If ``(side - crop_size)`` is not a stride multiple the side is padded
    up to the next lattice-compatible value, so every voxel is covered.
    """
    if crop_size > side:
        raise ValueError(f"crop_size {crop_size} exceeds volume side {side}")
    if stride > crop_size:
        raise ValueError(f"stride {stride} exceeds crop_size {crop_size}")
    if crop_size % CELL != 0:
        raise ValueError(f"crop_size must be divisible by {CELL}, got {crop_size}")
    rem = (side - crop_size) % stride
    padded_side = side if rem == 0 else side + (stride - rem)
    per_axis = range(0, padded_side - crop_size + 1, stride)
    return list(itertools.product(per_axis, per_axis, per_axis)), padded_side


def tile_crops(v: NormVolume, crop_size: int, stride: int) -> CropSet:
    """Tile the canonical volume into overlapping cubic crops."""
    side = v.side
    origins, padded_side = tile_origins(side, crop_size, stride)
    vox = v.voxels
    if padded_side != side:
        vox = np.zeros((padded_side,) * 3, dtype=vox.dtype)
        vox[: side, : side, : side] = v.voxels
    crops = [
        vox[o[0] : o[0] + crop_size, o[1] : o[1] + crop_size, o[2] : o[2] + crop_size].copy()
        for o in origins
    ]
    return CropSet(
        crop_size=crop_size, stride=stride, origins=origins, crops=crops, padded_side=padded_side
    )


@dataclass
class PhantomConfig:
    """Configuration for the synthetic phantom generator.

    Malignancy is size-coded: a nodule is malignant iff its radius is at
    least ``malignancy_rule`` voxels, which gives downstream classifiers a
    learnable signal with exact ground truth. ``malignant_fraction`` targets
    the prevalence of malignant nodules among all sampled nodules.
    """

    volume_side: int = 64
    nodule_count_range: tuple[int, int] = (0, 4)
    radius_range: tuple[float, float] = (2.0, 5.0)
    malignancy_rule: float = 3.5
    malignant_fraction: float = 0.125  # ~1 malignant for 7 benign
    distractor_density: float = 1.5e-5  # expected tubes per voxel
    noise_sigma: float = 25.0  # HU
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not (0 < lo <= hi < self.volume_side / 2):
            raise ValueError(f"radius_range {self.radius_range} outside (0, side/2)")
        if not (lo <= self.malignancy_rule <= hi):
            raise ValueError("malignancy_rule must lie within radius_range")
        if not (0 <= self.malignant_fraction <= 1):
            raise ValueError("malignant_fraction must be in [0, 1]")
        if self.nodule_count_range[0] < 0 or self.nodule_count_range[0] > self.nodule_count_range[1]:
            raise ValueError(f"bad nodule_count_range {self.nodule_count_range}")


def _paint_sphere(vol: np.ndarray, center: np.ndarray, radius: float, value: float):
    """Blend a sphere into the volume with a half-voxel antialiased edge."""
    side = vol.shape[0]
    lo = np.maximum(np.floor(center - radius - 1).astype(int), 0)
    hi = np.minimum(np.ceil(center + radius + 2).astype(int), side)
    grids = np.meshgrid(*(np.arange(lo[a], hi[a]) for a in range(3)), indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    w = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    region = tuple(slice(lo[a], hi[a]) for a in range(3))
    vol[region] = vol[region] * (1.0 - w) + value * w


def _paint_tube(vol: np.ndarray, rng: np.random.Generator, side: int):
    """Paint a vessel-like tube: a chain of small spheres along a segment."""
    start = rng.uniform(0, side, size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    length = rng.uniform(side / 4, side)
    radius = rng.uniform(0.7, 1.4)
    value = rng.uniform(10.0, 70.0)
    steps = max(int(length / 0.5), 2)
    for t in np.linspace(0.0, length, steps):
        p = start + t * direction
        if np.all(p > -radius) and np.all(p < side + radius):
            _paint_sphere(vol, p, radius, value)


def generate_phantom(cfg: PhantomConfig):
    """Generate one synthetic patient scan with ground-truth annotations.

    Returns ``(HUVolume, annotations, cancer_flag)``. The background is air
    with Gaussian noise, distractors are soft-tissue tubes, and nodules are
    soft-tissue spheres. Identical seeds produce bit-identical output.
    """
    rng = np.random.default_rng(cfg.seed)
    side = cfg.volume_side
    vol = -1000.0 + rng.normal(0.0, cfg.noise_sigma, size=(side,) * 3)

    n_tubes = rng.poisson(cfg.distractor_density * side**3)
    for _ in range(n_tubes):
        _paint_tube(vol, rng, side)

    lo, hi = cfg.nodule_count_range
    target = int(rng.integers(lo, hi + 1))
    annotations: list[NoduleAnnotation] = []
    r_lo, r_hi = cfg.radius_range
    rule = cfg.malignancy_rule
    for _ in range(target):
        malignant = bool(rng.random() < cfg.malignant_fraction) and rule < r_hi
        if malignant:
            radius = float(rng.uniform(rule, r_hi))
        else:
            radius = float(rng.uniform(r_lo, min(rule, r_hi)))
        placed = None
        for _attempt in range(50):
            margin = radius + 2.0
            center = rng.uniform(margin, side - margin, size=3)
            ok = all(
                np.linalg.norm(center - a.center) >= radius + a.radius + 2.0
                for a in annotations
            )
            if ok:
                placed = center
                break
        if placed is None:
            continue  # infeasible placement: report fewer nodules
        value = float(rng.uniform(40.0, 90.0))
        _paint_sphere(vol, placed, radius, value)
        label = "malignant" if radius >= rule else "benign"
        annotations.append(NoduleAnnotation(center=placed, radius=radius, label=label))

    hu = HUVolume(
        voxels=np.clip(vol, HU_MIN, HU_MAX).astype(np.int16),
        spacing=np.ones(3),
        patient_id=f"phantom-{cfg.seed:08d}",
    )
    cancer = any(a.label == "malignant" for a in annotations)
    return hu, annotations, cancer
