"""Run configuration: scale profiles, per-stage hyperparameters, hashing.

The desk profile shrinks every size proportionally (canonical side 64,
crop 32, stride 16, cell 16) so the whole pipeline trains in minutes; the
full profile restores the full-scale values (512 / 128 / 64, ResNet-101
depths, 100k-iteration schedules).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class SynthStage:
    patients: int = 200
    test_fraction: float = 0.2
    nodule_count_range: tuple = (0, 4)
    radius_range: tuple = (2.0, 5.0)
    malignancy_rule: float = 3.5
    malignant_fraction: float = 0.125
    distractor_density: float = 1.5e-5
    noise_sigma: float = 25.0


@dataclass
class PreprocessStage:
    side: int = 64
    crop_size: int = 32
    stride: int = 16


@dataclass
class DetectorStage:
    depth_variant: str = "desk"
    iterations: int = 4000
    batch_size: int = 8
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    crops_per_patient: int = 128
    loss: str = "balanced"


@dataclass
class MalignancyStage:
    phases: tuple = ((800, 0.01), (1200, 0.001))
    batch_size: int = 8
    weight_decay: float = 1e-4
    crops_per_patient: int = 128


@dataclass
class ExtractStage:
    threshold: float = 0.5


@dataclass
class ClassifierStage:
    iterations: int = 1000
    batch_size: int = 32
    learning_rate: float = 0.001
    weight_decay: float = 1e-4
    val_fraction: float = 0.1
    strategy: str = "largest-nodule"  # or "patient-label"
    w: float = 0.7
    source: str = "detector"  # "detector" | "ground-truth"


@dataclass
class PatientStage:
    # strong decoupled weight decay keeps the wide FC stack from memorizing
    # the (small) training split and saturating its output probabilities
    iterations: int = 600
    learning_rate: float = 0.001
    weight_decay: float = 100.0
    block_weights: tuple = (1.0, 1.0)
    transpose_augment: bool = True


@dataclass
class EvaluateStage:
    patient_threshold: float = 0.25
    cell_threshold: float = 0.5


@dataclass
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    synth: SynthStage = field(default_factory=SynthStage)
    preprocess: PreprocessStage = field(default_factory=PreprocessStage)
    detector: DetectorStage = field(default_factory=DetectorStage)
    malignancy: MalignancyStage = field(default_factory=MalignancyStage)
    extract: ExtractStage = field(default_factory=ExtractStage)
    classifier: ClassifierStage = field(default_factory=ClassifierStage)
    patient: PatientStage = field(default_factory=PatientStage)
    evaluate: EvaluateStage = field(default_factory=EvaluateStage)

    def __post_init__(self):
        if self.profile not in ("desk", "full"):
            raise ValueError(f"unknown profile {self.profile!r}")
        p = self.preprocess
        if p.side % 16 or p.crop_size % 16 or p.crop_size > p.side or p.stride > p.crop_size:
            raise ValueError(
                f"inconsistent sizes: side {p.side}, crop {p.crop_size}, stride {p.stride}"
            )


FULL_SCALE_OVERRIDES = {
    "preprocess": {"side": 512, "crop_size": 128, "stride": 64},
    "detector": {"depth_variant": "full-101", "iterations": 100_000, "batch_size": 24},
    "malignancy": {"phases": ((20_000, 0.01), (30_000, 0.001)), "batch_size": 24},
    "classifier": {"iterations": 6000},
    "patient": {"iterations": 2000, "weight_decay": 1e-4},
    "synth": {"radius_range": (4.6, 38.0), "malignancy_rule": 20.0},
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def _coerce(value, template):
    if isinstance(template, tuple):
        return tuple(
            _coerce(v, template[min(i, len(template) - 1)] if template else v)
            for i, v in enumerate(value)
        )
    if isinstance(template, bool):
        return bool(value)
    if isinstance(template, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    if data.get("profile") == "full":
        data = {**data}
        for stage, overrides in FULL_SCALE_OVERRIDES.items():
            merged = {**overrides, **data.get(stage, {})}
            data[stage] = merged
    for f in dataclasses.fields(PipelineConfig):
        if f.name not in data:
            continue
        current = getattr(cfg, f.name)
        if dataclasses.is_dataclass(current):
            for key, value in data[f.name].items():
                if not hasattr(current, key):
                    raise ValueError(f"unknown config key {f.name}.{key}")
                setattr(current, key, _coerce(value, getattr(current, key)))
        else:
            setattr(cfg, f.name, _coerce(data[f.name], current))
    cfg.__post_init__()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return config_from_dict(json.loads(Path(path).read_text()))


def apply_override(cfg: PipelineConfig, assignment: str) -> PipelineConfig:
    """Apply a ``stage.key=value`` command-line override (JSON-parsed value)."""
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ValueError(f"override must look like stage.key=value, got {assignment!r}")
    parts = key.split(".")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ValueError(f"unknown config section {part!r}")
        target = getattr(target, part)
    if not hasattr(target, parts[-1]):
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, parts[-1], _coerce(parsed, getattr(target, parts[-1])))
    cfg.__post_init__()
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    """Stable hash of the full configuration (paths excluded by design)."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
