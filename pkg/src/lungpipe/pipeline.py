"""Pipeline stages: each one reads upstream artifacts from the run
directory, writes its own artifacts, and records them (with content
hashes) in ``run_manifest.json``.

Stage order mirrors the framework DAG: detector training feeds both the
malignancy fine-tune and the extractor/classifier branch, and the patient
classifier pools features from both branches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import io as lpio
from .classifier import (
    ClassifierConfig,
    ClassifierTrainConfig,
    NoduleLabelSet,
    build_classifier,
    classify_nodules,
    train_classifier,
)
from .config import PipelineConfig, config_hash, config_to_dict
from .detector import (
    DetectorConfig,
    TrainConfig,
    build_detector,
    build_patient_crops,
    detect_crops,
    finetune_malignancy,
    train_nodule_detector,
)
from .extract import (
    DetectionVolume,
    NoduleCandidate,
    ORIENTATIONS,
    apply_orientation,
    extract_resize,
    find_candidates,
)
from .gridlabels import LabellingStrategy, assign_nodule_labels, label_cells
from .metrics import ScoredSet, log_loss, metric_report, sensitivity_specificity_f1, confusion
from .nncore import load_checkpoint, load_module_arrays, save_checkpoint
from .patient import (
    PatientTrainConfig,
    assemble_features,
    build_patient_net,
    pool_classifier,
    pool_malignancy,
    predict_patient,
    train_patient,
)
from .volume import CELL, HUVolume, NormVolume, PhantomConfig, canonicalize, generate_phantom, tile_crops


class ValidationError(ValueError):
    """Missing or inconsistent upstream artifacts / configuration."""


def derive_seed(base: int, stage: str) -> int:
    digest = hashlib.sha256(f"{base}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x) -> str:
    return repr(float(x))


class RunDir:
    """A run directory plus its artifact manifest."""

    def __init__(self, out: str | Path, cfg: PipelineConfig, force: bool = False):
        self.path = Path(out)
        self.cfg = cfg
        self.force = force
        self.hash = config_hash(cfg)
        self.manifest_path = self.path / "run_manifest.json"

    def _load(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"stages": {}}

    def record(self, stage: str, artifacts: list[Path]):
        data = self._load()
        data["stages"][stage] = {
            "config_hash": self.hash,
            "artifacts": {
                str(p.relative_to(self.path)): _sha256(p) for p in artifacts if p.is_file()
            },
        }
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")

    def require(self, relpath: str, producer: str) -> Path:
        p = self.path / relpath
        if not p.exists():
            raise ValidationError(
                f"missing upstream artifact {relpath!r}; run `lungpipe {producer}` first"
            )
        return p

    def check_hash(self, upstream_stage: str):
        data = self._load()
        rec = data["stages"].get(upstream_stage)
        if rec and rec["config_hash"] != self.hash:
            msg = (
                f"config hash mismatch with stage {upstream_stage!r} "
                f"({rec['config_hash']} vs {self.hash})"
            )
            if not self.force:
                raise ValidationError(msg + "; rerun upstream or pass --force")
            print(f"warning: {msg}; continuing due to --force")


# ---------------------------------------------------------------- synth


def stage_synth(run: RunDir):
    """Generate the synthetic phantom dataset and its manifest."""
    cfg = run.cfg
    s = cfg.synth
    vol_dir = run.path / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(cfg.seed, "synth-split"))
    order = rng.permutation(s.patients)
    n_test = int(round(s.test_fraction * s.patients))
    test_ids = {int(i) for i in order[:n_test]}

    records = []
    artifacts = []
    for i in range(s.patients):
        pid = f"p{i:04d}"
        pcfg = PhantomConfig(
            volume_side=cfg.preprocess.side,
            nodule_count_range=tuple(s.nodule_count_range),
            radius_range=tuple(s.radius_range),
            malignancy_rule=s.malignancy_rule,
            malignant_fraction=s.malignant_fraction,
            distractor_density=s.distractor_density,
            noise_sigma=s.noise_sigma,
            seed=derive_seed(cfg.seed, f"phantom-{i}"),
        )
        hu, annotations, cancer = generate_phantom(pcfg)
        hu.patient_id = pid
        vol_path = vol_dir / f"{pid}.raw"
        lpio.save_volume(vol_path, hu.voxels, hu.spacing, pid)
        artifacts += [vol_path, vol_path.with_suffix(".raw.json")]
        records.append(
            {
                "patient_id": pid,
                "volume_path": f"volumes/{pid}.raw",
                "cancer": cancer,
                "split": "test" if i in test_ids else "train",
                "nodules": [lpio.annotation_to_record(a) for a in annotations],
            }
        )
    manifest = run.path / "manifest.jsonl"
    lpio.write_manifest(manifest, records)
    run.record("synth", artifacts + [manifest])


# ----------------------------------------------------------- preprocess


def stage_preprocess(run: RunDir):
    """Canonicalize every scan and map annotations into canonical voxels."""
    cfg = run.cfg
    manifest = run.require("manifest.jsonl", "synth")
    run.check_hash("synth")
    canon_dir = run.path / "canon"
    canon_dir.mkdir(parents=True, exist_ok=True)
    out_records = []
    artifacts = []
    for rec in lpio.read_manifest(manifest):
        hu = lpio.load_hu_volume(run.path / rec["volume_path"])
        nv = canonicalize(hu, cfg.preprocess.side)
        path = canon_dir / f"{rec['patient_id']}.raw"
        lpio.save_volume(path, nv.voxels, np.ones(3), rec["patient_id"])
        artifacts += [path, path.with_suffix(".raw.json")]
        nodules = []
        for nrec in rec["nodules"]:
            ann = lpio.annotation_from_record(nrec)
            center = nv.map_point(ann.center)
            nodules.append(
                {
                    "center_vox": [float(x) for x in center],
                    "radius_vox": nv.map_radius(ann.radius),
                    "label": ann.label,
                }
            )
        out_records.append(
            {
                "patient_id": rec["patient_id"],
                "volume_path": f"canon/{rec['patient_id']}.raw",
                "cancer": rec["cancer"],
                "split": rec["split"],
                "scale_factor": nv.scale_factor,
                "pad_offset": [float(x) for x in nv.pad_offset],
                "nodules": nodules,
            }
        )
    canon_manifest = run.path / "canon_manifest.jsonl"
    lpio.write_manifest(canon_manifest, out_records)
    run.record("preprocess", artifacts + [canon_manifest])


def _load_canon(run: RunDir, rec: dict) -> NormVolume:
    voxels, _, pid = lpio.load_volume(run.path / rec["volume_path"])
    return NormVolume(
        voxels=voxels.astype(np.float32),
        side=voxels.shape[0],
        scale_factor=rec["scale_factor"],
        pad_offset=np.asarray(rec["pad_offset"]),
        patient_id=pid,
    )


def _canon_records(run: RunDir, split: str | None = None) -> list[dict]:
    manifest = run.require("canon_manifest.jsonl", "preprocess")
    records = lpio.read_manifest(manifest)
    if split is not None:
        records = [r for r in records if r["split"] == split]
    return records


def _patient_crop_set(run: RunDir, records: list[dict]):
    cfg = run.cfg.preprocess
    dataset = []
    for rec in records:
        nv = _load_canon(run, rec)
        annotations = [lpio.annotation_from_record(n) for n in rec["nodules"]]
        pc, _origins = build_patient_crops(nv, annotations, cfg.crop_size, cfg.stride, rec["cancer"])
        dataset.append(pc)
    return dataset


def _detector_config(run: RunDir, class_count: int) -> DetectorConfig:
    return DetectorConfig(
        class_count=class_count,
        depth_variant=run.cfg.detector.depth_variant,
        crop_size=run.cfg.preprocess.crop_size,
    )


def _write_train_log(path: Path, rows, header="step,loss,lr"):
    lines = [header]
    for row in rows:
        lines.append(",".join(_fmt(x) if isinstance(x, float) else str(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


# -------------------------------------------------------- detector train


def stage_train_detector(run: RunDir):
    cfg = run.cfg
    run.check_hash("preprocess")
    dataset = _patient_crop_set(run, _canon_records(run, "train"))
    dcfg = _detector_config(run, 2)
    hyper = TrainConfig(
        iterations=cfg.detector.iterations,
        batch_size=cfg.detector.batch_size,
        learning_rate=cfg.detector.learning_rate,
        weight_decay=cfg.detector.weight_decay,
        crops_per_patient=cfg.detector.crops_per_patient,
        loss=cfg.detector.loss,
        seed=derive_seed(cfg.seed, "train-detector"),
    )
    net, log = train_nodule_detector(dataset, dcfg, hyper)
    ckpt = run.path / "detector.ckpt"
    save_checkpoint(ckpt, net, f"nodule-detector/{dcfg.depth_variant}/{dcfg.crop_size}", hyper.iterations, hyper.seed)
    log_path = run.path / "detector_log.csv"
    _write_train_log(log_path, log)
    run.record("train-detector", [ckpt, log_path])


def stage_finetune_malignancy(run: RunDir):
    cfg = run.cfg
    base_path = run.require("detector.ckpt", "train-detector")
    run.check_hash("train-detector")
    base_arrays, _meta = load_checkpoint(base_path)
    dataset = _patient_crop_set(run, _canon_records(run, "train"))
    dcfg = _detector_config(run, 2)
    hyper = TrainConfig(
        batch_size=cfg.malignancy.batch_size,
        weight_decay=cfg.malignancy.weight_decay,
        crops_per_patient=cfg.malignancy.crops_per_patient,
        finetune_phases=tuple((int(n), float(lr)) for n, lr in cfg.malignancy.phases),
        seed=derive_seed(cfg.seed, "finetune-malignancy"),
    )
    net, log = finetune_malignancy(base_arrays, dcfg, dataset, hyper)
    total = sum(n for n, _ in hyper.finetune_phases)
    ckpt = run.path / "malignancy.ckpt"
    save_checkpoint(ckpt, net, f"malignancy-detector/{dcfg.depth_variant}/{dcfg.crop_size}", total, hyper.seed)
    log_path = run.path / "malignancy_log.csv"
    _write_train_log(log_path, log)
    run.record("finetune-malignancy", [ckpt, log_path])


def _load_detector(run: RunDir, relpath: str, class_count: int, producer: str):
    path = run.require(relpath, producer)
    arrays, _meta = load_checkpoint(path)
    net = build_detector(replace(_detector_config(run, class_count)))
    load_module_arrays(net, arrays)
    net.eval()
    return net


# --------------------------------------------------------------- detect


def stage_detect(run: RunDir):
    """Run both detectors over every patient and fuse overlapping crops."""
    cfg = run.cfg
    run.check_hash("train-detector")
    run.check_hash("finetune-malignancy")
    nodule_net = _load_detector(run, "detector.ckpt", 2, "train-detector")
    malig_net = _load_detector(run, "malignancy.ckpt", 3, "finetune-malignancy")
    det_dir = run.path / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for rec in _canon_records(run):
        nv = _load_canon(run, rec)
        cs = tile_crops(nv, cfg.preprocess.crop_size, cfg.preprocess.stride)
        crops = np.stack(cs.crops).astype(np.float32)
        nodule_maps = detect_crops(nodule_net, crops)
        malig_maps = detect_crops(malig_net, crops)
        lattice = cs.padded_side // CELL
        fused_n = _fuse(cs.origins, nodule_maps, lattice)
        fused_m = _fuse(cs.origins, malig_maps, lattice)
        crop_has = (1.0 - malig_maps[..., 0] > cfg.extract.threshold).any(axis=(1, 2, 3))
        path = det_dir / f"{rec['patient_id']}.arr"
        lpio.save_arrays(
            path,
            {
                "nodule_cell_probs": fused_n.cell_probs,
                "malignancy_cell_probs": fused_m.cell_probs,
                "crop_has_nodule": crop_has.astype(np.int64),
            },
            meta={"lattice_side": lattice, "patient_id": rec["patient_id"]},
        )
        artifacts.append(path)
    run.record("detect", artifacts)


def _fuse(origins, maps, lattice_side) -> DetectionVolume:
    from .extract import fuse_overlapping

    return fuse_overlapping(list(zip(origins, list(maps))), lattice_side)


def _load_detection(run: RunDir, pid: str):
    path = run.require(f"detections/{pid}.arr", "detect")
    arrays, meta = lpio.load_arrays(path)
    return arrays, meta


# -------------------------------------------------------------- extract


def stage_extract(run: RunDir):
    """Stitch candidates from fused binary maps and cut 32^3 volumes."""
    cfg = run.cfg
    run.check_hash("detect")
    nod_dir = run.path / "nodules"
    nod_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    artifacts = []
    for rec in _canon_records(run):
        pid = rec["patient_id"]
        arrays, _meta = _load_detection(run, pid)
        dv = DetectionVolume(
            cell_probs=arrays["nodule_cell_probs"].astype(np.float64),
            coverage_counts=np.ones(arrays["nodule_cell_probs"].shape[:3], dtype=np.int64),
        )
        candidates = find_candidates(dv, threshold=cfg.extract.threshold)
        nv = _load_canon(run, rec)
        volumes = []
        for k, cand in enumerate(candidates):
            nv32 = extract_resize(nv, cand)
            volumes.append(nv32.voxels)
            rows.append(
                {
                    "patient_id": pid,
                    "index": k,
                    "cells": [list(c) for c in cand.cells],
                    "bbox": [list(cand.bbox[0]), list(cand.bbox[1])],
                    "confidence": cand.confidence,
                    "size": cand.size,
                }
            )
        stack = np.stack(volumes) if volumes else np.zeros((0, 32, 32, 32), dtype=np.float32)
        path = nod_dir / f"{pid}.arr"
        lpio.save_arrays(path, {"volumes": stack}, meta={"patient_id": pid})
        artifacts.append(path)
    cand_path = run.path / "candidates.jsonl"
    lpio.write_jsonl(cand_path, rows)
    run.record("extract", artifacts + [cand_path])


def _candidates_by_patient(run: RunDir) -> dict[str, list[dict]]:
    path = run.require("candidates.jsonl", "extract")
    out: dict[str, list[dict]] = {}
    for row in lpio.read_jsonl(path):
        out.setdefault(row["patient_id"], []).append(row)
    for rows in out.values():
        rows.sort(key=lambda r: r["index"])
    return out


def _nodule_volumes(run: RunDir, pid: str) -> np.ndarray:
    arrays, _ = lpio.load_arrays(run.require(f"nodules/{pid}.arr", "extract"))
    return arrays["volumes"]


# ------------------------------------------------------------ classifier


def _ground_truth_nodule_set(run: RunDir, records) -> NoduleLabelSet:
    """Training nodules cut from ground-truth boxes with true labels."""
    volumes, labels, pids = [], [], []
    for rec in records:
        nv = _load_canon(run, rec)
        for nrec in rec["nodules"]:
            ann = lpio.annotation_from_record(nrec)
            lo = np.floor((ann.center - ann.radius) / CELL).astype(int) * CELL
            hi = np.ceil((ann.center + ann.radius) / CELL).astype(int) * CELL
            lo = np.maximum(lo, 0)
            hi = np.minimum(np.maximum(hi, lo + CELL), nv.side)
            cand = NoduleCandidate(cells=[], bbox=(tuple(lo), tuple(hi)), confidence=1.0, size=float(np.prod(hi - lo)))
            volumes.append(extract_resize(nv, cand).voxels)
            labels.append(1 if ann.label == "malignant" else 0)
            pids.append(rec["patient_id"])
    return NoduleLabelSet(volumes=volumes, labels=labels, patient_ids=pids, strategy="ground-truth")


def build_nodule_label_set(run: RunDir, records, strategy: LabellingStrategy) -> NoduleLabelSet:
    """Label detector candidates per strategy and pair them with volumes."""
    cands = _candidates_by_patient(run)
    volumes, labels, pids = [], [], []
    for rec in records:
        pid = rec["patient_id"]
        rows = cands.get(pid, [])
        if not rows:
            continue
        sizes = [r["size"] for r in rows]
        names = assign_nodule_labels(strategy, rec["cancer"], sizes)
        vols = _nodule_volumes(run, pid)
        for r, name in zip(rows, names):
            volumes.append(vols[r["index"]])
            labels.append(1 if name == "malignant" else 0)
            pids.append(pid)
    return NoduleLabelSet(
        volumes=volumes, labels=labels, patient_ids=pids,
        strategy=f"{strategy.kind}" + (f"/w={strategy.w}" if strategy.w else ""),
    )


def _strategy_from_config(run: RunDir) -> LabellingStrategy:
    c = run.cfg.classifier
    if c.strategy == "patient-label":
        return LabellingStrategy(kind="patient-label")
    return LabellingStrategy(kind="largest-nodule", w=c.w)


def stage_train_classifier(run: RunDir):
    cfg = run.cfg
    run.check_hash("extract")
    records = _canon_records(run, "train")
    if cfg.classifier.source == "ground-truth":
        data = _ground_truth_nodule_set(run, records)
    else:
        data = build_nodule_label_set(run, records, _strategy_from_config(run))
    hyper = ClassifierTrainConfig(
        iterations=cfg.classifier.iterations,
        batch_size=cfg.classifier.batch_size,
        learning_rate=cfg.classifier.learning_rate,
        weight_decay=cfg.classifier.weight_decay,
        val_fraction=cfg.classifier.val_fraction,
        seed=derive_seed(cfg.seed, "train-classifier"),
    )
    net, log = train_classifier(data, hyper)
    ckpt = run.path / "classifier.ckpt"
    save_checkpoint(ckpt, net, "nodule-classifier/light-strides", hyper.iterations, hyper.seed)
    log_path = run.path / "classifier_log.csv"
    _write_train_log(log_path, log, header="step,train_loss,val_loss")
    run.record("train-classifier", [ckpt, log_path])


def _load_classifier(run: RunDir):
    path = run.require("classifier.ckpt", "train-classifier")
    arrays, _meta = load_checkpoint(path)
    net = build_classifier(ClassifierConfig())
    load_module_arrays(net, arrays)
    net.eval()
    return net


def stage_classify(run: RunDir):
    run.check_hash("train-classifier")
    net = _load_classifier(run)
    cands = _candidates_by_patient(run)
    rows = []
    for rec in _canon_records(run):
        pid = rec["patient_id"]
        if pid not in cands:
            continue
        vols = _nodule_volumes(run, pid)
        probs = classify_nodules(net, list(vols))
        for r, p in zip(cands[pid], probs):
            rows.append({"patient_id": pid, "candidate_index": r["index"], "p_malignant": p})
    path = run.path / "nodule_preds.jsonl"
    lpio.write_jsonl(path, rows)
    run.record("classify", [path])


# --------------------------------------------------------- patient stage


def _patient_features(run: RunDir, rec: dict, preds: dict, net=None, orientation=None) -> np.ndarray:
    """Pool the 113-vector for one patient, optionally under an axis
    permutation of the volume (transpose augmentation)."""
    pid = rec["patient_id"]
    arrays, _meta = _load_detection(run, pid)
    cell_probs = arrays["malignancy_cell_probs"]
    crop_count = int(arrays["crop_has_nodule"].sum())
    if orientation is not None:
        perm, _flips = orientation
        cell_probs = np.transpose(cell_probs, axes=(*perm, 3))
    mf = pool_malignancy(np.clip(cell_probs, 0.0, 1.0), crop_count)
    if orientation is None:
        probs = preds.get(pid, [])
    else:
        # re-classify transposed nodule volumes
        vols = _nodule_volumes(run, pid)
        if len(vols) and net is not None:
            tv = [apply_orientation(v, orientation) for v in vols]
            probs = classify_nodules(net, tv)
        else:
            probs = []
    cf = pool_classifier(probs)
    return assemble_features(mf, cf, weights=tuple(run.cfg.patient.block_weights)).values


_TRANSPOSES = [(perm, (False, False, False)) for perm in
               [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]]


def _write_features_csv(path: Path, rows: list[tuple[str, int, np.ndarray]]):
    header = ["patient_id", "label"] + [f"f{i:03d}" for i in range(113)]
    lines = [",".join(header)]
    for pid, label, values in rows:
        lines.append(",".join([pid, str(label)] + [_fmt(v) for v in values]))
    path.write_text("\n".join(lines) + "\n")


def read_features_csv(path: Path):
    lines = path.read_text().strip().splitlines()
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append((parts[0], int(parts[1]), np.asarray([float(x) for x in parts[2:]])))
    return rows


def stage_pool_features(run: RunDir):
    cfg = run.cfg
    run.check_hash("classify")
    preds: dict[str, list[float]] = {}
    for row in lpio.read_jsonl(run.require("nodule_preds.jsonl", "classify")):
        preds.setdefault(row["patient_id"], []).append(row["p_malignant"])
    net = _load_classifier(run) if cfg.patient.transpose_augment else None
    rows, aug_rows = [], []
    for rec in _canon_records(run):
        label = 1 if rec["cancer"] else 0
        fv = _patient_features(run, rec, preds)
        rows.append((rec["patient_id"], label, fv))
        if rec["split"] == "train":
            aug_rows.append((rec["patient_id"], label, fv))
            if cfg.patient.transpose_augment:
                for orient in _TRANSPOSES:
                    aug_rows.append(
                        (rec["patient_id"], label, _patient_features(run, rec, preds, net, orient))
                    )
    feat_path = run.path / "features.csv"
    _write_features_csv(feat_path, rows)
    aug_path = run.path / "features_train_aug.csv"
    _write_features_csv(aug_path, aug_rows)
    run.record("pool-features", [feat_path, aug_path])


def stage_train_patient(run: RunDir):
    cfg = run.cfg
    run.check_hash("pool-features")
    rows = read_features_csv(run.require("features_train_aug.csv", "pool-features"))
    features = np.stack([r[2] for r in rows])
    labels = [r[1] for r in rows]
    hyper = PatientTrainConfig(
        iterations=cfg.patient.iterations,
        learning_rate=cfg.patient.learning_rate,
        weight_decay=cfg.patient.weight_decay,
        seed=derive_seed(cfg.seed, "train-patient"),
    )
    net, log = train_patient(features, labels, hyper)
    ckpt = run.path / "patient.ckpt"
    save_checkpoint(ckpt, net, "patient-classifier", hyper.iterations, hyper.seed)
    log_path = run.path / "patient_log.csv"
    _write_train_log(log_path, log, header="step,loss")
    run.record("train-patient", [ckpt, log_path])


def stage_predict(run: RunDir):
    run.check_hash("train-patient")
    arrays, _meta = load_checkpoint(run.require("patient.ckpt", "train-patient"))
    net = build_patient_net()
    load_module_arrays(net, arrays)
    rows = read_features_csv(run.require("features.csv", "pool-features"))
    lines = ["patient_id,cancer_probability"]
    for pid, _label, values in rows:
        lines.append(f"{pid},{_fmt(predict_patient(net, values))}")
    path = run.path / "predictions.csv"
    path.write_text("\n".join(lines) + "\n")
    run.record("predict", [path])


# -------------------------------------------------------------- evaluate


def match_candidate(cand_row: dict, nodules: list[dict]) -> dict | None:
    """Ground-truth nodule whose center lies inside the candidate bbox
    (nearest to the box center when several qualify)."""
    lo, hi = np.asarray(cand_row["bbox"][0]), np.asarray(cand_row["bbox"][1])
    mid = (lo + hi) / 2.0
    best, best_d = None, np.inf
    for n in nodules:
        c = np.asarray(n["center_vox"])
        if np.all(c >= lo) and np.all(c < hi):
            d = float(np.linalg.norm(c - mid))
            if d < best_d:
                best, best_d = n, d
    return best


def _cell_truth(rec: dict, side: int) -> np.ndarray:
    annotations = [lpio.annotation_from_record(n) for n in rec["nodules"]]
    return label_cells((0, 0, 0), side, annotations).cells


def detector_cell_metrics(run: RunDir, split: str = "test", threshold: float | None = None):
    """Cell-level confusion of the fused binary detector vs ground truth."""
    thr = run.cfg.evaluate.cell_threshold if threshold is None else threshold
    probs, labels = [], []
    for rec in _canon_records(run, split):
        arrays, _meta = _load_detection(run, rec["patient_id"])
        p = arrays["nodule_cell_probs"][..., 1]
        side = p.shape[0] * CELL
        truth = _cell_truth(rec, side)
        probs.append(p.ravel())
        labels.append(truth.ravel())
    s = ScoredSet(np.concatenate(probs), np.concatenate(labels), threshold=thr)
    return sensitivity_specificity_f1(confusion(s))


def classifier_truth_pairs(run: RunDir, split: str = "test"):
    """(p_malignant, ground-truth label) pairs for matched candidates."""
    preds: dict[tuple, float] = {}
    for row in lpio.read_jsonl(run.require("nodule_preds.jsonl", "classify")):
        preds[(row["patient_id"], row["candidate_index"])] = row["p_malignant"]
    cands = _candidates_by_patient(run)
    pairs = []
    for rec in _canon_records(run, split):
        for row in cands.get(rec["patient_id"], []):
            gt = match_candidate(row, rec["nodules"])
            if gt is None or gt.get("label") is None:
                continue
            key = (rec["patient_id"], row["index"])
            if key in preds:
                pairs.append((preds[key], 1 if gt["label"] == "malignant" else 0))
    return pairs


def stage_evaluate(run: RunDir, predictions: Path | None = None):
    cfg = run.cfg
    if predictions is None:
        predictions = run.require("predictions.csv", "predict")
        run.check_hash("predict")
        split = "test"
    else:
        split = None  # external file: score every labelled patient present
    labels = {r["patient_id"]: (1 if r["cancer"] else 0, r["split"])
              for r in _canon_records(run)}
    probs, truth, per_patient = [], [], []
    for line in Path(predictions).read_text().strip().splitlines()[1:]:
        pid, p = line.split(",")
        if pid not in labels:
            continue
        y, sp = labels[pid]
        if split is not None and sp != split:
            continue
        probs.append(float(p))
        truth.append(y)
        per_patient.append(
            -np.log(np.clip(float(p) if y else 1 - float(p), 1e-15, None))
        )
    s = ScoredSet(np.asarray(probs), np.asarray(truth), threshold=cfg.evaluate.patient_threshold)
    report = metric_report(s)
    report["max_per_patient_log_loss"] = float(np.max(per_patient)) if per_patient else None
    try:
        sens, spec, f1 = detector_cell_metrics(run, "test")
        report["detector_cell_f1"] = f1
        report["detector_cell_sensitivity"] = sens
        report["detector_cell_specificity"] = spec
        pairs = classifier_truth_pairs(run, "test")
        if pairs:
            pp = np.asarray([p for p, _ in pairs])
            yy = np.asarray([y for _, y in pairs])
            report["classifier_accuracy"] = float(np.mean((pp > 0.5) == (yy == 1)))
            report["classifier_n"] = int(len(pairs))
    except ValidationError:
        pass  # metrics-only evaluation of an external predictions file
    path = run.path / "metrics.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    run.record("evaluate", [path])
    return report


STAGES = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "train-detector": stage_train_detector,
    "finetune-malignancy": stage_finetune_malignancy,
    "detect": stage_detect,
    "extract": stage_extract,
    "train-classifier": stage_train_classifier,
    "classify": stage_classify,
    "pool-features": stage_pool_features,
    "train-patient": stage_train_patient,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
}

RUN_ALL_ORDER = list(STAGES)


def run_all(run: RunDir):
    """Execute the whole DAG end to end."""
    for name in RUN_ALL_ORDER:
        STAGES[name](run)
