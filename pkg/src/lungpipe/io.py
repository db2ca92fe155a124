"""File formats: raw volume + JSON sidecar, JSON-lines dataset manifests,
and a deterministic named-array archive used for checkpoints and detections.

All formats are little-endian and timestamp-free so that reruns with the
same config and seed produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import HUVolume, NoduleAnnotation

_DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4")}

ARCHIVE_MAGIC = b"LPARCH01"


def save_volume(path: str | Path, voxels: np.ndarray, spacing, patient_id: str):
    """Write a volume as flat binary (last axis fastest) plus a JSON sidecar."""
    path = Path(path)
    voxels = np.asarray(voxels)
    if voxels.dtype == np.int16:
        dtype = "i16"
    elif voxels.dtype == np.float32:
        dtype = "f32"
    else:
        raise ValueError(f"unsupported dtype {voxels.dtype}, use int16 or float32")
    path.write_bytes(np.ascontiguousarray(voxels).astype(_DTYPES[dtype]).tobytes())
    sidecar = {
        "dims": list(voxels.shape),
        "spacing_mm": [float(s) for s in np.asarray(spacing)],
        "dtype": dtype,
        "patient_id": patient_id,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n"
    )


def load_volume(path: str | Path):
    """Load a raw volume; returns ``(voxels, spacing, patient_id)``."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    dtype = _DTYPES[sidecar["dtype"]]
    voxels = np.frombuffer(path.read_bytes(), dtype=dtype).reshape(sidecar["dims"]).copy()
    return voxels, np.asarray(sidecar["spacing_mm"]), sidecar["patient_id"]


def load_hu_volume(path: str | Path) -> HUVolume:
    voxels, spacing, patient_id = load_volume(path)
    return HUVolume(voxels=voxels.astype(np.int16), spacing=spacing, patient_id=patient_id)


def annotation_to_record(a: NoduleAnnotation) -> dict:
    return {
        "center_vox": [float(x) for x in a.center],
        "radius_vox": float(a.radius),
        "label": a.label,
    }


def annotation_from_record(rec: dict) -> NoduleAnnotation:
    return NoduleAnnotation(
        center=np.asarray(rec["center_vox"]), radius=rec["radius_vox"], label=rec.get("label")
    )


def write_manifest(path: str | Path, records: list[dict]):
    """Write a dataset manifest: one JSON object per line, one per patient."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path: str | Path, records: list[dict]):
    write_manifest(path, records)


def read_jsonl(path: str | Path) -> list[dict]:
    return read_manifest(path)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays to a single deterministic binary archive.

    Layout: magic, u64 header length, JSON header (names, shapes, dtypes,
    metadata), then each array's raw little-endian bytes in header order.
    Floating arrays are stored as 32-bit.
    """
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
            dtype = "f32"
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
            dtype = "i64"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path: str | Path):
    """Read a named-array archive; returns ``(arrays, meta)``."""
    with open(path, "rb") as f:
        magic = f.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise ValueError(f"{path}: not a named-array archive")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            dtype = {"f32": "<f4", "i64": "<i8"}[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = np.frombuffer(f.read(count * np.dtype(dtype).itemsize), dtype=dtype)
            arrays[entry["name"]] = data.reshape(entry["shape"]).copy()
    return arrays, header["meta"]
