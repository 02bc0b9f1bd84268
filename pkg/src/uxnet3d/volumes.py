"""Volume containers and file formats (raw ``.uxv`` + JSON sidecar, NIfTI-1)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODALITIES = ("CT", "MR", "SYNTH")


class VolumeError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: str = "SYNTH"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeError(f"spacing must be 3 positive values, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise VolumeError("volume contains NaN or infinite values")
        if self.modality not in MODALITIES:
            raise VolumeError(f"modality must be one of {MODALITIES}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class LabelVolume:
    data: np.ndarray
    num_classes: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise VolumeError(f"labels must be integers, got {self.data.dtype}")
        self.data = self.data.astype(np.int32, copy=False)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise VolumeError(f"label volume must be 3D, got shape {self.data.shape}")
        if self.num_classes < 1:
            raise VolumeError("num_classes must be positive")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.num_classes):
            raise VolumeError(
                f"label values must lie in [0, {self.num_classes}), found [{self.data.min()}, {self.data.max()}]"
            )

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, (Volume, LabelVolume)) else np.asarray(v)


# ---------------------------------------------------------------------------
# Raw format
# ---------------------------------------------------------------------------

_RAW_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_raw(vol: Volume | LabelVolume, path) -> None:
    path = Path(path)
    if isinstance(vol, LabelVolume):
        meta = {"extents": list(vol.shape), "dtype": "i32", "spacing": list(vol.spacing), "kind": "label",
                "num_classes": vol.num_classes}
    else:
        meta = {"extents": list(vol.shape), "dtype": "f32", "spacing": list(vol.spacing), "kind": "image",
                "modality": vol.modality}
    dt = _RAW_DTYPES[meta["dtype"]]
    path.write_bytes(np.ascontiguousarray(vol.data, dtype=dt).tobytes())
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True))


def load_raw(path, num_classes: int | None = None) -> Volume | LabelVolume:
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError:
        raise VolumeError(f"missing sidecar {sidecar_path(path)}") from None
    for key in ("extents", "dtype", "spacing", "kind"):
        if key not in meta:
            raise VolumeError(f"{sidecar_path(path)}: missing key {key!r}")
    if meta["dtype"] not in _RAW_DTYPES:
        raise VolumeError(f"unsupported raw dtype {meta['dtype']!r}")
    dt = _RAW_DTYPES[meta["dtype"]]
    extents = tuple(int(e) for e in meta["extents"])
    raw = path.read_bytes()
    expected = int(np.prod(extents)) * dt.itemsize
    if len(raw) != expected:
        raise VolumeError(f"{path}: sidecar extents {extents} need {expected} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dt).reshape(extents)
    if meta["kind"] == "label":
        k = num_classes if num_classes is not None else meta.get("num_classes")
        if k is None:
            k = int(data.max()) + 1 if data.size else 1
        return LabelVolume(data.astype(np.int32), int(k), meta["spacing"])
    if meta["kind"] != "image":
        raise VolumeError(f"unknown volume kind {meta['kind']!r}")
    return Volume(data.astype(np.float32), meta["spacing"], meta.get("modality", "SYNTH"))


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
_NIFTI_TYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


def load_nifti(path, modality: str = "CT") -> Volume:
    """Uncompressed single-file little-endian NIfTI-1 with int16 or float32 voxels."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise VolumeError(f"{path}: unsupported: compressed NIfTI (gunzip it first)")
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise VolumeError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348 (little-endian NIfTI-1 only)")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise VolumeError(f"{path}: bad magic {magic!r}, expected single-file 'n+1'")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise VolumeError(f"{path}: dim[0] is {dim[0]}, only 3D volumes are supported")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_TYPES:
        raise VolumeError(f"{path}: unsupported datatype code {datatype} (int16=4, float32=16 only)")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<3f", raw, 108)
    extents = tuple(int(d) for d in dim[1:4])
    dt = _NIFTI_TYPES[datatype]
    count = int(np.prod(extents))
    start = int(vox_offset)
    if len(raw) < start + count * dt.itemsize:
        raise VolumeError(f"{path}: truncated voxel data")
    # NIfTI stores x fastest
    data = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(extents, order="F")
    data = data.astype(np.float32)
    if slope != 0.0 and np.isfinite(slope):
        data = data * np.float32(slope) + np.float32(inter)
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return Volume(np.ascontiguousarray(data), spacing, modality)


def save_nifti(vol: Volume, path, datatype: int = 16) -> None:
    """Write a minimal NIfTI-1 file (float32 or int16, no scaling)."""
    if datatype not in _NIFTI_TYPES:
        raise VolumeError(f"unsupported datatype code {datatype}")
    dt = _NIFTI_TYPES[datatype]
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(vol.data).astype(dt).tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + body)
