"""Core volumetric data types and file I/O.

Canonical axis order is D x H x W (slice-major): axis 0 indexes axial
slices, so slice extraction for the viewer is a contiguous read.
"""

from __future__ import annotations

import gzip
import json
import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class Quality(str, Enum):
    HQ = "HQ"
    LQ = "LQ"
    RECTIFIED = "RECTIFIED"


class VolumeError(ValueError):
    """Raised on malformed volume files or inconsistent metadata."""


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with voxel spacing in mm.

    Immutable after construction; operations return new instances.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"expected 3 dimensions, got {self.data.ndim}")
        if any(s < 1 for s in self.data.shape):
            raise VolumeError(f"degenerate shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("volume contains non-finite voxels")
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelVolume:
    """A binary mask paired with a Volume of the same shape."""

    data: np.ndarray
    target_name: str = ""
    quality: Quality = Quality.HQ

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"expected 3 dimensions, got {self.data.ndim}")
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise VolumeError(f"label values must be in {{0,1}}, got {vals[:5]}")
        object.__setattr__(self, "data", self.data.astype(np.uint8))
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def foreground_count(self) -> int:
        return int(self.data.sum())


@dataclass
class ManifestEntry:
    volume_path: str
    label_paths: dict[str, str]
    quality: Quality
    split: str  # train_hq | train_lq | test
    volume_id: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split in ("train_hq", "test") and e.quality != Quality.HQ:
                raise VolumeError(f"{e.volume_id}: split {e.split} requires HQ labels")
            if e.split == "train_lq" and e.quality != Quality.LQ:
                raise VolumeError(f"{e.volume_id}: split train_lq requires LQ labels")
            if e.volume_id in seen:
                raise VolumeError(f"volume id {e.volume_id} appears in multiple entries")
            seen[e.volume_id] = e.split

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def save(self, path):
        doc = {
            "seed": self.seed,
            "entries": [
                {
                    "volume_path": e.volume_path,
                    "label_paths": e.label_paths,
                    "quality": e.quality.value,
                    "split": e.split,
                    "volume_id": e.volume_id,
                }
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        entries = [
            ManifestEntry(
                volume_path=d["volume_path"],
                label_paths=d["label_paths"],
                quality=Quality(d["quality"]),
                split=d["split"],
                volume_id=d["volume_id"],
            )
            for d in doc["entries"]
        ]
        return cls(entries=entries, seed=doc.get("seed", 0))


# ---------------------------------------------------------------------------
# Native raw + sidecar format


def save_volume(v: Volume, path) -> None:
    """Write ``<id>.raw`` (little-endian f32, D-major) + ``<id>.json`` sidecar.

    ``path`` may end in ``.raw`` or be the bare stem.
    """
    path = Path(path)
    if path.suffix in (".nii", ".gz"):
        _save_nifti(v.data.astype(np.float32), v.spacing, path)
        return
    stem = path.with_suffix("") if path.suffix == ".raw" else path
    data = np.ascontiguousarray(v.data, dtype="<f4")
    stem.with_suffix(".raw").write_bytes(data.tobytes())
    sidecar = {"shape": list(v.data.shape), "spacing": list(v.spacing), "dtype": "f32"}
    stem.with_suffix(".json").write_text(json.dumps(sidecar))


def load_volume(path, id: str | None = None) -> Volume:
    """Load a Volume from NIfTI (.nii/.nii.gz) or raw + JSON sidecar."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data, spacing = _load_nifti(path)
    else:
        stem = path.with_suffix("") if path.suffix in (".raw", ".json") else path
        sidecar_path = stem.with_suffix(".json")
        if not sidecar_path.exists():
            raise FileNotFoundError(sidecar_path)
        sidecar = json.loads(sidecar_path.read_text())
        shape = sidecar["shape"]
        if len(shape) != 3:
            raise VolumeError(f"expected 3 dimensions, sidecar has {len(shape)}")
        if sidecar.get("dtype", "f32") != "f32":
            raise VolumeError(f"unsupported dtype {sidecar['dtype']}")
        raw = stem.with_suffix(".raw").read_bytes()
        n = int(np.prod(shape))
        if len(raw) != 4 * n:
            raise VolumeError(
                f"raw size {len(raw)} does not match shape {shape} ({4 * n} bytes expected)"
            )
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        spacing = tuple(float(s) for s in sidecar.get("spacing", (1, 1, 1)))
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"{path}: non-finite voxels")
    return Volume(data=data, spacing=spacing, id=id or path.name.split(".")[0])


def save_label(lv: LabelVolume, path, spacing=(1.0, 1.0, 1.0)) -> None:
    meta = Volume(data=lv.data.astype(np.float32), spacing=spacing)
    save_volume(meta, path)


def load_label(path, target_name: str = "", quality: Quality = Quality.HQ) -> LabelVolume:
    v = load_volume(path)
    return LabelVolume(data=(v.data > 0.5).astype(np.uint8), target_name=target_name, quality=quality)


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 support (float32, single volume; enough for interchange)

_NIFTI_HDR_SIZE = 348
_NIFTI_VOX_OFFSET = 352.0
_DT_FLOAT32 = 16


def _save_nifti(data: np.ndarray, spacing, path: Path) -> None:
    d, h, w = data.shape
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    # dim: x fastest; our C-order (D,H,W) buffer is exactly x=W, y=H, z=D
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DT_FLOAT32)
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    sd, sh, sw = spacing
    struct.pack_into("<8f", hdr, 76, 0.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, _NIFTI_VOX_OFFSET)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    payload = bytes(hdr) + b"\x00" * 4 + np.ascontiguousarray(data, dtype="<f4").tobytes()
    if path.name.endswith(".gz"):
        path.write_bytes(gzip.compress(payload))
    else:
        path.write_bytes(payload)


def _load_nifti(path: Path):
    raw = path.read_bytes()
    if path.name.endswith(".gz"):
        raw = gzip.decompress(raw)
    if len(raw) < _NIFTI_HDR_SIZE:
        raise VolumeError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _NIFTI_HDR_SIZE:
        raise VolumeError(f"{path}: bad NIfTI header size {sizeof_hdr}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise VolumeError(f"expected 3 dimensions, got {dim[0]}")
    w, h, d = dim[1], dim[2], dim[3]
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype != _DT_FLOAT32:
        raise VolumeError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    off = int(vox_offset) or int(_NIFTI_VOX_OFFSET)
    n = w * h * d
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(d, h, w)
    spacing = (float(pixdim[3]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[1]) or 1.0)
    return data.astype(np.float32), spacing


# ---------------------------------------------------------------------------
# Intensity and geometry ops


def normalize_intensity(v: Volume, lo_pct: float = 0.5, hi_pct: float = 99.5) -> Volume:
    """Clip to [lo_pct, hi_pct] percentiles and rescale linearly to [0, 1].

    Percentile clipping is robust to the hot-spot outliers of PET uptake.
    A constant volume maps to all zeros (with a warning).
    """
    if not (0 <= lo_pct < hi_pct <= 100):
        raise ValueError(f"bad percentile range [{lo_pct}, {hi_pct}]")
    lo, hi = np.percentile(v.data, [lo_pct, hi_pct])
    if hi <= lo:
        warnings.warn(f"volume {v.id or '<unnamed>'} is constant; normalized to zeros")
        return Volume(data=np.zeros_like(v.data, dtype=np.float32), spacing=v.spacing, id=v.id)
    out = (np.clip(v.data, lo, hi) - lo) / (hi - lo)
    return Volume(data=out.astype(np.float32), spacing=v.spacing, id=v.id)


def extract_patch(data: np.ndarray, center, size) -> np.ndarray:
    """Crop a ``size``-shaped block centered at ``center``, zero-padded at bounds.

    Works for image and label arrays alike; applying it with the same
    (center, size) to both keeps them voxelwise aligned.
    """
    size = tuple(int(s) for s in size)
    if any(s <= 0 for s in size):
        raise ValueError(f"patch size must be positive, got {size}")
    out = np.zeros(size, dtype=data.dtype)
    src_lo, src_hi, dst_lo, dst_hi = [], [], [], []
    for ax in range(3):
        start = int(center[ax]) - size[ax] // 2
        stop = start + size[ax]
        s_lo, s_hi = max(start, 0), min(stop, data.shape[ax])
        if s_lo >= s_hi:  # fully outside
            return out
        src_lo.append(s_lo)
        src_hi.append(s_hi)
        dst_lo.append(s_lo - start)
        dst_hi.append(s_hi - start)
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = data[
        src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
    ]
    return out


def extract_volume_patch(v: Volume, center, size) -> Volume:
    return Volume(data=extract_patch(v.data, center, size), spacing=v.spacing, id=v.id)


def extract_label_patch(lv: LabelVolume, center, size) -> LabelVolume:
    return LabelVolume(
        data=extract_patch(lv.data, center, size),
        target_name=lv.target_name,
        quality=lv.quality,
    )
