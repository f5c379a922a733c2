"""CT volumes, lung masks and label maps, the EVF1 container, and lung normalisation.

Arrays are held as numpy arrays of shape ``(nz, ny, nx)`` so that C order is
x-fastest, matching the on-disk layout ``index = x + nx * (y + ny * z)``.
``dims`` is always reported as ``(nx, ny, nz)``.

EVF1 layout::

    b"EVF1\\n"
    {"dims": [nx, ny, nz], "dtype": "i16", "spacing_mm": [sx, sy, sz]}\\n
    raw little-endian payload, x-fastest

``dtype`` is one of ``i16`` (HU), ``u8`` (masks and labels) or ``f32``
(normalised ROI cubes).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

EVF_MAGIC = b"EVF1\n"
DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}
ROI_EDGE = 36


class VolumeFormatError(ValueError):
    """EVF1 read/write failure; ``code`` is one of ``bad_magic``, ``bad_header``,
    ``dim_mismatch`` or ``truncated``."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(eq=False)
class Volume:
    """A 3-D grid of voxels.

    Attributes:
        voxels: array of shape ``(nz, ny, nx)``.
        spacing_mm: ``(sx, sy, sz)`` voxel size.
    """

    voxels: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3-D array, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive reals, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    def dtype_code(self) -> str:
        for code, dt in DTYPES.items():
            if self.voxels.dtype == dt.newbyteorder("="):
                return code
        raise VolumeFormatError("bad_header", f"dtype {self.voxels.dtype} has no EVF1 code")

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.spacing_mm == other.spacing_mm
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )


class LungMask(Volume):
    """Binary lung mask, 1 = lung."""

    def __post_init__(self):
        super().__post_init__()
        self.voxels = (self.voxels != 0).astype(np.uint8)


class LabelMap(Volume):
    """Per-voxel sLTP label, 0 = unlabeled, 1..10 = pattern index."""

    def __post_init__(self):
        super().__post_init__()
        if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 10):
            raise ValueError("labels must lie in 0..10")
        self.voxels = self.voxels.astype(np.uint8)


@dataclass
class SubjectRecord:
    subject_id: str
    scanner_model: str
    uln_pct: Optional[float]
    volume: Optional[Volume] = None
    mask: Optional[LungMask] = None
    labels: Optional[LabelMap] = None
    paths: dict = field(default_factory=dict)

    def load(self) -> "SubjectRecord":
        """Fill missing arrays from ``paths`` (keys ``volume``, ``mask``, ``labels``)."""
        if self.volume is None and "volume" in self.paths:
            self.volume = read_volume(self.paths["volume"])
        if self.mask is None and "mask" in self.paths:
            self.mask = read_mask(self.paths["mask"])
        if self.labels is None and self.paths.get("labels"):
            self.labels = read_labels(self.paths["labels"])
        return self


# -- indexing ------------------------------------------------------------------


def linear_index(x, y, z, dims) -> np.ndarray:
    nx, ny, _ = dims
    return np.asarray(x) + nx * (np.asarray(y) + ny * np.asarray(z))


def unravel_index(index, dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nx, ny, _ = dims
    index = np.asarray(index)
    return index % nx, (index // nx) % ny, index // (nx * ny)


# -- EVF1 ----------------------------------------------------------------------


def encode_volume(vol: Volume) -> bytes:
    code = vol.dtype_code()
    header = {"dims": list(vol.dims), "dtype": code, "spacing_mm": list(vol.spacing_mm)}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(vol.voxels, dtype=DTYPES[code]).tobytes()
    return EVF_MAGIC + line + b"\n" + payload


def decode_volume(raw: bytes, cls=Volume) -> Volume:
    if not raw.startswith(EVF_MAGIC):
        raise VolumeFormatError("bad_magic", "missing EVF1 magic")
    nl = raw.find(b"\n", len(EVF_MAGIC))
    if nl < 0:
        raise VolumeFormatError("bad_header", "header line is not terminated")
    try:
        header = json.loads(raw[len(EVF_MAGIC) : nl].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype = DTYPES[header["dtype"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError("bad_header", f"unreadable header: {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError("bad_header", f"dims {dims} are not three positive counts")
    payload = raw[nl + 1 :]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) < expected:
        raise VolumeFormatError("truncated", f"payload has {len(payload)} bytes, dims {dims} need {expected}")
    if len(payload) > expected:
        raise VolumeFormatError("dim_mismatch", f"payload has {len(payload)} bytes, dims {dims} need {expected}")
    nx, ny, nz = dims
    arr = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    return cls(arr, spacing)


def write_volume(vol: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path, cls=Volume) -> Volume:
    return decode_volume(Path(path).read_bytes(), cls)


def read_mask(path) -> LungMask:
    return read_volume(path, LungMask)


def read_labels(path) -> LabelMap:
    return read_volume(path, LabelMap)


# -- normalisation -------------------------------------------------------------


@dataclass
class NormalizedField:
    values: np.ndarray
    lo: float
    hi: float
    degenerate: bool = False


def normalize_lung_intensity(volume: Volume, mask: Volume) -> NormalizedField:
    """Min-max scale lung voxels to [0, 1]; non-lung voxels become 0.

    A constant lung intensity maps every voxel to 0 and sets ``degenerate``.
    """
    if mask.voxels.shape != volume.voxels.shape:
        raise ValueError(f"mask dims {mask.dims} != volume dims {volume.dims}")
    inside = mask.voxels != 0
    if not inside.any():
        raise ValueError("lung mask is empty")
    hu = volume.voxels.astype(np.float64)
    lung = hu[inside]
    lo, hi = float(lung.min()), float(lung.max())
    out = np.zeros(hu.shape)
    if hi == lo:
        warnings.warn("lung intensity range is zero; normalised field set to 0", RuntimeWarning, stacklevel=2)
        return NormalizedField(out, lo, hi, True)
    out[inside] = (lung - lo) / (hi - lo)
    return NormalizedField(out, lo, hi, False)


def extract_cube(arr: np.ndarray, centroid, edge: int = ROI_EDGE) -> np.ndarray:
    """The ``edge``^3 block covering ``[c - edge/2, c + edge/2)`` on each axis.

    ``centroid`` is ``(x, y, z)``; ``arr`` is indexed ``[z, y, x]``.
    """
    h = edge // 2
    x, y, z = (int(c) for c in centroid)
    lo = (z - h, y - h, x - h)
    if min(lo) < 0 or z - h + edge > arr.shape[0] or y - h + edge > arr.shape[1] or x - h + edge > arr.shape[2]:
        raise IndexError(f"cube at centroid {(x, y, z)} leaves the {arr.shape[::-1]} grid")
    return arr[z - h : z - h + edge, y - h : y - h + edge, x - h : x - h + edge]


def valid_centroid_bounds(dims, edge: int = ROI_EDGE) -> tuple[tuple[int, int], ...]:
    """Per-axis half-open ranges ``[lo, hi)`` of centroids whose cube fits."""
    h = edge // 2
    return tuple((h, n - edge + h + 1) for n in dims)
