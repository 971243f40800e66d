"""Dense 3D scalar volumes with physical voxel pitch, plus raw/JSON file I/O.

Arrays are indexed ``(x, y, z)`` with shape ``(Nx, Ny, Nz)``. On disk the
payload is written x-fastest (Fortran order) as little-endian float32,
next to a JSON header::

    <name>.json  {"dims": [Nx, Ny, Nz], "pitch_um": [px, py, pz],
                  "dtype": "f32", "order": "little"}
    <name>.raw   Nx*Ny*Nz*4 bytes
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np

__all__ = [
    "Volume",
    "VolumeHeader",
    "VolumeFormatError",
    "as_array",
    "dot",
    "save_volume",
    "load_volume",
    "load_tiff_stack",
    "mip",
    "mip_to_uint8",
    "save_mip_png",
]

# Largest voxel count accepted from a header (~ 16 GiB of float32).
MAX_VOXELS = 1 << 32

Pitch = tuple[float, float, float]


class VolumeFormatError(ValueError):
    """Raised for malformed headers or payloads."""


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar field on an ``Nx x Ny x Nz`` grid.

    ``pitch`` is ``(px_x, px_y, step_z)`` in micrometres. ``offset`` says
    whether physical coordinates are centred on the grid or start at the
    corner voxel.
    """

    data: np.ndarray
    pitch: Pitch = (1.0, 1.0, 1.0)
    offset: Literal["centered", "corner"] = "centered"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite samples")
        arr = arr.copy()
        arr.setflags(write=False)
        pitch = tuple(float(p) for p in self.pitch)
        if len(pitch) != 3 or min(pitch) <= 0:
            raise ValueError(f"pitch must be 3 positive reals, got {self.pitch}")
        if self.offset not in ("centered", "corner"):
            raise ValueError(f"unknown offset convention {self.offset!r}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "pitch", pitch)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.pitch, self.offset)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    pitch: Pitch
    dtype: str = "f32"
    byte_order: str = "little"

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "pitch_um": list(self.pitch),
            "dtype": self.dtype,
            "order": self.byte_order,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VolumeHeader":
        try:
            dims = tuple(obj["dims"])
            pitch = tuple(float(p) for p in obj["pitch_um"])
            dtype = obj.get("dtype", "f32")
            order = obj.get("order", "little")
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError(f"malformed volume header: {exc}") from exc
        if len(dims) != 3 or not all(isinstance(n, int) and not isinstance(n, bool) for n in dims):
            raise VolumeFormatError(f"dims must be 3 integers, got {obj['dims']!r}")
        if min(dims) < 1:
            raise VolumeFormatError(f"dims must be positive, got {dims}")
        if int(np.prod(dims, dtype=object)) > MAX_VOXELS:
            raise VolumeFormatError(f"dims {dims} exceed the supported voxel count")
        if len(pitch) != 3 or min(pitch) <= 0 or not all(np.isfinite(pitch)):
            raise VolumeFormatError(f"pitch must be 3 positive reals, got {pitch}")
        if dtype != "f32":
            raise VolumeFormatError(f"unsupported dtype tag {dtype!r}")
        if order != "little":
            raise VolumeFormatError(f"unsupported byte order {order!r}")
        return cls(dims, pitch, dtype, order)


def as_array(v: Union[Volume, np.ndarray]) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def dot(a, b) -> float:
    """Inner product ``sum_j a_j b_j`` accumulated in double precision."""
    a = as_array(a)
    b = as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel().astype(np.float64, copy=False),
                        b.ravel().astype(np.float64, copy=False)))


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def save_volume(v: Volume, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.raw``; returns both paths.

    Samples are stored as float32, so the round trip is bit-exact for
    float32 volumes (which is what :func:`load_volume` returns).
    """
    header_path, raw_path = _paths(path)
    header = VolumeHeader(v.dims, v.pitch)
    payload = np.asarray(v.data, dtype="<f4").ravel(order="F")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    with open(raw_path, "wb") as fh:
        fh.write(payload.tobytes())
    with open(header_path, "w") as fh:
        json.dump(header.to_json(), fh, indent=2)
        fh.write("\n")
    return header_path, raw_path


def load_volume(path) -> Volume:
    header_path, raw_path = _paths(path)
    try:
        with open(header_path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise VolumeFormatError(f"malformed header {header_path}")
    header = VolumeHeader.from_json(obj)
    expected = int(np.prod(header.dims)) * 4
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise VolumeFormatError(
            f"payload {raw_path} has {actual} bytes, header implies {expected}"
        )
    flat = np.fromfile(raw_path, dtype="<f4")
    data = flat.reshape(header.dims, order="F").astype(np.float32)
    return Volume(data, header.pitch)


def load_tiff_stack(path, pitch: Sequence[float] = (1.0, 1.0, 1.0)) -> Volume:
    """Import a multi-page, single-channel 16-bit TIFF as a float32 volume.

    Pages are z-planes; each page is stored row-major ``(y, x)``.
    """
    import tifffile

    pages = tifffile.imread(path)
    if pages.dtype != np.uint16:
        raise VolumeFormatError(f"expected 16-bit unsigned TIFF, got {pages.dtype}")
    if pages.ndim == 2:
        pages = pages[None]
    if pages.ndim != 3:
        raise VolumeFormatError(f"expected a single-channel stack, got shape {pages.shape}")
    data = np.transpose(pages, (2, 1, 0)).astype(np.float32)
    return Volume(data, tuple(pitch))


_AXES = {"x": 0, "y": 1, "z": 2}


def mip(v, axis: Union[str, int] = "z") -> np.ndarray:
    """Maximum-intensity projection along ``axis`` (``x``, ``y`` or ``z``)."""
    arr = as_array(v)
    ax = _AXES[axis] if isinstance(axis, str) else int(axis)
    if ax not in (0, 1, 2):
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    return arr.max(axis=ax)


def mip_to_uint8(image: np.ndarray) -> np.ndarray:
    """Min-max normalise a projection to 8-bit; constant images map to 0."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round(255.0 * (image - lo) / (hi - lo)).astype(np.uint8)


def save_mip_png(v, path, axis: Union[str, int] = "z") -> Path:
    from PIL import Image

    img = mip_to_uint8(mip(v, axis))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # PIL expects (rows, cols); rows run along the second remaining axis.
    Image.fromarray(np.ascontiguousarray(img.T)).save(path)
    return path
