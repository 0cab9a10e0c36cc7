"""Raster data model shared by every module.

Rasters travel as HWC ``float32`` arrays wrapped in :class:`ImagePatch` (the
brightfield input, optionally with a prior channel appended) or
:class:`MifStack` (multiplex fluorescence targets and predictions).  Both carry
their declared value range so conversions between the raw ``[0, 1]`` range and
the network range ``[-1, 1]`` are explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from skimage.transform import resize as _sk_resize

from .errors import ParameterError, RangeViolationError, ShapeMismatchError

RAW_RANGE = (0.0, 1.0)
NORM_RANGE = (-1.0, 1.0)
STANDARD_SIZE = 256
MIN_RESIZE_INPUT = 8

# float32 rounding of 2x-1 and friends
_RANGE_TOL = 1e-6


def _check_range(data: np.ndarray, value_range: tuple[float, float]) -> None:
    lo, hi = value_range
    if data.size == 0:
        return
    dmin, dmax = float(np.min(data)), float(np.max(data))
    if not (np.isfinite(dmin) and np.isfinite(dmax)):
        raise RangeViolationError("raster contains non-finite values")
    if dmin < lo - _RANGE_TOL or dmax > hi + _RANGE_TOL:
        raise RangeViolationError(
            f"values [{dmin:.6g}, {dmax:.6g}] outside declared range [{lo}, {hi}]"
        )


def _as_hwc(data: np.ndarray) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatchError(f"expected an HxWxC raster, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ImagePatch:
    """An HxWxC raster with a declared value range (raw [0,1] or normalized [-1,1])."""

    data: np.ndarray
    value_range: tuple[float, float] = RAW_RANGE

    def __post_init__(self):
        arr = _as_hwc(self.data)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))
        _check_range(arr, self.value_range)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class MifStack:
    """Multiplex-IF stack: HxWxK raster plus marker names."""

    data: np.ndarray
    channel_names: tuple[str, ...] = ("DAPI",)
    nuclear_channel_index: int = 0
    value_range: tuple[float, float] = RAW_RANGE

    def __post_init__(self):
        arr = _as_hwc(self.data)
        names = tuple(self.channel_names)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))
        if arr.shape[2] < 1 or len(names) != arr.shape[2]:
            raise ShapeMismatchError(
                f"{arr.shape[2]} channels but {len(names)} channel names"
            )
        if not 0 <= self.nuclear_channel_index < arr.shape[2]:
            raise ParameterError("nuclear_channel_index out of range")
        _check_range(arr, self.value_range)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, name: str) -> np.ndarray:
        return self.data[:, :, self.channel_names.index(name)]

    @property
    def nuclear(self) -> np.ndarray:
        return self.data[:, :, self.nuclear_channel_index]


Raster = ImagePatch | MifStack


def check_aligned(a: Raster, b: Raster) -> None:
    """Co-registration contract: identical spatial size."""
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ShapeMismatchError(f"spatial sizes differ: {a.data.shape[:2]} vs {b.data.shape[:2]}")


def to_unit_range(data: np.ndarray, value_range: Sequence[float]) -> np.ndarray:
    """Affinely map ``data`` from ``value_range`` onto [0, 1]."""
    lo, hi = value_range
    return (np.asarray(data, dtype=np.float64) - lo) / (hi - lo)


def normalize(patch: Raster) -> Raster:
    """Map a raw [0,1] raster to [-1,1] via ``2x - 1``."""
    if patch.value_range != RAW_RANGE:
        raise RangeViolationError(f"normalize expects range {RAW_RANGE}, got {patch.value_range}")
    return replace(patch, data=patch.data * 2.0 - 1.0, value_range=NORM_RANGE)


def denormalize(patch: Raster) -> Raster:
    """Inverse of :func:`normalize`."""
    if patch.value_range != NORM_RANGE:
        raise RangeViolationError(f"denormalize expects range {NORM_RANGE}, got {patch.value_range}")
    data = np.clip((patch.data + 1.0) * 0.5, 0.0, 1.0)
    return replace(patch, data=data, value_range=RAW_RANGE)


def resize_array(data: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxW or HxWxC array (no anti-aliasing, pixel-center aligned)."""
    arr = np.asarray(data)
    if isinstance(size, int):
        size = (size, size)
    if arr.shape[0] < MIN_RESIZE_INPUT or arr.shape[1] < MIN_RESIZE_INPUT:
        raise ParameterError(f"cannot resize degenerate raster of shape {arr.shape[:2]}")
    if tuple(arr.shape[:2]) == tuple(size):
        return arr.astype(np.float32, copy=True)
    out_shape = tuple(size) + arr.shape[2:]
    out = _sk_resize(
        arr.astype(np.float64), out_shape, order=1, mode="edge",
        anti_aliasing=False, preserve_range=True,
    )
    # bilinear weights are convex, so clamp only the float rounding
    out = np.clip(out, arr.min(), arr.max())
    return out.astype(np.float32)


def resize(patch: Raster, size: int = STANDARD_SIZE) -> Raster:
    return replace(patch, data=resize_array(patch.data, size))


def resize_to_256(patch: Raster) -> Raster:
    """Resize to the standard 256x256 working resolution."""
    return resize(patch, STANDARD_SIZE)


def concat_channels(x: ImagePatch, prior) -> ImagePatch:
    """Append a [0,1] prior map as a fourth channel, rescaled to ``x.value_range``.

    ``prior`` may be a :class:`~priorstain.prior.SoftPrior`, a
    :class:`~priorstain.prior.BinaryMask` or a bare HxW array.
    """
    if x.channels != 3:
        raise ShapeMismatchError(f"expected a 3-channel input, got {x.channels}")
    p = getattr(prior, "prob", None)
    if p is None:
        p = getattr(prior, "mask", prior)
    p = np.asarray(p, dtype=np.float32)
    if p.ndim == 3 and p.shape[2] == 1:
        p = p[:, :, 0]
    if p.shape != x.data.shape[:2]:
        raise ShapeMismatchError(f"prior shape {p.shape} does not match input {x.data.shape[:2]}")
    lo, hi = x.value_range
    scaled = lo + p * (hi - lo)
    return ImagePatch(np.concatenate([x.data, scaled[:, :, None]], axis=2), x.value_range)


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

def write_png(path: str | Path, data: np.ndarray, bits: int = 8) -> None:
    """Write a [0,1] raster as PNG.  RGB must be 8-bit; 16-bit is grayscale only."""
    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if bits == 8:
        img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    elif bits == 16:
        if arr.ndim != 2:
            raise ParameterError("16-bit PNGs must be single-channel")
        img = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    else:
        raise ParameterError(f"unsupported bit depth {bits}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG into a float32 [0,1] array (HxW or HxWx3)."""
    with Image.open(path) as img:
        arr = np.array(img)
        mode = img.mode
    if mode in ("I;16", "I;16B", "I") or arr.dtype == np.uint16:
        return (arr.astype(np.float64) / 65535.0).astype(np.float32)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def write_label_png(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.max(initial=0) > 65535:
        raise ParameterError("too many instances for a 16-bit label raster")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_label_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img).astype(np.int32)


def write_stack(path: str | Path, data: np.ndarray, channel_names: Sequence[str]) -> None:
    """Lossless container for stacks with more channels than PNG carries (``.npz``)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, data=np.asarray(data, dtype=np.float32),
                        channel_names=np.array(list(channel_names)))


def read_stack(path: str | Path) -> tuple[np.ndarray, tuple[str, ...]]:
    with np.load(path) as z:
        return z["data"].astype(np.float32), tuple(str(s) for s in z["channel_names"])
