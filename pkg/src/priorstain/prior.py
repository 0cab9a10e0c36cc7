"""Soft structural prior: per-pixel nuclei probability from a segmentation backend.

The pretrained segmentation network is not bundled.  A backend is anything
implementing :class:`SegmentationBackend`; three ship here:

* :class:`BlobBackend` - Gaussian blobs at known nuclei centers (test oracle,
  and the stand-in used for synthetic tissue).
* :class:`FileBackend` - reads precomputed probability maps from
  ``<root>/priors/<case_id>/<patch_id>.png`` (16-bit, value / 65535).
* :class:`IntensityBackend` - classical smoothed-intensity sigmoid, used for
  instance detection on fluorescence channels.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage as ndi

from .core import ImagePatch, read_png, resize_array, to_unit_range
from .errors import BackendError, ParameterError, RangeViolationError, ShapeMismatchError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class SoftPrior:
    prob: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prob, dtype=np.float32)
        if p.ndim != 2:
            raise ShapeMismatchError(f"soft prior must be HxW, got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.all(np.isfinite(p))):
            raise RangeViolationError("soft prior values must lie in [0, 1]")
        object.__setattr__(self, "prob", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.prob.shape


@dataclass(frozen=True)
class BinaryMask:
    mask: np.ndarray
    threshold: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


class SegmentationBackend(abc.ABC):
    """Maps an image (HxW or HxWxC, values in [0,1]) to an HxW probability map."""

    name: str = "backend"
    deterministic: bool = True

    @abc.abstractmethod
    def predict(self, image: np.ndarray, patch_id: str | None = None) -> np.ndarray:
        ...


class BlobBackend(SegmentationBackend):
    """Gaussian blob oracle.

    Probability at pixel q is ``max_c exp(-|q - c|^2 / (2 (r_c / 2)^2))``, so the
    map is exactly 1 at each center and ``exp(-1/2)`` at half the radius.
    """

    name = "blob"

    def __init__(self, centers: Iterable[tuple[float, float, float]] = (), seed: int = 0):
        self.centers = [tuple(float(v) for v in c) for c in centers]
        for _, _, r in self.centers:
            if r <= 0:
                raise ParameterError("blob radius must be positive")
        # the map is analytic; the seed exists for interface parity with learned backends
        self.seed = seed

    def render(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        out = np.zeros((h, w), dtype=np.float64)
        if not self.centers:
            return out.astype(np.float32)
        rows = np.arange(h, dtype=np.float64)[:, None]
        cols = np.arange(w, dtype=np.float64)[None, :]
        for r0, c0, radius in self.centers:
            if not (0 <= r0 < h and 0 <= c0 < w):
                raise ParameterError(f"center ({r0}, {c0}) outside {h}x{w} image")
            sigma = radius / 2.0
            d2 = (rows - r0) ** 2 + (cols - c0) ** 2
            np.maximum(out, np.exp(-d2 / (2.0 * sigma * sigma)), out=out)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def predict(self, image, patch_id=None):
        return self.render(np.asarray(image).shape[:2])


def synthetic_blob_backend(centers, seed: int = 0) -> BlobBackend:
    return BlobBackend(centers, seed=seed)


class FileBackend(SegmentationBackend):
    """Reads externally computed probability maps keyed by ``case_id/patch_id``."""

    name = "file"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, patch_id: str) -> Path:
        case_id, _, pid = patch_id.rpartition("/")
        if not case_id:
            raise BackendError(f"file backend needs 'case_id/patch_id', got {patch_id!r}")
        return self.root / "priors" / case_id / f"{pid}.png"

    def predict(self, image, patch_id=None):
        if patch_id is None:
            raise BackendError("file backend requires a patch identifier")
        path = self.path_for(patch_id)
        if not path.exists():
            raise BackendError(f"no precomputed prior at {path}")
        prob = read_png(path)
        if prob.ndim == 3:
            prob = prob.mean(axis=2)
        shape = np.asarray(image).shape[:2]
        if prob.shape != shape:
            prob = resize_array(prob, shape)
        return prob


class IntensityBackend(SegmentationBackend):
    """Sigmoid of the Gaussian-smoothed nuclear signal.

    For 3-channel brightfield input the nuclear signal is the darkness
    ``1 - mean(RGB)``; single-channel input is used as is.  With the default
    ``level`` of 0.5, thresholding the output at 0.5 is a half-max threshold on
    the smoothed intensity.
    """

    name = "intensity"

    def __init__(self, level: float = 0.5, gain: float = 20.0, sigma: float = 1.0):
        self.level = level
        self.gain = gain
        self.sigma = sigma

    def predict(self, image, patch_id=None):
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            signal = 1.0 - arr.mean(axis=2) if arr.shape[2] == 3 else arr[:, :, 0]
        else:
            signal = arr
        if self.sigma > 0:
            signal = ndi.gaussian_filter(signal, self.sigma, mode="reflect")
        z = np.clip(self.gain * (signal - self.level), -60.0, 60.0)
        return (1.0 / (1.0 + np.exp(-z))).astype(np.float32)


def generate_soft_prior(
    x: ImagePatch, backend: SegmentationBackend, patch_id: str | None = None
) -> SoftPrior:
    """Single forward pass of ``backend`` on a 3-channel patch."""
    if x.channels != 3:
        raise ShapeMismatchError(f"soft prior expects a 3-channel IHC patch, got {x.channels}")
    image = to_unit_range(x.data, x.value_range).astype(np.float32)
    try:
        prob = backend.predict(image, patch_id=patch_id)
    except Exception as exc:
        raise BackendError(f"backend {backend.name!r} failed on patch {patch_id!r}: {exc}") from exc
    prob = np.asarray(prob, dtype=np.float32)
    if prob.shape != x.data.shape[:2]:
        raise BackendError(
            f"backend {backend.name!r} returned shape {prob.shape} for patch {patch_id!r}"
        )
    return SoftPrior(np.clip(prob, 0.0, 1.0))


def binarize(p: SoftPrior | np.ndarray, t: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """``1[p > t]`` with strict inequality."""
    if not 0.0 < t < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {t}")
    prob = p.prob if isinstance(p, SoftPrior) else np.asarray(p)
    return BinaryMask((prob > t).astype(np.uint8), float(t))
