"""Image-quality and quantification metrics.

All raster metrics take HxW or HxWxK arrays (or :class:`MifStack`) and map
them to [0, 1] using ``value_range`` before computing anything.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage as ndi

from .core import MifStack, to_unit_range
from .errors import (
    BackendError, ParameterError, ProtocolError, ShapeMismatchError, UndefinedFractionError,
)
from .prior import IntensityBackend, SegmentationBackend

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
TAU_GRID_SIZE = 256
DETECTION_THRESHOLD = 0.5
METRIC_FIELDS = ("ssim", "lpips_like", "ki67_error", "pmae", "nuclei_count_delta")


def _unit(x, value_range) -> np.ndarray:
    if isinstance(x, MifStack):
        return to_unit_range(x.data, x.value_range)
    return to_unit_range(x, value_range)


def _as_hwk(x: np.ndarray) -> np.ndarray:
    return x[:, :, None] if x.ndim == 2 else x


def _single_channel(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        if x.shape[2] != 1:
            raise ShapeMismatchError(f"expected a single channel, got {x.shape[2]}")
        x = x[:, :, 0]
    return x


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation restricted to fully-covered positions
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM index map of two [0,1] single-channel images over valid window positions."""
    if min(a.shape) < SSIM_WINDOW:
        raise ParameterError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    g = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _valid_filter(a, g)
    mu_b = _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a ** 2
    var_b = _valid_filter(b * b, g) - mu_b ** 2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, target, value_range=(0.0, 1.0)) -> float:
    """Channel-averaged SSIM (Gaussian window 11, sigma 1.5, K1 0.01, K2 0.03, data range 1)."""
    a, b = _as_hwk(_unit(pred, value_range)), _as_hwk(_unit(target, value_range))
    if a.shape != b.shape:
        raise ShapeMismatchError(f"pred {a.shape} vs target {b.shape}")
    return float(np.mean([ssim_map(a[:, :, c], b[:, :, c]).mean() for c in range(a.shape[2])]))


# ---------------------------------------------------------------------------
# Perceptual distance
# ---------------------------------------------------------------------------

class RandomFeaturePyramid(torch.nn.Module):
    """Frozen random conv pyramid used as the default perceptual feature extractor.

    Weights come from a fixed-seed PCG64 stream, so every install builds the
    same network.  Input: N x 1 x H x W in [-1, 1]; output: one feature map per level.
    """

    name = "random_pyramid"

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 64), seed: int = 1234):
        super().__init__()
        rng = np.random.default_rng(seed)
        convs = []
        in_ch = 1
        for w in widths:
            fan_in = in_ch * 9
            weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(w, in_ch, 3, 3))
            bias = rng.normal(0.0, 0.01, size=w)
            conv = torch.nn.Conv2d(in_ch, w, 3, padding=1, padding_mode="reflect")
            conv.weight.data = torch.tensor(weight, dtype=torch.float32)
            conv.bias.data = torch.tensor(bias, dtype=torch.float32)
            convs.append(conv)
            in_ch = w
        self.convs = torch.nn.ModuleList(convs)
        self.channel_weights = [torch.ones(w) for w in widths]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


_DEFAULT_BACKEND: RandomFeaturePyramid | None = None


def default_feature_backend() -> RandomFeaturePyramid:
    global _DEFAULT_BACKEND
    if _DEFAULT_BACKEND is None:
        _DEFAULT_BACKEND = RandomFeaturePyramid()
    return _DEFAULT_BACKEND


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (torch.sqrt((f * f).sum(dim=1, keepdim=True)) + eps)


@torch.no_grad()
def perceptual_distance(pred, target, feature_backend=None, value_range=(0.0, 1.0)) -> float:
    """LPIPS-style distance: per level, channel-normalize features, weighted squared
    difference summed over channels, averaged spatially; summed over levels.

    Each image channel is scored as a grayscale image and the per-channel
    distances are averaged.  ``feature_backend`` maps N x 1 x H x W inputs in
    [-1, 1] to a list of feature maps and may expose ``channel_weights``.
    """
    backend = feature_backend or default_feature_backend()
    a, b = _as_hwk(_unit(pred, value_range)), _as_hwk(_unit(target, value_range))
    if a.shape != b.shape:
        raise ShapeMismatchError(f"pred {a.shape} vs target {b.shape}")
    ta = torch.tensor(a.transpose(2, 0, 1)[:, None] * 2.0 - 1.0, dtype=torch.float32)
    tb = torch.tensor(b.transpose(2, 0, 1)[:, None] * 2.0 - 1.0, dtype=torch.float32)
    try:
        fa, fb = backend(ta), backend(tb)
    except Exception as exc:
        raise BackendError(f"feature backend failed: {exc}") from exc
    weights = getattr(backend, "channel_weights", None)
    total = torch.zeros(ta.shape[0], dtype=torch.float64)
    for level, (xa, xb) in enumerate(zip(fa, fb)):
        d = (_unit_normalize(xa) - _unit_normalize(xb)) ** 2
        if weights is not None:
            d = d * weights[level].view(1, -1, 1, 1)
        total += d.sum(dim=1).mean(dim=(1, 2)).double()
    return float(total.mean())


# ---------------------------------------------------------------------------
# Instances and Ki67 positivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceLabelMap:
    labels: np.ndarray
    n: int

    def __post_init__(self):
        present = np.unique(self.labels)
        present = present[present > 0]
        if len(present) != self.n or (self.n and (present[0] != 1 or present[-1] != self.n)):
            raise ParameterError("instance labels must be contiguous 1..N with every instance non-empty")

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "InstanceLabelMap":
        """Relabel an arbitrary integer raster to contiguous ids (order of first id preserved)."""
        labels = np.asarray(labels)
        ids = np.unique(labels)
        ids = ids[ids > 0]
        lut = np.zeros(int(labels.max(initial=0)) + 1, dtype=np.int32)
        lut[ids] = np.arange(1, len(ids) + 1)
        return cls(lut[labels], len(ids))


def detect_instances(nuclear_channel, backend: SegmentationBackend | None = None,
                     value_range=(0.0, 1.0), threshold: float = DETECTION_THRESHOLD) -> InstanceLabelMap:
    """Threshold the backend's probability map and label connected components."""
    chan = _single_channel(_unit(nuclear_channel, value_range)).astype(np.float32)
    backend = backend or IntensityBackend()
    try:
        prob = np.asarray(backend.predict(chan))
    except Exception as exc:
        raise BackendError(f"segmentation backend {getattr(backend, 'name', backend)!r} failed: {exc}") from exc
    labels, n = ndi.label(prob > threshold)
    return InstanceLabelMap(labels.astype(np.int32), int(n))


@dataclass(frozen=True)
class Ki67Threshold:
    tau: float
    selected_on: str = "validation"
    grid_min: float | None = None
    grid_max: float | None = None
    grid_size: int = TAU_GRID_SIZE
    validation_error: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Ki67Threshold":
        return cls(**d)


def _tau_value(tau) -> float:
    return float(tau.tau if isinstance(tau, Ki67Threshold) else tau)


def instance_means(instances: InstanceLabelMap, marker: np.ndarray) -> np.ndarray:
    """Mean marker intensity per instance, ordered by label 1..N."""
    if marker.shape != instances.labels.shape:
        raise ShapeMismatchError(f"marker {marker.shape} vs labels {instances.labels.shape}")
    if instances.n == 0:
        return np.zeros(0)
    return np.asarray(ndi.mean(marker, instances.labels, index=np.arange(1, instances.n + 1)))


def ki67_fraction(instances: InstanceLabelMap, marker, tau, value_range=(0.0, 1.0)) -> float:
    """Fraction of instances whose mean marker intensity is strictly above ``tau``."""
    if instances.n == 0:
        raise UndefinedFractionError("positive fraction is undefined without nuclei")
    means = instance_means(instances, _single_channel(_unit(marker, value_range)))
    return float(np.count_nonzero(means > _tau_value(tau)) / instances.n)


@dataclass
class Ki67ErrorResult:
    mean_error: float | None
    per_image: list[float | None]
    n_skipped: int


def ki67_image_error(pred_marker, gt_marker, instances, tau, value_range=(0.0, 1.0)) -> float:
    return abs(ki67_fraction(instances, pred_marker, tau, value_range)
               - ki67_fraction(instances, gt_marker, tau, value_range))


def ki67_error(cases: Iterable, tau, value_range=(0.0, 1.0)) -> Ki67ErrorResult:
    """Mean per-image ``|f_pred - f_gt|`` over ``(pred_marker, gt_marker, instances)`` cases.

    Images without nuclei are skipped and counted.
    """
    per_image = []
    for pred, gt, inst in cases:
        try:
            per_image.append(ki67_image_error(pred, gt, inst, tau, value_range))
        except UndefinedFractionError:
            per_image.append(None)
    valid = [e for e in per_image if e is not None]
    return Ki67ErrorResult(float(np.mean(valid)) if valid else None, per_image,
                           len(per_image) - len(valid))


def select_tau(val_cases: Sequence, grid_size: int = TAU_GRID_SIZE,
               value_range=(0.0, 1.0)) -> Ki67Threshold:
    """Grid-search the positivity threshold on validation cases.

    The grid spans the observed marker intensities; ties resolve to the
    smallest threshold.
    """
    prepared = []
    lo, hi = np.inf, -np.inf
    for pred, gt, inst in val_cases:
        if inst.n == 0:
            continue
        p = _single_channel(_unit(pred, value_range))
        g = _single_channel(_unit(gt, value_range))
        lo = min(lo, float(p.min()), float(g.min()))
        hi = max(hi, float(p.max()), float(g.max()))
        prepared.append((instance_means(inst, p), instance_means(inst, g)))
    if not prepared:
        raise ProtocolError("threshold selection needs at least one validation case with nuclei")
    grid = np.linspace(lo, hi, grid_size)
    errors = np.zeros(grid_size)
    for pm, gm in prepared:
        fp = (pm[None, :] > grid[:, None]).mean(axis=1)
        fg = (gm[None, :] > grid[:, None]).mean(axis=1)
        errors += np.abs(fp - fg)
    errors /= len(prepared)
    best = int(np.flatnonzero(errors <= errors.min() + 1e-12)[0])
    return Ki67Threshold(float(grid[best]), "validation", float(lo), float(hi), grid_size,
                         float(errors[best]))


# ---------------------------------------------------------------------------
# Pixel error and counting
# ---------------------------------------------------------------------------

def pmae(pred, target, value_range=(0.0, 1.0)) -> float:
    """Per-pixel mean absolute error of one channel, in [0,1] units."""
    a = _single_channel(_unit(pred, value_range))
    b = _single_channel(_unit(target, value_range))
    if a.shape != b.shape:
        raise ShapeMismatchError(f"pred {a.shape} vs target {b.shape}")
    return float(np.abs(a - b).mean())


def nuclei_count_delta(pred_nuclear, gt_nuclear, backend: SegmentationBackend | None = None,
                       value_range=(0.0, 1.0)) -> tuple[int, float]:
    """``(|N_pred - N_gt|, |N_pred - N_gt| / max(N_gt, 1))`` with a shared detector."""
    n_pred = detect_instances(pred_nuclear, backend, value_range).n
    n_gt = detect_instances(gt_nuclear, backend, value_range).n
    delta = abs(n_pred - n_gt)
    return delta, delta / max(n_gt, 1)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _mean_std(values: list) -> tuple[float | None, float | None, int]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, 0
    return float(np.mean(vals)), float(np.std(vals)), len(vals)


@dataclass
class MetricReport:
    records: list[dict]
    config_hash: str = ""
    tau: Ki67Threshold | None = None
    split: str = ""
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        keys = list(METRIC_FIELDS) + ["nuclei_count_rel"]
        out = {}
        for k in keys:
            mean, std, n = _mean_std([r.get(k) for r in self.records])
            out[k] = {"mean": mean, "std": std, "n": n}
        out["ki67_skipped"] = sum(1 for r in self.records if r.get("ki67_skipped"))
        return out

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "split": self.split,
            "tau": self.tau.to_dict() if self.tau else None,
            "records": self.records,
            "aggregates": self.aggregates(),
            "meta": self.meta,
        }

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path:
            self.write_csv(csv_path)

    def table_row(self, quant: str | None = None) -> dict:
        """Aggregate row in table column order: SSIM, LPIPS-like, then Ki67 error or pMAE."""
        agg = self.aggregates()
        if quant is None:
            quant = "ki67_error" if agg["ki67_error"]["n"] else "pmae"
        row = {"config_hash": self.config_hash}
        for k in ("ssim", "lpips_like", quant, "nuclei_count_delta"):
            row[k] = agg[k]["mean"]
            row[f"{k}_std"] = agg[k]["std"]
        return row

    def write_csv(self, path) -> None:
        row = self.table_row()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)

    @classmethod
    def load(cls, path) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        rep = cls(d["records"], d.get("config_hash", ""),
                  Ki67Threshold.from_dict(d["tau"]) if d.get("tau") else None,
                  d.get("split", ""), d.get("meta", {}))
        stored = d.get("aggregates", {})
        for k, v in rep.aggregates().items():
            if k not in stored:
                continue
            if isinstance(v, dict):
                s = stored[k]
                if (v["mean"] is None) != (s["mean"] is None) or (
                        v["mean"] is not None and abs(v["mean"] - s["mean"]) > 1e-9):
                    raise ValueError(f"report aggregate {k!r} does not match its per-case records")
        return rep
