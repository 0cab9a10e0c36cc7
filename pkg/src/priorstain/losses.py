"""Variance-preserving regularizer and loss composition.

Local variance uses the pooling identity ``V = mu_k(I^2) - mu_k(I)^2`` with
``mu_k`` a k x k box average over a reflect-padded raster, so the output keeps
the input's spatial size.  The regularizer is the mean squared difference of
the prediction and target variance maps (mean over N*K*H*W, which keeps the
weight resolution-independent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import MifStack
from .errors import ConfigurationError, NumericalError, ParameterError, ShapeMismatchError

BASE_KINDS = ("adversarial_l1", "l1_regression", "diffusion_noise")


@dataclass(frozen=True)
class LossConfig:
    lambda_var: float = 50.0
    kernel_k: int = 15
    lambda_l1: float = 100.0
    base_kind: str = "l1_regression"

    def __post_init__(self):
        if self.kernel_k < 3 or self.kernel_k % 2 == 0:
            raise ParameterError(f"kernel_k must be odd and >= 3, got {self.kernel_k}")
        if self.lambda_var < 0 or self.lambda_l1 < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.base_kind not in BASE_KINDS:
            raise ParameterError(f"unknown base loss {self.base_kind!r}")


@dataclass(frozen=True)
class VarianceMap:
    var: np.ndarray  # H x W x K
    k: int


def _as_nchw(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        t = img
        if t.ndim == 2:
            t = t[None, None]
        elif t.ndim == 3:
            t = t[None]
        return t
    if isinstance(img, MifStack):
        img = img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def _check_kernel(k: int, h: int, w: int) -> None:
    if k % 2 == 0 or k < 3:
        raise ParameterError(f"kernel size must be odd and >= 3, got {k}")
    if k > min(h, w):
        raise ParameterError(f"kernel size {k} exceeds raster size {h}x{w}")


def box_mean(x: torch.Tensor, k: int) -> torch.Tensor:
    """k x k mean with reflect padding; NCHW in, NCHW out (same size)."""
    p = k // 2
    return F.avg_pool2d(F.pad(x, (p, p, p, p), mode="reflect"), k, stride=1)


def local_variance_tensor(x: torch.Tensor, k: int) -> torch.Tensor:
    """Differentiable local variance of an NCHW tensor, clamped at zero."""
    _check_kernel(k, x.shape[-2], x.shape[-1])
    mu = box_mean(x, k)
    var = box_mean(x * x, k) - mu * mu
    return var.clamp_min(0.0)


def local_variance(img, k: int) -> VarianceMap:
    """Local variance map of an HxWxK stack (MifStack or array)."""
    t = _as_nchw(img)
    with torch.no_grad():
        v = local_variance_tensor(t, k)
    return VarianceMap(v[0].permute(1, 2, 0).cpu().numpy(), k)


def variance_loss(pred, target, k: int = 15) -> torch.Tensor:
    """Mean squared difference of local variance maps.

    Accepts NCHW tensors (differentiable w.r.t. ``pred``) or HxWxK arrays.
    """
    p, t = _as_nchw(pred), _as_nchw(target)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"pred {tuple(p.shape)} vs target {tuple(t.shape)}")
    t = t.to(p.dtype)
    diff = local_variance_tensor(p, k) - local_variance_tensor(t, k)
    return (diff * diff).mean()


def _finite(value) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(float(value))


def total_loss(base, var, cfg: LossConfig, batch_id=None):
    """``base + lambda_var * var``; raises :class:`NumericalError` on non-finite terms."""
    if not (_finite(base) and _finite(var)):
        raise NumericalError(f"non-finite loss term at batch {batch_id!r}: base={base}, var={var}")
    return base + cfg.lambda_var * var


def generator_adversarial_loss(scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss ``-log sigmoid(s)`` averaged over patch logits."""
    return F.binary_cross_entropy_with_logits(scores, torch.ones_like(scores))


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    real = F.binary_cross_entropy_with_logits(real_scores, torch.ones_like(real_scores))
    fake = F.binary_cross_entropy_with_logits(fake_scores, torch.zeros_like(fake_scores))
    return 0.5 * (real + fake)


def base_loss(kind: str, pred, target, discriminator_scores=None, lambda_l1: float = 100.0):
    """Architecture-specific objective.

    ``adversarial_l1``: GAN generator loss on patch logits + ``lambda_l1`` * MAE.
    ``l1_regression``: MAE.  ``diffusion_noise``: MSE between predicted and true noise.
    """
    pred, target = _as_nchw(pred), _as_nchw(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    target = target.to(pred.dtype)
    if kind == "adversarial_l1":
        if discriminator_scores is None:
            raise ConfigurationError("adversarial_l1 requires discriminator scores")
        return generator_adversarial_loss(discriminator_scores) + lambda_l1 * F.l1_loss(pred, target)
    if discriminator_scores is not None:
        raise ConfigurationError(f"discriminator scores given for non-adversarial loss {kind!r}")
    if kind == "l1_regression":
        return F.l1_loss(pred, target)
    if kind == "diffusion_noise":
        return F.mse_loss(pred, target)
    raise ConfigurationError(f"unknown base loss {kind!r}")
