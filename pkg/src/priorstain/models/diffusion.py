"""Conditional DDPM: linear schedule, forward noising, ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import NumericalError, ParameterError
from .networks import UNet


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 2:
            raise ParameterError("diffusion needs at least two steps")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ParameterError("need 0 < beta_start < beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    def alpha_bar(self, t):
        """alpha_bar at 1-based step ``t``; ``alpha_bar(0) == 1``."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"timestep outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


class ConditionalDenoiser(torch.nn.Module):
    """UNet predicting noise from ``[y_t ; x_cond]`` with timestep embeddings at every level."""

    def __init__(self, cond_channels, out_channels, base_width=32, depth=4, time_dim=64):
        super().__init__()
        self.cond_channels = cond_channels
        self.out_channels = out_channels
        self.net = UNet(out_channels + cond_channels, out_channels, base_width, depth,
                        norm="group", time_dim=time_dim, final_tanh=False)

    def forward(self, y_t, t, x_cond):
        return self.net(torch.cat([y_t, x_cond], dim=1), t)


def _t_tensor(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(batch)
    return t


def q_sample(schedule: DiffusionSchedule, y0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """``y_t = sqrt(ab_t) y0 + sqrt(1 - ab_t) noise`` for per-sample steps ``t``."""
    t = _t_tensor(t, y0.shape[0])
    schedule.check_t(t.cpu().numpy())
    ab = torch.as_tensor(schedule.alpha_bar(t.cpu().numpy()), dtype=y0.dtype, device=y0.device)
    ab = ab.view(-1, *([1] * (y0.ndim - 1)))
    return ab.sqrt() * y0 + (1.0 - ab).sqrt() * noise


def ddpm_train_step(schedule, denoiser, x_cond, y0, t, noise, return_noisy=False):
    """Noise ``y0`` to step ``t`` and return the denoiser's noise prediction."""
    y_t = q_sample(schedule, y0, t, noise)
    eps = denoiser(y_t, _t_tensor(t, y0.shape[0]).to(y0.device), x_cond)
    return (eps, y_t) if return_noisy else eps


def predict_x0(schedule, y_t, t, eps, clip=True):
    """Denoised estimate ``(y_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)``."""
    t = _t_tensor(t, y_t.shape[0])
    ab = torch.as_tensor(schedule.alpha_bar(t.cpu().numpy()), dtype=y_t.dtype, device=y_t.device)
    ab = ab.view(-1, *([1] * (y_t.ndim - 1)))
    x0 = (y_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()
    return x0.clamp(-1.0, 1.0) if clip else x0


@torch.no_grad()
def ddpm_sample(schedule, denoiser, x_cond, seed: int = 0, out_channels=None, clip=True):
    """Ancestral sampling over all T steps with ``sigma_t^2 = beta_t``."""
    k = out_channels if out_channels is not None else denoiser.out_channels
    n, _, h, w = x_cond.shape
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    dtype = x_cond.dtype
    y = torch.randn((n, k, h, w), generator=gen, dtype=dtype).to(x_cond.device)
    for t in range(schedule.T, 0, -1):
        beta = float(schedule.betas[t - 1])
        alpha = float(schedule.alphas[t - 1])
        ab = float(schedule.alpha_bars[t - 1])
        eps = denoiser(y, torch.full((n,), t, dtype=torch.long, device=x_cond.device), x_cond)
        y = (y - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1:
            z = torch.randn((n, k, h, w), generator=gen, dtype=dtype).to(x_cond.device)
            y = y + np.sqrt(beta) * z
        if not torch.isfinite(y).all():
            raise NumericalError(f"non-finite sample at diffusion step {t}")
    return y.clamp(-1.0, 1.0) if clip else y
