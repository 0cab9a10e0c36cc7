"""Translation architectures: U-Net / ResNet generators, PatchGAN, conditional DDPM."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..core import ImagePatch, MifStack, NORM_RANGE
from ..errors import ConfigurationError, ShapeMismatchError
from .diffusion import (
    ConditionalDenoiser,
    DiffusionSchedule,
    ddpm_sample,
    ddpm_train_step,
    predict_x0,
    q_sample,
)
from .networks import PatchDiscriminator, ResnetGenerator, UNet, init_weights

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    arch: str = "unet"
    in_channels: int = 4
    out_channels: int = 3
    base_width: int = 32
    depth: int = 4
    n_blocks: int = 6

    def __post_init__(self):
        if self.arch not in ("unet", "resnet"):
            raise ConfigurationError(f"unknown generator arch {self.arch!r}")
        if self.in_channels not in (3, 4):
            raise ConfigurationError(f"in_channels must be 3 or 4, got {self.in_channels}")
        if self.out_channels < 1:
            raise ConfigurationError("out_channels must be >= 1")

    @property
    def size_multiple(self) -> int:
        return 2 ** self.depth if self.arch == "unet" else 4


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int
    base_width: int = 64
    n_layers: int = 3

    @property
    def patch_field(self) -> int:
        rf = 7
        for _ in range(self.n_layers):
            rf = (rf - 1) * 2 + 4
        return rf


def build_generator(spec: GeneratorSpec) -> torch.nn.Module:
    if spec.arch == "unet":
        net = UNet(spec.in_channels, spec.out_channels, spec.base_width, spec.depth)
    else:
        net = ResnetGenerator(spec.in_channels, spec.out_channels, spec.base_width, spec.n_blocks)
    net.apply(init_weights)
    net.spec = spec
    return net


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    net = PatchDiscriminator(spec.in_channels, spec.base_width, spec.n_layers)
    net.apply(init_weights)
    net.spec = spec
    return net


def build_denoiser(cond_channels: int, out_channels: int, base_width=32, depth=4) -> ConditionalDenoiser:
    if cond_channels not in (3, 4):
        raise ConfigurationError(f"conditioning channels must be 3 or 4, got {cond_channels}")
    net = ConditionalDenoiser(cond_channels, out_channels, base_width, depth)
    net.spec = GeneratorSpec("unet", cond_channels, out_channels, base_width, depth)
    return net


def _to_tensor(x: ImagePatch | MifStack) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.data.transpose(2, 0, 1)))[None].float()


def generator_forward(generator: torch.nn.Module, x, channel_names=None):
    """Run a generator on an NCHW tensor or an HxWxC :class:`ImagePatch`.

    Returns the same kind it was given (a :class:`MifStack` for patches).
    """
    spec: GeneratorSpec = generator.spec
    as_patch = isinstance(x, ImagePatch)
    t = _to_tensor(x) if as_patch else x
    if t.shape[1] != spec.in_channels:
        raise ConfigurationError(f"generator expects {spec.in_channels} channels, got {t.shape[1]}")
    m = spec.size_multiple
    if t.shape[-1] % m or t.shape[-2] % m:
        raise ShapeMismatchError(f"spatial size must be divisible by {m}")
    out = generator(t)
    if not as_patch:
        return out
    arr = out[0].detach().permute(1, 2, 0).cpu().numpy()
    names = channel_names or tuple(f"ch{i}" for i in range(arr.shape[2]))
    return MifStack(arr, tuple(names), 0, NORM_RANGE)


def discriminator_forward(discriminator: torch.nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] != y.shape[-2:] or x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(f"misaligned inputs {tuple(x.shape)} and {tuple(y.shape)}")
    expected = discriminator.spec.in_channels
    if x.shape[1] + y.shape[1] != expected:
        raise ConfigurationError(f"discriminator expects {expected} channels, got {x.shape[1] + y.shape[1]}")
    return discriminator(x, y)


def save_checkpoint(path, *, config: dict, generator_spec: GeneratorSpec, generator_state: dict,
                    discriminator_state: dict | None = None, schedule: DiffusionSchedule | None = None,
                    extra: dict | None = None) -> None:
    """Self-describing checkpoint: weights, architecture metadata and the full config."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dict(config),
        "generator_spec": asdict(generator_spec),
        "generator_state": generator_state,
        "discriminator_state": discriminator_state,
        "schedule": schedule.to_dict() if schedule is not None else None,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Rebuild the trained network from a checkpoint.

    Returns ``(model, payload)`` where ``model`` is a generator, or a
    denoiser when the checkpoint carries a diffusion schedule.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    spec = GeneratorSpec(**payload["generator_spec"])
    if payload.get("schedule"):
        model = build_denoiser(spec.in_channels, spec.out_channels, spec.base_width, spec.depth)
        payload["schedule_obj"] = DiffusionSchedule(**payload["schedule"])
    else:
        model = build_generator(spec)
    model.load_state_dict(payload["generator_state"])
    model.eval()
    return model, payload


__all__ = [
    "GeneratorSpec", "DiscriminatorSpec", "DiffusionSchedule", "ConditionalDenoiser",
    "UNet", "ResnetGenerator", "PatchDiscriminator",
    "build_generator", "build_discriminator", "build_denoiser",
    "generator_forward", "discriminator_forward",
    "q_sample", "ddpm_train_step", "ddpm_sample", "predict_x0",
    "save_checkpoint", "load_checkpoint",
]
