"""Generator and discriminator networks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    raise NotImplementedError(f"normalization layer [{kind}] is not found")


def init_weights(m: nn.Module) -> None:
    # N(0, 0.02) init as in the pix2pix recipe
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)) and m.weight is not None:
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, norm="batch", time_dim=None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(norm, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(norm, out_ch)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None

    def forward(self, x, temb=None):
        h = F.relu(self.norm1(self.conv1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        return F.relu(self.norm2(self.conv2(h)))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :].to(t.device)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class UNet(nn.Module):
    """Encoder-decoder with skip connections.

    ``depth`` max-pool downsamplings; widths double per level from
    ``base_width``.  When ``time_dim`` is set every block receives an additive
    timestep embedding (diffusion denoiser); otherwise the output passes
    through ``tanh``.
    """

    def __init__(self, in_channels, out_channels, base_width=32, depth=4, norm="batch",
                 time_dim=None, final_tanh=True):
        super().__init__()
        self.depth = depth
        self.time_dim = time_dim
        self.final_tanh = final_tanh
        if time_dim:
            self.time_mlp = nn.Sequential(
                nn.Linear(time_dim, time_dim * 2), nn.SiLU(), nn.Linear(time_dim * 2, time_dim)
            )
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        ch = in_channels
        for w in widths[:-1]:
            self.encoders.append(ConvBlock(ch, w, norm, time_dim))
            ch = w
        self.bottleneck = ConvBlock(ch, widths[-1], norm, time_dim)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        ch = widths[-1]
        for w in reversed(widths[:-1]):
            self.upsamplers.append(nn.ConvTranspose2d(ch, w, 2, stride=2))
            self.decoders.append(ConvBlock(2 * w, w, norm, time_dim))
            ch = w
        self.head = nn.Conv2d(ch, out_channels, 1)

    def forward(self, x, t=None):
        temb = None
        if self.time_dim:
            if t is None:
                raise ValueError("time-conditioned UNet needs timesteps")
            temb = self.time_mlp(timestep_embedding(t, self.time_dim))
        skips = []
        for enc in self.encoders:
            x = enc(x, temb)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x, temb)
        for up, dec in zip(self.upsamplers, self.decoders):
            x = up(x)
            x = dec(torch.cat([x, skips.pop()], dim=1), temb)
        x = self.head(x)
        return torch.tanh(x) if self.final_tanh else x


class ResnetBlock(nn.Module):
    def __init__(self, ch, norm="batch"):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """c7s1 stem, two stride-2 downsamplings, residual trunk, mirrored upsampling, tanh."""

    def __init__(self, in_channels, out_channels, base_width=32, n_blocks=6, norm="batch"):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, base_width, 7),
                  _norm(norm, base_width), nn.ReLU(True)]
        ch = base_width
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(norm, ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResnetBlock(ch, norm) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                       _norm(norm, ch // 2), nn.ReLU(True)]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN: three stride-2 4x4 convs then two stride-1 4x4 convs.

    With ``n_layers=3`` each output logit sees a 70x70 input window and a
    256x256 input yields a 30x30 score raster.
    """

    def __init__(self, in_channels, base_width=64, n_layers=3, norm="batch"):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base_width, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        ch = base_width
        for i in range(1, n_layers):
            nxt = base_width * min(2 ** i, 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), _norm(norm, nxt), nn.LeakyReLU(0.2, True)]
            ch = nxt
        nxt = base_width * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(ch, nxt, 4, stride=1, padding=1), _norm(norm, nxt), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(nxt, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x, y):
        return self.model(torch.cat([x, y], dim=1))
