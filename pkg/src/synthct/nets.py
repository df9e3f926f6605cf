"""Generators, patch critics and coordinate-channel augmentation.

Both generators are U-Net style encoder-decoders ending in ``tanh``; with
``use_cc`` the input gets two extra planes holding normalized x and y
positions before the first convolution. Critics are patch critics that emit
an unsquashed score map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "CriticSpec",
    "GeneratorSpec",
    "PatchCritic",
    "UNetGenerator",
    "append_coordinate_channels",
    "build_critic",
    "build_generator",
    "coordinate_channels",
    "critic_output_size",
    "discriminator_forward",
    "generator_forward",
    "init_params",
    "param_count",
]

INIT_SCALE = 0.02


def _axis_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1, dtype=np.float32)
    return np.linspace(-1.0, 1.0, n, dtype=np.float32)


def coordinate_channels(height: int, width: int) -> np.ndarray:
    """``(2, H, W)`` planes: x varies along columns, y along rows, both in [-1, 1]."""
    if height < 1 or width < 1:
        raise ValueError(f"invalid size {height}x{width}")
    xs = np.broadcast_to(_axis_coords(width)[None, :], (height, width))
    ys = np.broadcast_to(_axis_coords(height)[:, None], (height, width))
    return np.stack([xs, ys])


def append_coordinate_channels(t):
    """Concatenate x/y coordinate planes after the image channels.

    Accepts a numpy ``(C, H, W)`` image or a torch ``(N, C, H, W)`` batch and
    returns the same kind of object with two more channels.
    """
    if isinstance(t, torch.Tensor):
        n, _, h, w = t.shape
        coords = torch.from_numpy(coordinate_channels(h, w)).to(t.dtype)
        return torch.cat([t, coords.expand(n, 2, h, w)], dim=1)
    t = np.asarray(t)
    coords = coordinate_channels(t.shape[1], t.shape[2]).astype(t.dtype)
    return np.concatenate([t, coords], axis=0)


@dataclass(frozen=True)
class GeneratorSpec:
    image_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    levels: int = 3
    use_cc: bool = False

    @property
    def in_channels(self) -> int:
        return self.image_channels + (2 if self.use_cc else 0)


@dataclass(frozen=True)
class CriticSpec:
    in_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512)
    strides: tuple[int, ...] = (2, 2, 2, 1)

    def __post_init__(self):
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and of equal length")


class UNetGenerator(nn.Module):
    """4x4 stride-2 convolutions down, transposed convolutions up, skips by concatenation.

    Layers followed by instance normalization carry no bias (it would be
    normalized away).
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w, L = spec.base_width, spec.levels
        if L < 1:
            raise ValueError("levels must be >= 1")
        widths = [w * 2**i for i in range(L)]
        self.down = nn.ModuleList()
        c = spec.in_channels
        for i, o in enumerate(widths):
            self.down.append(nn.Conv2d(c, o, 4, 2, 1, bias=(i == 0)))
            c = o
        self.up = nn.ModuleList()
        for i in reversed(range(L)):
            last = i == 0
            o = spec.out_channels if last else widths[i - 1]
            c_in = widths[i] if i == L - 1 else 2 * widths[i]
            self.up.append(nn.ConvTranspose2d(c_in, o, 4, 2, 1, bias=last))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2**self.spec.levels
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} is not divisible by {factor} "
                f"({self.spec.levels} stride-2 levels)"
            )
        if x.shape[1] != self.spec.image_channels:
            raise ValueError(f"expected {self.spec.image_channels} image channels, got {x.shape[1]}")
        if self.spec.use_cc:
            x = append_coordinate_channels(x)
        skips = []
        for i, conv in enumerate(self.down):
            x = conv(x)
            if i > 0:
                x = F.instance_norm(x)
            x = F.leaky_relu(x, 0.2)
            skips.append(x)
        for j, conv in enumerate(self.up):
            if j > 0:
                x = torch.cat([x, skips[-1 - j]], dim=1)
            x = conv(x)
            if j < len(self.up) - 1:
                x = F.relu(F.instance_norm(x))
        return torch.tanh(x)


class PatchCritic(nn.Module):
    def __init__(self, spec: CriticSpec = CriticSpec()):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        c = spec.in_channels
        for i, (o, s) in enumerate(zip(spec.widths, spec.strides)):
            layers.append(nn.Conv2d(c, o, 4, s, 1, bias=(i == 0)))
            if i > 0:
                layers.append(nn.InstanceNorm2d(o))
            layers.append(nn.LeakyReLU(0.2))
            c = o
        layers.append(nn.Conv2d(c, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = critic_output_size(self.spec, x.shape[-2:])
        if h < 1 or w < 1 or min(x.shape[-2:]) < 16:
            raise ValueError(f"input {tuple(x.shape[-2:])} is too small for the critic stack {self.spec.strides}")
        return self.net(x)


def critic_output_size(spec: CriticSpec, hw) -> tuple[int, int]:
    """Score-map size from layer arithmetic (4x4 kernels, padding 1)."""
    out = []
    for n in hw:
        n = int(n)
        for s in (*spec.strides, 1):
            n = (n + 2 - 4) // s + 1
        out.append(n)
    return out[0], out[1]


def init_params(net: nn.Module, seed: int, scale: float = INIT_SCALE) -> nn.Module:
    """Zero-mean normal weights with std ``scale``, zero biases, in place."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return net


def build_generator(spec: GeneratorSpec, seed: int, dtype=torch.float32) -> UNetGenerator:
    return init_params(UNetGenerator(spec).to(dtype), seed)


def build_critic(spec: CriticSpec = CriticSpec(), seed: int = 0, dtype=torch.float32) -> PatchCritic:
    return init_params(PatchCritic(spec).to(dtype), seed)


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _as_batch(t) -> tuple[torch.Tensor, bool]:
    if isinstance(t, torch.Tensor):
        return (t, False) if t.dim() == 4 else (t[None], True)
    arr = torch.from_numpy(np.ascontiguousarray(t, dtype=np.float32))
    return (arr[None], True) if arr.dim() == 3 else (arr, False)


@torch.no_grad()
def generator_forward(net: UNetGenerator, t, use_cc: bool | None = None):
    """Run a generator on one (C, H, W) image or a batch; numpy in, numpy out."""
    if use_cc is not None and use_cc != net.spec.use_cc:
        raise ValueError(f"generator was built with use_cc={net.spec.use_cc}")
    x, single = _as_batch(t)
    y = net(x.to(next(net.parameters()).dtype))
    y = y[0] if single else y
    return y.numpy() if not isinstance(t, torch.Tensor) else y


@torch.no_grad()
def discriminator_forward(net: PatchCritic, t):
    x, single = _as_batch(t)
    y = net(x.to(next(net.parameters()).dtype))
    y = y[0] if single else y
    return y.numpy() if not isinstance(t, torch.Tensor) else y
