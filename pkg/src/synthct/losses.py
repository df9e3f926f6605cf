"""Training objectives: critic losses, cycle reconstruction and perceptual feature matching."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "DivergenceError",
    "FeatureExtractor",
    "LossBreakdown",
    "LossWeights",
    "VGG16_LAYERS",
    "critic_loss_d",
    "critic_loss_g",
    "cycle_loss",
    "perceptual_loss",
    "total_generator_loss",
    "weighted_total",
]

# VGG-16 "features" topology; "M" is a 2x2 max pool
_VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
# ImageNet statistics applied after mapping [-1, 1] -> [0, 1]
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _vgg16_layer_names() -> list[str]:
    names, block, conv = [], 1, 1
    for v in _VGG16_CFG:
        if v == "M":
            names.append(f"pool{block}")
            block, conv = block + 1, 1
        else:
            names += [f"conv{block}_{conv}", f"relu{block}_{conv}"]
            conv += 1
    return names


VGG16_LAYERS = tuple(_vgg16_layer_names())


class DivergenceError(FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_perceptual: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_perceptual"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    adv_g: float
    adv_d: float
    cycle: float
    perceptual: float
    total_g: float


def critic_loss_d(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    """Wasserstein critic objective (minimized): mean fake score minus mean real score."""
    return scores_fake.mean() - scores_real.mean()


def critic_loss_g(scores_fake: torch.Tensor) -> torch.Tensor:
    return -scores_fake.mean()


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean()


class FeatureExtractor(nn.Module):
    """Frozen VGG-16 convolution stack truncated at ``layer``.

    ``provider`` is ``"pretrained"`` (weights loaded from ``weights_path``),
    ``"seeded-random"`` (Kaiming-normal weights drawn from ``seed``) or
    ``"identity"``, which returns its input untouched and exists for tests.
    """

    def __init__(self, provider: str = "seeded-random", layer: str = "relu2_2", seed: int = 0,
                 weights_path: str | Path | None = None, dtype=torch.float32):
        super().__init__()
        if provider not in ("pretrained", "seeded-random", "identity"):
            raise ValueError(f"unknown feature provider {provider!r}")
        self.provider, self.layer, self.seed = provider, layer, seed
        if provider == "identity":
            self.features = nn.Identity()
        else:
            if layer not in VGG16_LAYERS:
                raise ValueError(f"unknown VGG-16 layer {layer!r}")
            self.features = _vgg16_features(VGG16_LAYERS.index(layer) + 1)
            if provider == "pretrained":
                if not weights_path:
                    raise ValueError("perceptual.weights_path is required for the pretrained provider")
                self._load(Path(weights_path))
            else:
                gen = torch.Generator().manual_seed(int(seed))
                with torch.no_grad():
                    for m in self.features:
                        if isinstance(m, nn.Conv2d):
                            fan_in = m.in_channels * 9
                            m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                            m.bias.zero_()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    def _load(self, path: Path) -> None:
        if not path.exists():
            raise FileNotFoundError(f"VGG-16 weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        # accept a full torchvision vgg16 state dict or a bare features dict
        state = {k.removeprefix("features."): v for k, v in state.items()
                 if not k.startswith("classifier.")}
        own = self.features.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise ValueError(f"{path}: missing VGG-16 parameters {missing[:4]}")
        self.features.load_state_dict({k: state[k] for k in own})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.provider == "identity":
            return x
        if x.shape[1] != 3:
            raise ValueError(f"feature extractor needs 3-channel input, got {x.shape[1]}")
        x = ((x + 1) / 2 - self.mean) / self.std
        return self.features(x)


def _vgg16_features(n_layers: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    c = 3
    for v in _VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(c, v, 3, padding=1), nn.ReLU()]
            c = v
    return nn.Sequential(*layers[:n_layers])


def perceptual_loss(f: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared error between ``f(a)`` and ``f(b)``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = f(torch.cat([a, b])).chunk(2)
    return F.mse_loss(fa, fb)


def weighted_total(adv_g, cycle, perceptual, w: LossWeights):
    """``adv_g + lambda_cycle * cycle + lambda_perceptual * perceptual``; works on tensors or floats."""
    return adv_g + w.lambda_cycle * cycle + w.lambda_perceptual * perceptual


def total_generator_loss(adv_g: float, adv_d: float, cycle: float, perceptual: float,
                         w: LossWeights, step: int | None = None) -> LossBreakdown:
    parts = {"adv_g": adv_g, "adv_d": adv_d, "cycle": cycle, "perceptual": perceptual}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss components {bad}: {parts}", step)
    total = float(weighted_total(adv_g, cycle, perceptual, w))
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite total generator loss {total}", step)
    return LossBreakdown(float(adv_g), float(adv_d), float(cycle), float(perceptual), total)
