"""Unpaired alternating training of the two generators and two critics.

One step runs ``critic_steps`` Wasserstein critic updates (weights clipped to
``[-clip, clip]`` afterwards) followed by one generator update on the
combined adversarial + cycle (+ perceptual) objective. All randomness flows
from ``TrainConfig.seed``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .losses import (
    DivergenceError,
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    critic_loss_d,
    critic_loss_g,
    cycle_loss,
    total_generator_loss,
    weighted_total,
)
from .nets import CriticSpec, GeneratorSpec, build_critic, build_generator
from .preprocess import (
    NormalizationSpec,
    denormalize_ct,
    normalize_mri,
    resample_slice,
    to_one_channel,
    to_three_channel,
)
from .volume import Volume

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ModelConfig",
    "TrainConfig",
    "TrainState",
    "UnpairedSampler",
    "generator_objective",
    "new_train_state",
    "train",
    "train_step",
    "translate_volume",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DCT1"
CHECKPOINT_VERSION = 1
NETWORKS = ("g_mri2ct", "g_ct2mri", "d_ct", "d_mri")


@dataclass(frozen=True)
class ModelConfig:
    use_vgg: bool = True
    use_cc: bool = True
    weights: LossWeights = LossWeights()
    base_width: int = 64
    levels: int = 3
    critic_widths: tuple[int, ...] = (64, 128, 256, 512)
    critic_strides: tuple[int, ...] = (2, 2, 2, 1)
    feature_provider: str = "seeded-random"
    feature_layer: str = "relu2_2"
    feature_seed: int = 0
    weights_path: str | None = None

    @property
    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(base_width=self.base_width, levels=self.levels, use_cc=self.use_cc)

    @property
    def critic_spec(self) -> CriticSpec:
        return CriticSpec(widths=tuple(self.critic_widths), strides=tuple(self.critic_strides))

    def feature_extractor(self, dtype=torch.float32) -> FeatureExtractor | None:
        if not self.use_vgg:
            return None
        return FeatureExtractor(self.feature_provider, self.feature_layer, self.feature_seed,
                                self.weights_path, dtype=dtype)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    steps: int = 2000
    batch_size: int = 4
    critic_steps: int = 2
    clip: float = 0.01
    learning_rate: float = 5e-5
    seed: int = 0
    resolution: tuple[int, int] = (64, 64)
    checkpoint_every: int = 500
    # 0 keeps the rate constant; otherwise it decays linearly from this step to zero
    lr_decay_start: int = 0

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.critic_steps, self.checkpoint_every) < 1:
            raise ValueError("steps, batch_size, critic_steps and checkpoint_every must be >= 1")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.lr_decay_start < self.steps:
            raise ValueError("lr_decay_start must be in [0, steps)")
        factor = 2**self.model.levels
        if any(r % factor for r in self.resolution):
            raise ValueError(f"resolution {self.resolution} must be divisible by {factor}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def learning_rate_at(self, step: int) -> float:
        """Rate used for the update that starts at 0-based ``step``."""
        start = self.lr_decay_start
        if start == 0 or step < start:
            return self.learning_rate
        return self.learning_rate * (self.steps - step) / (self.steps - start)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        m = dict(d["model"])
        m["weights"] = LossWeights(**m["weights"])
        m["critic_widths"] = tuple(m["critic_widths"])
        m["critic_strides"] = tuple(m["critic_strides"])
        rest = {k: v for k, v in d.items() if k != "model"}
        rest["resolution"] = tuple(rest["resolution"])
        return cls(model=ModelConfig(**m), **rest)


class UnpairedSampler:
    """Independent seeded shuffles of the two pools, reshuffled when exhausted."""

    def __init__(self, n_mri: int, n_ct: int, batch_size: int, seed: int):
        if n_mri < 1 or n_ct < 1:
            raise ValueError("both slice pools must be non-empty")
        ss_mri, ss_ct = np.random.SeedSequence([seed, 100]).spawn(2)
        self._streams = [self._stream(n_mri, np.random.default_rng(ss_mri)),
                         self._stream(n_ct, np.random.default_rng(ss_ct))]
        self.batch_size = batch_size

    @staticmethod
    def _stream(n: int, rng: np.random.Generator) -> Iterable[int]:
        while True:
            yield from rng.permutation(n).tolist()

    def next(self) -> tuple[list[int], list[int]]:
        mri, ct = ([next(s) for _ in range(self.batch_size)] for s in self._streams)
        return mri, ct


@dataclass
class TrainState:
    g_mri2ct: torch.nn.Module
    g_ct2mri: torch.nn.Module
    d_ct: torch.nn.Module
    d_mri: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    extractor: FeatureExtractor | None
    step: int = 0
    history: list[LossBreakdown] = field(default_factory=list)

    def networks(self) -> dict[str, torch.nn.Module]:
        return {n: getattr(self, n) for n in NETWORKS}

    def critic_parameters(self) -> list[torch.nn.Parameter]:
        return [*self.d_ct.parameters(), *self.d_mri.parameters()]

    def generator_parameters(self) -> list[torch.nn.Parameter]:
        return [*self.g_mri2ct.parameters(), *self.g_ct2mri.parameters()]


def _clip_(params, clip: float) -> None:
    with torch.no_grad():
        for p in params:
            p.clamp_(-clip, clip)


def new_train_state(cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    seeds = np.random.SeedSequence([cfg.seed, 0]).generate_state(4)
    m = cfg.model
    state = TrainState(
        g_mri2ct=build_generator(m.generator_spec, int(seeds[0]), dtype),
        g_ct2mri=build_generator(m.generator_spec, int(seeds[1]), dtype),
        d_ct=build_critic(m.critic_spec, int(seeds[2]), dtype),
        d_mri=build_critic(m.critic_spec, int(seeds[3]), dtype),
        opt_g=None,  # type: ignore[arg-type]
        opt_d=None,  # type: ignore[arg-type]
        extractor=m.feature_extractor(dtype),
    )
    _clip_(state.critic_parameters(), cfg.clip)
    state.opt_g = torch.optim.RMSprop(state.generator_parameters(), lr=cfg.learning_rate)
    state.opt_d = torch.optim.RMSprop(state.critic_parameters(), lr=cfg.learning_rate)
    return state


def generator_objective(state: TrainState, mri: torch.Tensor, ct: torch.Tensor,
                        weights: LossWeights) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Differentiable generator loss summed over both cycle directions.

    The perceptual term compares each original with its cycle
    reconstruction, the only pairing available without paired data.
    """
    fake_ct = state.g_mri2ct(mri)
    fake_mri = state.g_ct2mri(ct)
    rec_mri = state.g_ct2mri(fake_ct)
    rec_ct = state.g_mri2ct(fake_mri)

    adv_g = critic_loss_g(state.d_ct(fake_ct)) + critic_loss_g(state.d_mri(fake_mri))
    cyc = cycle_loss(mri, rec_mri) + cycle_loss(ct, rec_ct)
    if state.extractor is not None:
        f = state.extractor
        with torch.no_grad():
            target = f(torch.cat([mri, ct]))
        perc = torch.nn.functional.mse_loss(f(torch.cat([rec_mri, rec_ct])), target, reduction="none")
        n = mri.shape[0]
        perc = perc[:n].mean() + perc[n:].mean()
    else:
        perc = torch.zeros((), dtype=mri.dtype)
    total = weighted_total(adv_g, cyc, perc, weights)
    return total, {"adv_g": adv_g, "cycle": cyc, "perceptual": perc}


def _critic_step(state: TrainState, mri: torch.Tensor, ct: torch.Tensor, clip: float) -> float:
    with torch.no_grad():
        fake_ct = state.g_mri2ct(mri)
        fake_mri = state.g_ct2mri(ct)
    loss = (critic_loss_d(state.d_ct(ct), state.d_ct(fake_ct))
            + critic_loss_d(state.d_mri(mri), state.d_mri(fake_mri)))
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    _clip_(state.critic_parameters(), clip)
    return loss.item()


def train_step(state: TrainState, batch_mri, batch_ct, cfg: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """One alternating update; mutates and returns ``state``."""
    dtype = next(state.g_mri2ct.parameters()).dtype
    mri = torch.as_tensor(np.asarray(batch_mri)).to(dtype)
    ct = torch.as_tensor(np.asarray(batch_ct)).to(dtype)

    lr = cfg.learning_rate_at(state.step)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr

    critics = state.critic_parameters()
    for p in critics:
        p.requires_grad_(True)
    adv_d = 0.0
    for _ in range(cfg.critic_steps):
        adv_d = _critic_step(state, mri, ct, cfg.clip)

    for p in critics:
        p.requires_grad_(False)
    total, parts = generator_objective(state, mri, ct, cfg.model.weights)
    breakdown = total_generator_loss(parts["adv_g"].item(), adv_d, parts["cycle"].item(),
                                     parts["perceptual"].item(), cfg.model.weights, state.step)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    for p in critics:
        p.requires_grad_(True)

    if not all(torch.isfinite(p).all() for p in state.generator_parameters()):
        raise DivergenceError("non-finite generator parameters after update", state.step)
    state.step += 1
    state.history.append(breakdown)
    return state, breakdown


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    """Serialized training state plus everything needed to translate volumes."""

    config: TrainConfig
    normalization: NormalizationSpec
    step: int
    history: list[LossBreakdown]
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_state(cls, state: TrainState, cfg: TrainConfig, norm: NormalizationSpec) -> "Checkpoint":
        tensors: dict[str, np.ndarray] = {}
        for name, net in state.networks().items():
            for pname, p in net.state_dict().items():
                tensors[f"{name}.{pname}"] = p.detach().cpu().numpy().astype(np.float32)
        for oname, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
            for idx, st in opt.state_dict()["state"].items():
                for key, val in st.items():
                    tensors[f"{oname}.{idx}.{key}"] = np.asarray(val, dtype=np.float32).reshape(np.shape(val))
        return cls(cfg, norm, state.step, list(state.history), tensors)

    def to_bytes(self) -> bytes:
        names = list(self.tensors)
        header = {
            "version": self.version,
            "config": self.config.to_dict(),
            "normalization": dataclasses.asdict(self.normalization),
            "step": self.step,
            "history": [dataclasses.asdict(h) for h in self.history],
            "tensors": [{"name": n, "shape": list(self.tensors[n].shape), "dtype": "float32"} for n in names],
        }
        text = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(self.tensors[n], dtype="<f4").tobytes() for n in names)
        return CHECKPOINT_MAGIC + struct.pack("<Q", len(text)) + text + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic bytes)")
        (hlen,) = struct.unpack("<Q", data[4:12])
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {header.get('version')} is not supported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        offset = 12 + hlen
        tensors = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            buf = data[offset:offset + 4 * n]
            if len(buf) != 4 * n:
                raise CheckpointError(f"truncated payload for tensor {t['name']}")
            tensors[t["name"]] = np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).astype(np.float32)
            offset += 4 * n
        if offset != len(data):
            raise CheckpointError(f"{len(data) - offset} trailing bytes after payload")
        norm = header["normalization"]
        return cls(
            config=TrainConfig.from_dict(header["config"]),
            normalization=NormalizationSpec(tuple(norm["ct_clip"]), tuple(norm["mri_percentiles"])),
            step=header["step"],
            history=[LossBreakdown(**h) for h in header["history"]],
            tensors=tensors,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def network(self, name: str) -> torch.nn.Module:
        """Rebuild one of the four networks with the stored parameters."""
        if name not in NETWORKS:
            raise KeyError(name)
        m = self.config.model
        net = (build_generator(m.generator_spec, 0) if name.startswith("g_")
               else build_critic(m.critic_spec, 0))
        prefix = name + "."
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                 if k.startswith(prefix)}
        net.load_state_dict(state)
        net.requires_grad_(False)
        return net


def _as_pool(slices) -> np.ndarray:
    arr = np.asarray(slices, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, C, H, W) slice pool, got shape {arr.shape}")
    if arr.shape[1] == 1:
        arr = np.repeat(arr, 3, axis=1)
    if arr.shape[1] != 3:
        raise ValueError(f"slices must have 1 or 3 channels, got {arr.shape[1]}")
    return arr


def train(cfg: TrainConfig, mri_slices, ct_slices, norm: NormalizationSpec = NormalizationSpec(),
          checkpoint_dir: str | Path | None = None,
          on_checkpoint: Callable[[Checkpoint, str], None] | None = None,
          log_every: int = 0) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Run ``cfg.steps`` steps over unpaired pools of normalized slices.

    A checkpoint is emitted every ``checkpoint_every`` steps and once more at
    the end (``floor(steps / checkpoint_every) + 1`` in total), either written
    to ``checkpoint_dir`` or handed to ``on_checkpoint``.
    """
    mri_pool, ct_pool = _as_pool(mri_slices), _as_pool(ct_slices)
    for name, pool in (("MRI", mri_pool), ("CT", ct_pool)):
        if tuple(pool.shape[-2:]) != tuple(cfg.resolution):
            raise ValueError(f"{name} slices are {pool.shape[-2:]}, config resolution is {cfg.resolution}")
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def emit(ck: Checkpoint, tag: str):
        if checkpoint_dir is not None:
            ck.save(checkpoint_dir / f"{tag}.dct")
        if on_checkpoint is not None:
            on_checkpoint(ck, tag)

    state = new_train_state(cfg)
    sampler = UnpairedSampler(len(mri_pool), len(ct_pool), cfg.batch_size, cfg.seed)
    for _ in range(cfg.steps):
        i_mri, i_ct = sampler.next()
        _, b = train_step(state, mri_pool[i_mri], ct_pool[i_ct], cfg)
        if log_every and state.step % log_every == 0:
            log.info("step %d: adv_g=%.4f adv_d=%.4f cycle=%.4f perceptual=%.4f total=%.4f",
                     state.step, b.adv_g, b.adv_d, b.cycle, b.perceptual, b.total_g)
        if state.step % cfg.checkpoint_every == 0:
            emit(Checkpoint.from_state(state, cfg, norm), f"step{state.step:06d}")
    final = Checkpoint.from_state(state, cfg, norm)
    emit(final, "final")
    return final, list(state.history)


@torch.no_grad()
def translate_volume(ck: Checkpoint, mri: Volume, batch_size: int = 16,
                     generator: torch.nn.Module | None = None) -> Volume:
    """MRI volume -> synthetic CT volume in HU, slice by slice."""
    if ck.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ck.version}")
    if mri.modality != "MRI":
        raise ValueError(f"expected an MRI volume, got {mri.modality}")
    g = generator if generator is not None else ck.network("g_mri2ct")
    norm = ck.normalization
    H, W = mri.shape[1:]
    res = tuple(ck.config.resolution)
    slices = [resample_slice(to_three_channel(s), res) for s in normalize_mri(mri, norm)]
    out = []
    for i in range(0, len(slices), batch_size):
        x = torch.from_numpy(np.stack(slices[i:i + batch_size]))
        y = g(x).numpy()
        for img in y:
            one = resample_slice(to_one_channel(img), (H, W))
            out.append(np.clip(denormalize_ct(one, norm), *norm.ct_clip))
    return Volume(np.stack(out), "CT", mri.spacing_mm, mri.patient_id)
