"""Adversarial training of the two generators and two discriminators.

Each step updates both discriminators on real images vs. detached,
mask-applied translations, then both generators on the weighted
generator objective. Naming follows the translation
target: ``g_real`` maps synthetic to real, ``g_syn`` maps real to
synthetic, ``d_real``/``d_syn`` judge the real/synthetic domain.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from . import visual
from .dataio import (
    DatasetIndex,
    DomainTag,
    EpochSampler,
    UnpairedBatch,
    center_crop,
    load_sample,
    make_unpaired_batch,
    masks_to_tensor,
    resize_sample,
    samples_to_tensor,
)
from .discriminators import (
    DiscriminatorConfig,
    DiscriminatorKind,
    FeatureBackbone,
    build_backbone,
    build_discriminator,
)
from .errors import DecodeError, IncompatibleCheckpoint, InsufficientSamples, InvalidConfig, NonFiniteLoss
from .generators import Direction, Generator, GeneratorConfig, build_generator
from .losses import (
    LOSS_FIELDS,
    LossRecord,
    LossWeights,
    cycle_loss,
    identity_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    total_generator_objective,
)
from .maskproc import apply_mask_tensor
from .metrics import RandomConvEmbedding, evaluate_sets

SCHEMA_VERSION = 1
ADAM_BETAS = (0.5, 0.999)
DEFAULT_LR = 0.00005
BASELINE_LR = 0.0002


@dataclass(frozen=True)
class Preset:
    n_residual_blocks: int
    discriminator: DiscriminatorKind
    learning_rate: float
    label: str


PRESETS = {
    "pixCycleGAN4": Preset(4, DiscriminatorKind.PIXEL, DEFAULT_LR, "pixCycleGAN4"),
    "pixCycleGAN6": Preset(6, DiscriminatorKind.PIXEL, DEFAULT_LR, "pixCycleGAN6"),
    "geo_baseline": Preset(9, DiscriminatorKind.PATCH, BASELINE_LR, "GeoConGAN shape-only baseline"),
    "msHGAN4": Preset(4, DiscriminatorKind.PERCEPTUAL, DEFAULT_LR, "msH-GAN4"),
    "msHGAN6": Preset(6, DiscriminatorKind.PERCEPTUAL, DEFAULT_LR, "msH-GAN6"),
}


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "msHGAN4"
    learning_rate: Optional[float] = None
    epochs: int = 10
    crop_size: int = 128
    val_size: int = 256
    val_mode: str = "center"
    batch_size: int = 1
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.5
    seed: int = 0
    mask_fill: float = -1.0
    gen_channels: int = 64
    disc_channels: int = 64
    backbone_channels: tuple = (64, 128, 256, 512)
    backbone_weights: Optional[str] = None
    output_scales: tuple = (16, 8, 4)
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", PRESETS[self.preset].learning_rate)
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        object.__setattr__(self, "output_scales", tuple(self.output_scales))
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.val_mode not in ("center", "resize"):
            raise InvalidConfig(f"val_mode must be 'center' or 'resize', got {self.val_mode!r}")
        if not -1.0 <= self.mask_fill <= 1.0:
            raise InvalidConfig("mask_fill must lie in [-1, 1]")
        if self.max_steps is not None and self.max_steps < 1:
            raise InvalidConfig("max_steps must be >= 1")
        LossWeights(self.lambda_cycle, self.lambda_identity)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cycle, self.lambda_identity)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["output_scales"] = list(self.output_scales)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    config: TrainConfig
    g_real: Generator
    g_syn: Generator
    d_real: torch.nn.Module
    d_syn: torch.nn.Module
    backbone: Optional[FeatureBackbone]
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    samplers: Optional[tuple] = None

    def networks(self) -> dict:
        return {"g_real": self.g_real, "g_syn": self.g_syn, "d_real": self.d_real, "d_syn": self.d_syn}


def build_state(config: TrainConfig) -> TrainState:
    preset = PRESETS[config.preset]
    g = torch.Generator().manual_seed(config.seed)
    g_real = build_generator(
        GeneratorConfig(preset.n_residual_blocks, config.gen_channels, Direction.SYN_TO_REAL), g)
    g_syn = build_generator(
        GeneratorConfig(preset.n_residual_blocks, config.gen_channels, Direction.REAL_TO_SYN), g)
    backbone = None
    scales = ()
    if preset.discriminator is DiscriminatorKind.PERCEPTUAL:
        backbone = build_backbone(config.backbone_weights if config.backbone_weights else config.seed,
                                  config.backbone_channels)
        scales = config.output_scales
    d_real = build_discriminator(
        DiscriminatorConfig(preset.discriminator, DomainTag.REAL, scales, config.disc_channels), backbone, g)
    d_syn = build_discriminator(
        DiscriminatorConfig(preset.discriminator, DomainTag.SYNTHETIC, scales, config.disc_channels), backbone, g)
    opt_g = torch.optim.Adam(itertools.chain(g_real.parameters(), g_syn.parameters()),
                             lr=config.learning_rate, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(itertools.chain(d_real.parameters(), d_syn.parameters()),
                             lr=config.learning_rate, betas=ADAM_BETAS)
    return TrainState(config, g_real, g_syn, d_real, d_syn, backbone, opt_g, opt_d,
                      np.random.default_rng(config.seed))


def _set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _finite(name, value):
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLoss(name, v)
    return v


def train_step(state: TrainState, batch: UnpairedBatch, config: Optional[TrainConfig] = None):
    """One discriminator update followed by one generator update."""
    config = config or state.config
    if config.preset != state.config.preset:
        raise InvalidConfig(f"state built for {state.config.preset}, step asked for {config.preset}")
    fill = config.mask_fill
    syn = samples_to_tensor(batch.synthetic)
    real = samples_to_tensor(batch.real)
    m_syn = masks_to_tensor(batch.synthetic)
    m_real = masks_to_tensor(batch.real)
    discriminators = (state.d_real, state.d_syn)

    # Discriminators see detached translations.
    _set_requires_grad(discriminators, True)
    with torch.no_grad():
        fake_real = apply_mask_tensor(state.g_real(syn), m_syn, fill)
        fake_syn = apply_mask_tensor(state.g_syn(real), m_real, fill)
    d_loss_real = lsgan_discriminator_loss(state.d_real(real), state.d_real(fake_real))
    d_loss_syn = lsgan_discriminator_loss(state.d_syn(syn), state.d_syn(fake_syn))
    d_real_v = _finite("d_loss_real", d_loss_real)
    d_syn_v = _finite("d_loss_syn", d_loss_syn)
    state.opt_d.zero_grad(set_to_none=True)
    (d_loss_real + d_loss_syn).backward()
    state.opt_d.step()

    _set_requires_grad(discriminators, False)
    fake_real = apply_mask_tensor(state.g_real(syn), m_syn, fill)
    fake_syn = apply_mask_tensor(state.g_syn(real), m_real, fill)
    rec_syn = state.g_syn(fake_real)
    rec_real = state.g_real(fake_syn)
    adv_real = lsgan_generator_loss(state.d_real(fake_real))
    adv_syn = lsgan_generator_loss(state.d_syn(fake_syn))
    # Background cannot survive a masked round trip, so cycle error is measured inside the mask.
    cyc_s = cycle_loss(apply_mask_tensor(syn, m_syn, fill), apply_mask_tensor(rec_syn, m_syn, fill))
    cyc_r = cycle_loss(apply_mask_tensor(real, m_real, fill), apply_mask_tensor(rec_real, m_real, fill))
    id_s = identity_loss(syn, state.g_syn(syn))
    id_r = identity_loss(real, state.g_real(real))
    total = total_generator_objective(adv_syn, adv_real, cyc_s, cyc_r, id_s, id_r, config.weights)
    record = LossRecord(
        d_loss_syn=d_syn_v,
        d_loss_real=d_real_v,
        g_adv_syn=_finite("g_adv_syn", adv_syn),
        g_adv_real=_finite("g_adv_real", adv_real),
        cycle=_finite("cycle", cyc_s + cyc_r),
        identity=_finite("identity", id_s + id_r),
        total_g=_finite("total_g", total),
    )
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    _set_requires_grad(discriminators, True)
    state.step += 1
    return state, record


# --------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "preset": state.config.preset,
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "networks": {k: m.state_dict() for k, m in state.networks().items()},
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.bit_generator.state,
        "samplers": None if state.samplers is None else [
            {"count": s.count, "rng": s.rng.bit_generator.state, "queue": list(s._queue)}
            for s in state.samplers],
        "backbone_identity": None if state.backbone is None else state.backbone.identity,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _restore_rng(bit_state) -> np.random.Generator:
    bitgen = getattr(np.random, bit_state["bit_generator"])()
    bitgen.state = bit_state
    return np.random.Generator(bitgen)


def load_checkpoint(path, config: Optional[TrainConfig] = None,
                    backbone_weights: Optional[str] = None) -> TrainState:
    """Rebuild a :class:`TrainState`.

    Passing ``config`` asserts the preset matches. ``backbone_weights``
    re-points a pretrained backbone whose file moved since saving.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise DecodeError(f"{path} is not a handgan checkpoint")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise IncompatibleCheckpoint(
            f"{path} has schema {payload['schema_version']}, expected {SCHEMA_VERSION}")
    if config is not None and config.preset != payload["preset"]:
        raise IncompatibleCheckpoint(f"{path} holds preset {payload['preset']}, not {config.preset}")
    saved = TrainConfig.from_dict(payload["config"])
    if backbone_weights is not None:
        saved = dataclasses.replace(saved, backbone_weights=backbone_weights)
    state = build_state(saved)
    if state.backbone is not None and state.backbone.identity != payload["backbone_identity"]:
        raise IncompatibleCheckpoint(
            f"backbone {state.backbone.identity} differs from checkpoint's {payload['backbone_identity']}")
    try:
        for name, module in state.networks().items():
            module.load_state_dict(payload["networks"][name])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
    except (KeyError, RuntimeError, ValueError) as exc:
        raise IncompatibleCheckpoint(f"{path}: {exc}") from exc
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    state.rng = _restore_rng(payload["rng"])
    if payload["samplers"] is not None:
        samplers = []
        for s in payload["samplers"]:
            sampler = EpochSampler(s["count"], _restore_rng(s["rng"]))
            sampler._queue = list(s["queue"])
            samplers.append(sampler)
        state.samplers = tuple(samplers)
    return state


# --------------------------------------------------------------------------
# Loop

def _check_writable(output_dir):
    try:
        os.makedirs(output_dir, exist_ok=True)
        probe = os.path.join(output_dir, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory {output_dir} is not writable: {exc}") from exc


def _append_log(path, step, record: LossRecord):
    new = not os.path.exists(path)
    try:
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", *LOSS_FIELDS])
            writer.writerow([step, *[repr(v) for v in record.as_row()]])
    except OSError as exc:
        raise OSError(f"cannot write loss log {path}: {exc}") from exc


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def steps_per_epoch(syn_index: DatasetIndex, real_index: DatasetIndex, batch_size: int) -> int:
    return math.ceil(max(syn_index.count, real_index.count) / batch_size)


def _sample_grid(state: TrainState, syn_index: DatasetIndex, path, size: int):
    samples = [load_sample(e, syn_index.domain) for e in syn_index.entries[:3]]
    side = min(size, *(min(s.height, s.width) for s in samples))
    samples = [center_crop(s, side - side % 4) for s in samples]
    src = samples_to_tensor(samples)
    with torch.no_grad():
        out = state.g_real(src)
    tiles = [*src.permute(0, 2, 3, 1).numpy(), *out.permute(0, 2, 3, 1).numpy()]
    visual.save_grid(path, tiles, ncols=len(samples))


def fit(config: TrainConfig, syn_index: DatasetIndex, real_index: DatasetIndex, output_dir,
        syn_val_index: Optional[DatasetIndex] = None, real_val_index: Optional[DatasetIndex] = None,
        embedding=None, state: Optional[TrainState] = None) -> str:
    """Train for ``config.epochs`` epochs (or ``config.max_steps`` steps).

    Per-step losses go to ``loss_log.csv``. Each epoch leaves a checkpoint
    and a sample grid (``epoch_XXX.pt``/``.png``) plus a ``val_log.csv`` row
    when validation sets are given. Returns the path of ``final.pt``.
    """
    _check_writable(output_dir)
    state = state or build_state(config)
    if state.samplers is None:
        # Own streams per sampler (not state.rng) so each serializes independently.
        state.samplers = (EpochSampler(syn_index.count, np.random.default_rng((config.seed, 1))),
                          EpochSampler(real_index.count, np.random.default_rng((config.seed, 2))))
    per_epoch = steps_per_epoch(syn_index, real_index, config.batch_size)
    log_path = os.path.join(output_dir, "loss_log.csv")
    done = False
    while state.epoch < config.epochs and not done:
        for _ in range(per_epoch):
            batch = make_unpaired_batch(syn_index, real_index, config.batch_size, config.crop_size,
                                        state.rng, state.samplers)
            state, record = train_step(state, batch, config)
            _append_log(log_path, state.step, record)
            if config.max_steps is not None and state.step >= config.max_steps:
                done = True
                break
        state.epoch += 1
        tag = f"epoch_{state.epoch:03d}"
        save_checkpoint(state, os.path.join(output_dir, f"{tag}.pt"))
        _sample_grid(state, syn_index, os.path.join(output_dir, f"{tag}.png"), config.crop_size)
        if syn_val_index is not None and real_val_index is not None:
            value = validate(state, syn_val_index, real_val_index, embedding,
                             config.val_size, config.val_mode)
            with open(os.path.join(output_dir, "val_log.csv"), "a") as fh:
                fh.write(f"{state.epoch},{state.step},{value!r}\n")
    final = os.path.join(output_dir, "final.pt")
    save_checkpoint(state, final)
    return final


def _val_samples(index: DatasetIndex, size: int, mode: str) -> list:
    out = []
    for entry in index.entries:
        s = load_sample(entry, index.domain)
        if mode == "resize":
            out.append(resize_sample(s, size))
        else:
            side = min(size, s.height, s.width)
            out.append(center_crop(s, side - side % 16))
    return out


def validate(state: TrainState, syn_val_index: DatasetIndex, real_val_index: DatasetIndex,
             embedding=None, val_size: int = 256, mode: str = "center",
             translator: Optional[Callable] = None, batch_size: int = 4) -> float:
    """FID between translated synthetic validation images and real validation images."""
    if syn_val_index.count < 2 or real_val_index.count < 2:
        raise InsufficientSamples(
            f"validation needs >= 2 images per side, got {syn_val_index.count} and {real_val_index.count}")
    if embedding is None:
        embedding = RandomConvEmbedding(state.config.seed)
    translator = translator or state.g_real
    src = samples_to_tensor(_val_samples(syn_val_index, val_size, mode))
    ref = samples_to_tensor(_val_samples(real_val_index, val_size, mode))
    with torch.no_grad():
        translated = torch.cat([translator(src[i:i + batch_size]) for i in range(0, len(src), batch_size)])
    return evaluate_sets(translated, ref, embedding, n_subsets=1, seed=state.config.seed).fid
