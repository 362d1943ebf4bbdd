"""Least-squares adversarial losses and the L1 reconstruction penalties.

Score maps arrive as lists of tensors, one per discriminator output scale.
Each map is reduced to its mean over batch and space before entering the
squared-error terms, so ``n`` maps contribute ``n`` summands.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import NonFiniteLoss, ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.5

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise ValueError("loss weights must be non-negative")


LOSS_FIELDS = ("d_loss_syn", "d_loss_real", "g_adv_syn", "g_adv_real", "cycle", "identity", "total_g")


@dataclass
class LossRecord:
    d_loss_syn: float
    d_loss_real: float
    g_adv_syn: float
    g_adv_real: float
    cycle: float
    identity: float
    total_g: float

    def as_row(self) -> list:
        return [getattr(self, f) for f in LOSS_FIELDS]

    def as_dict(self) -> dict:
        return asdict(self)


def _check_maps(maps):
    if len(maps) == 0:
        raise ShapeMismatch("empty score maps")


def lsgan_discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """Sum over scales of ``0.5 (mean(real) - 1)^2 + 0.5 mean(fake)^2``."""
    _check_maps(real_scores)
    if len(real_scores) != len(fake_scores):
        raise ShapeMismatch(f"{len(real_scores)} real maps vs {len(fake_scores)} fake maps")
    total = 0.0
    for y, z in zip(real_scores, fake_scores):
        if y.shape[1:] != z.shape[1:]:
            raise ShapeMismatch(f"score map shapes differ: {tuple(y.shape)} vs {tuple(z.shape)}")
        # Each scale's term is formed before accumulating, so an n-scale loss
        # equals the sum of n single-scale losses bit for bit.
        total = total + (0.5 * (y.mean() - 1.0) ** 2 + 0.5 * z.mean() ** 2)
    return total


def lsgan_generator_loss(fake_scores) -> torch.Tensor:
    _check_maps(fake_scores)
    total = 0.0
    for z in fake_scores:
        total = total + 0.5 * (z.mean() - 1.0) ** 2
    return total


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    return _l1(original, reconstructed)


def identity_loss(original: torch.Tensor, same_domain_output: torch.Tensor) -> torch.Tensor:
    return _l1(original, same_domain_output)


def _value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_generator_objective(adv_syn, adv_real, cycle_s, cycle_r, id_s, id_r,
                              weights: LossWeights = LossWeights()):
    """Weighted generator objective; works on floats or scalar tensors."""
    named = dict(adv_syn=adv_syn, adv_real=adv_real, cycle_s=cycle_s, cycle_r=cycle_r,
                 id_s=id_s, id_r=id_r)
    for name, v in named.items():
        if not math.isfinite(_value(v)):
            raise NonFiniteLoss(name, _value(v))
    return (adv_syn + adv_real
            + weights.lambda_cycle * (cycle_s + cycle_r)
            + weights.lambda_identity * (id_s + id_r))
