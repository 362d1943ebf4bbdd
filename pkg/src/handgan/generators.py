"""ResNet encoder/decoder generators for the two translation directions."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InvalidConfig, ShapeError

ALLOWED_BLOCKS = (4, 6, 9)


class Direction(enum.Enum):
    SYN_TO_REAL = "syn_to_real"
    REAL_TO_SYN = "real_to_syn"


@dataclass(frozen=True)
class GeneratorConfig:
    n_residual_blocks: int = 9
    base_channels: int = 64
    direction: Direction = Direction.SYN_TO_REAL
    # Tiny networks for gradient checks are allowed to bypass the block whitelist.
    allow_any_depth: bool = False

    def __post_init__(self):
        if not self.allow_any_depth and self.n_residual_blocks not in ALLOWED_BLOCKS:
            raise InvalidConfig(
                f"n_residual_blocks must be one of {ALLOWED_BLOCKS}, got {self.n_residual_blocks}")
        if self.n_residual_blocks < 0:
            raise InvalidConfig("n_residual_blocks must be non-negative")
        if self.base_channels < 8:
            raise InvalidConfig(f"base_channels must be >= 8, got {self.base_channels}")


def _fans(weight: torch.Tensor):
    receptive = math.prod(weight.shape[2:]) if weight.dim() > 2 else 1
    return weight.shape[1] * receptive, weight.shape[0] * receptive


@torch.no_grad()
def xavier_init(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Xavier-uniform conv/linear weights; every bias starts at 0 and every norm scale at 1.

    Parameters are visited in ``named_parameters`` order so equal seeds give
    identical draws.
    """
    for name, p in module.named_parameters():
        if p.numel() == 0:
            continue
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        is_norm = isinstance(owner, (nn.InstanceNorm2d, nn.BatchNorm2d, nn.LayerNorm, nn.GroupNorm))
        if name.endswith("bias"):
            p.zero_()
        elif is_norm or p.dim() < 2:
            p.fill_(1.0)
        else:
            fan_in, fan_out = _fans(p)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            u = torch.rand(p.shape, generator=generator, dtype=torch.float64)
            p.copy_((2.0 * u - 1.0) * bound)
    return module


def xavier_uniform_(tensor: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Fill a single weight tensor in place with Xavier-uniform draws."""
    if tensor.numel() == 0:
        return tensor
    fan_in, fan_out = _fans(tensor)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        u = torch.rand(tensor.shape, generator=generator, dtype=torch.float64)
        tensor.copy_((2.0 * u - 1.0) * bound)
    return tensor


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=True)


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, c, 7), _norm(c), nn.ReLU(True)]
        for mult in (1, 2):
            layers += [nn.Conv2d(c * mult, c * mult * 2, 3, stride=2, padding=1),
                       _norm(c * mult * 2), nn.ReLU(True)]
        layers += [ResidualBlock(c * 4) for _ in range(config.n_residual_blocks)]
        for mult in (4, 2):
            layers += [nn.ConvTranspose2d(c * mult, c * mult // 2, 3, stride=2, padding=1,
                                          output_padding=1),
                       _norm(c * mult // 2), nn.ReLU(True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    @property
    def direction(self) -> Direction:
        return self.config.direction

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")
        if min(h, w) < 8:
            raise ShapeError(f"spatial dims must be >= 8, got {h}x{w}")
        return self.model(x)


def build_generator(config: GeneratorConfig, generator: torch.Generator) -> Generator:
    return xavier_init(Generator(config), generator)


def generate(g: Generator, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return g(images)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
