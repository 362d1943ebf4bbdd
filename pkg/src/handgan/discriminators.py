"""Discriminator families and the frozen 16-layer VGG-style feature
backbone that the multi-scale perceptual variant reads from."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .dataio import DomainTag
from .errors import InvalidConfig, ShapeError, WeightLoadError
from .generators import xavier_init

# Output resolutions are stated for this input size; other sizes scale with it.
REFERENCE_SIZE = 128
VGG16_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LEAK = 0.2


class DiscriminatorKind(enum.Enum):
    PATCH = "patch"
    PIXEL = "pixel"
    PERCEPTUAL = "perceptual"


@dataclass(frozen=True)
class DiscriminatorConfig:
    kind: DiscriminatorKind
    domain: DomainTag = DomainTag.REAL
    output_scales: tuple = ()
    base_channels: int = 64

    def __post_init__(self):
        scales = tuple(self.output_scales)
        if self.kind is DiscriminatorKind.PERCEPTUAL:
            if not scales:
                scales = (16, 8, 4)
                object.__setattr__(self, "output_scales", scales)
            if any(s <= 0 for s in scales) or any(a <= b for a, b in zip(scales, scales[1:])):
                raise InvalidConfig(f"output_scales must be strictly decreasing positives: {scales}")
            for s in scales:
                stride = REFERENCE_SIZE // s
                if REFERENCE_SIZE % s or stride < 8 or stride & (stride - 1):
                    raise InvalidConfig(
                        f"output scale {s} must be {REFERENCE_SIZE} divided by a power of two >= 8")
        elif scales:
            raise InvalidConfig(f"{self.kind.value} discriminators take no output_scales")
        if self.base_channels < 1:
            raise InvalidConfig("base_channels must be positive")


@dataclass
class PerceptualFeatures:
    maps: list = field(default_factory=list)


class FeatureBackbone(nn.Module):
    """First four convolutional stages of a VGG-16, frozen.

    Layer indices mirror ``torchvision.models.vgg16().features`` so pretrained
    state dicts load unchanged. Taps sit after the last ReLU of each stage,
    before pooling, giving strides 1, 2, 4 and 8.
    """

    def __init__(self, channels: Sequence[int] = (64, 128, 256, 512), identity: str = "unnamed"):
        super().__init__()
        if len(channels) != 4:
            raise InvalidConfig("backbone needs exactly four stage widths")
        layers, taps, in_ch = [], [], 3
        for stage, ((_, n_convs), out_ch) in enumerate(zip(VGG16_STAGES, channels)):
            for _ in range(n_convs):
                layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=False)]
                in_ch = out_ch
            taps.append(len(layers) - 1)
            if stage < 3:
                layers.append(nn.MaxPool2d(2, 2))
        self.features = nn.Sequential(*layers)
        self.tap_points = tuple(taps)
        self.channels = tuple(channels)
        self.identity = identity
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def freeze(self) -> "FeatureBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # Always stays in eval mode.
        return super().train(False)

    def forward(self, x) -> list:
        h = ((x + 1.0) * 0.5 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.tap_points:
                out.append(h)
        return out


def _fingerprint(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, t in module.state_dict().items():
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


def build_backbone(weights_source=0, channels: Sequence[int] = (64, 128, 256, 512)) -> FeatureBackbone:
    """Build the frozen backbone.

    ``weights_source`` is a path to a VGG-16 state dict (pretrained route) or
    an integer seed for a random frozen stand-in. ``channels`` only applies
    to stand-ins.
    """
    if isinstance(weights_source, (str, bytes)) or hasattr(weights_source, "__fspath__"):
        backbone = FeatureBackbone()
        try:
            state = torch.load(weights_source, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise WeightLoadError(f"cannot read backbone weights {weights_source}: {exc}") from exc
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise WeightLoadError(f"{weights_source} does not hold a state dict")
        wanted = {k for k in backbone.state_dict() if k.startswith("features.")}
        picked = {k: v for k, v in state.items() if k in wanted}
        if set(picked) != wanted:
            raise WeightLoadError(f"{weights_source} lacks VGG-16 keys {sorted(wanted - set(picked))[:4]}")
        try:
            backbone.load_state_dict(picked, strict=False)
        except RuntimeError as exc:
            raise WeightLoadError(str(exc)) from exc
        backbone.identity = f"vgg16:{_fingerprint(backbone)}"
    else:
        seed = int(weights_source)
        backbone = FeatureBackbone(channels)
        g = torch.Generator().manual_seed(seed)
        # Kaiming-style scale keeps random ReLU features from collapsing with depth.
        with torch.no_grad():
            for m in backbone.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        backbone.identity = f"random-vgg16-seed{seed}-w{'x'.join(map(str, channels))}"
    return backbone.freeze()


def extract_features(backbone: FeatureBackbone, images: torch.Tensor) -> PerceptualFeatures:
    h, w = images.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"backbone input must be divisible by 16, got {h}x{w}")
    return PerceptualFeatures(backbone(images))


def _lrelu():
    return nn.LeakyReLU(LEAK, inplace=False)


class Discriminator(nn.Module):
    kind: DiscriminatorKind

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config

    @property
    def domain(self) -> DomainTag:
        return self.config.domain


class PatchDiscriminator(Discriminator):
    """Four stride-2 4x4 convolutions then a 1-channel 3x3 head: maps H x W to H/16 x W/16."""

    def __init__(self, config):
        super().__init__(config)
        c = config.base_channels
        widths = [c, 2 * c, 4 * c, 8 * c]
        layers, in_ch = [], 3
        for i, out_ch in enumerate(widths):
            layers.append(nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(out_ch, affine=True))
            layers.append(_lrelu())
            in_ch = out_ch
        layers.append(nn.Conv2d(in_ch, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"patch discriminator input must be divisible by 16, got {h}x{w}")
        return [self.model(x)]


class PixelDiscriminator(Discriminator):
    def __init__(self, config):
        super().__init__(config)
        c = config.base_channels
        self.model = nn.Sequential(
            nn.Conv2d(3, c, 1), _lrelu(),
            nn.Conv2d(c, 2 * c, 1), nn.InstanceNorm2d(2 * c, affine=True), _lrelu(),
            nn.Conv2d(2 * c, 1, 1),
        )

    def forward(self, x):
        return [self.model(x)]


class PerceptualDiscriminator(Discriminator):
    """Learnable conv + leakyReLU blocks chained across the four backbone scales.

    Each block halves resolution and its output is concatenated with the
    backbone features of the next scale. After the deepest tap (stride 8) the
    chain keeps halving and a 1-channel head is attached at every configured
    output stride.
    """

    def __init__(self, config, backbone: FeatureBackbone):
        super().__init__(config)
        # Held outside the module tree: shared, frozen, never checkpointed with D.
        object.__setattr__(self, "backbone", backbone)
        ch = backbone.channels
        self.down = nn.ModuleList()
        in_ch = ch[0]
        for nxt in ch[1:]:
            self.down.append(nn.Sequential(nn.Conv2d(in_ch, nxt, 4, stride=2, padding=1), _lrelu()))
            in_ch = nxt + nxt
        top = ch[-1]
        self.fuse = nn.Sequential(nn.Conv2d(in_ch, top, 3, padding=1), _lrelu())
        self.strides = [REFERENCE_SIZE // s for s in config.output_scales]
        n_extra = (max(self.strides) // 8).bit_length() - 1
        self.extra = nn.ModuleList(
            nn.Sequential(nn.Conv2d(top, top, 4, stride=2, padding=1), _lrelu()) for _ in range(n_extra))
        self.heads = nn.ModuleDict({str(s): nn.Conv2d(top, 1, 3, padding=1) for s in self.strides})

    def forward(self, x, backbone: Optional[FeatureBackbone] = None):
        if backbone is not None and backbone is not self.backbone:
            raise InvalidConfig("perceptual discriminator called with a foreign backbone")
        h, w = x.shape[-2:]
        deepest = max(self.strides)
        if h % max(16, deepest) or w % max(16, deepest):
            raise ShapeError(f"input {h}x{w} must be divisible by {max(16, deepest)}")
        feats = extract_features(self.backbone, x).maps
        h = feats[0]
        for block, f in zip(self.down, feats[1:]):
            h = torch.cat([block(h), f], dim=1)
        h = self.fuse(h)
        outputs, stride = {}, 8
        if str(stride) in self.heads:
            outputs[stride] = self.heads[str(stride)](h)
        for block in self.extra:
            h = block(h)
            stride *= 2
            if str(stride) in self.heads:
                outputs[stride] = self.heads[str(stride)](h)
        return [outputs[s] for s in self.strides]


def build_discriminator(config: DiscriminatorConfig, backbone: Optional[FeatureBackbone],
                        generator: torch.Generator) -> Discriminator:
    if config.kind is DiscriminatorKind.PERCEPTUAL:
        if backbone is None:
            raise InvalidConfig("perceptual discriminator requires a backbone")
        d = PerceptualDiscriminator(config, backbone)
    elif backbone is not None:
        raise InvalidConfig(f"{config.kind.value} discriminator does not take a backbone")
    elif config.kind is DiscriminatorKind.PATCH:
        d = PatchDiscriminator(config)
    else:
        d = PixelDiscriminator(config)
    return xavier_init(d, generator)


def discriminate(d: Discriminator, images: torch.Tensor, backbone: Optional[FeatureBackbone] = None) -> list:
    """Raw per-scale score maps (``N x 1 x h x w`` each)."""
    if isinstance(d, PerceptualDiscriminator):
        return d(images, backbone)
    if backbone is not None:
        raise InvalidConfig(f"{d.config.kind.value} discriminator does not take a backbone")
    return d(images)
