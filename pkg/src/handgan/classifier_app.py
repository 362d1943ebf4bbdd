"""Real-vs-synthetic hand classifier used to judge how "real" translations look.

Hands are composited onto random backgrounds, a small vision transformer is
trained on two sources (one per class) and per-class accuracy is measured
on a held-out test source. Generated images count as the real class.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import jsonschema
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import DatasetIndex, ImageSample, composite_background, load_sample, samples_to_tensor
from .errors import InsufficientSamples, InvalidConfig, NonFiniteLoss


class Source(enum.Enum):
    SYNTHETIC = "synthetic"
    REAL = "real"
    GENERATED = "generated"


LABELS = {Source.SYNTHETIC: 0, Source.REAL: 1, Source.GENERATED: 1}
CLASS_NAMES = ("synthetic", "real")

# Full-scale reference accuracies, keyed by (sorted train sources, test source).
REFERENCE_ACCURACY = {
    (("real", "synthetic"), "real"): 0.9399,
    (("real", "synthetic"), "generated"): 0.9046,
    (("generated", "synthetic"), "real"): 0.8843,
}


@dataclass(frozen=True)
class ClassifierExperiment:
    train_sources: frozenset
    test_source: Source
    per_class_count: int
    seed: int = 0
    checkpoint_id: Optional[str] = None

    def __post_init__(self):
        sources = frozenset(Source(s) for s in self.train_sources)
        object.__setattr__(self, "train_sources", sources)
        object.__setattr__(self, "test_source", Source(self.test_source))
        if len(sources) != 2:
            raise InvalidConfig("exactly two training sources are required")
        if {LABELS[s] for s in sources} != {0, 1}:
            raise InvalidConfig("training sources must cover both classes (synthetic and real-like)")
        if self.test_source is Source.SYNTHETIC:
            raise InvalidConfig("test source must be REAL or GENERATED")
        if self.per_class_count < 1:
            raise InvalidConfig("per_class_count must be positive")

    def key(self):
        return tuple(sorted(s.value for s in self.train_sources)), self.test_source.value


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: int = 2
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise InvalidConfig("image_size must be a multiple of patch_size")
        if self.width % self.heads:
            raise InvalidConfig("width must be divisible by heads")


@dataclass
class LabeledSample:
    sample: ImageSample
    label: int
    source: Source


@dataclass
class ClassifierReport:
    per_class_accuracy: float
    confusion: list
    config: dict
    reference: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_class_accuracy", "confusion", "config", "reference"],
    "additionalProperties": False,
    "properties": {
        "per_class_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "confusion": {
            "type": "array", "minItems": 2, "maxItems": 2,
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "items": {"type": "integer", "minimum": 0}},
        },
        "config": {
            "type": "object",
            "required": ["experiment", "model"],
            "properties": {"experiment": {"type": "object"}, "model": {"type": "object"}},
        },
        "reference": {"type": "object"},
    },
}


def validate_report(data: dict) -> None:
    jsonschema.validate(data, REPORT_SCHEMA)


# --------------------------------------------------------------------------
# Data

def split_index(index: DatasetIndex, test_fraction: float, rng: np.random.Generator):
    """Disjoint (train, test) sub-indices; either may be None when empty."""
    order = rng.permutation(index.count)
    n_test = int(round(index.count * test_fraction))
    parts = []
    for idx in (order[n_test:], order[:n_test]):
        entries = [index.entries[i] for i in sorted(idx)]
        parts.append(DatasetIndex(index.domain, entries) if entries else None)
    return tuple(parts)


def prepare_classification_set(index: DatasetIndex, backgrounds_index: DatasetIndex, count: int,
                               rng: np.random.Generator, source: Source = Source.REAL,
                               with_replacement: bool = False) -> list:
    """Composite ``count`` masked hands from ``index`` onto random background crops."""
    if count > index.count and not with_replacement:
        raise InsufficientSamples(
            f"{count} samples requested from {index.count} images; enable with_replacement")
    picks = rng.choice(index.count, size=count, replace=with_replacement)
    out = []
    for i in picks:
        sample = load_sample(index.entries[int(i)], index.domain)
        bg_entry = backgrounds_index.entries[int(rng.integers(backgrounds_index.count))]
        background = load_sample(bg_entry, backgrounds_index.domain)
        out.append(LabeledSample(composite_background(sample, background, rng), LABELS[source], source))
    return out


# --------------------------------------------------------------------------
# Model

class VisionTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, n_classes: int = 2):
        super().__init__()
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.cls = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos = nn.Parameter(torch.randn(1, n_patches + 1, cfg.width) * 0.02)
        layer = nn.TransformerEncoderLayer(cfg.width, cfg.heads, cfg.width * cfg.mlp_ratio,
                                           dropout=0.0, activation="gelu", batch_first=True,
                                           norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, n_classes)

    def forward(self, x):
        tokens = self.patch(x).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls.expand(len(x), -1, -1), tokens], dim=1) + self.pos
        return self.head(self.norm(self.encoder(tokens))[:, 0])


def _to_inputs(items, size: int) -> torch.Tensor:
    x = samples_to_tensor([it.sample for it in items])
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


def train_classifier(model: VisionTransformer, items, cfg: ModelConfig, seed: int) -> VisionTransformer:
    x = _to_inputs(items, cfg.image_size)
    y = torch.tensor([it.label for it in items])
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(x), generator=g)
        for b, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"classifier cross-entropy (epoch {epoch}, batch {b})", value)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


def confusion_matrix(labels, predictions) -> list:
    """``[[tn, fp], [fn, tp]]``; rows are true classes."""
    m = [[0, 0], [0, 0]]
    for t, p in zip(labels, predictions):
        m[int(t)][int(p)] += 1
    return m


def per_class_accuracy(confusion) -> float:
    """Mean of the recalls of the classes present in the test set."""
    recalls = [row[i] / sum(row) for i, row in enumerate(confusion) if sum(row) > 0]
    return float(np.mean(recalls)) if recalls else 0.0


def run_experiment(experiment: ClassifierExperiment, model_cfg: ModelConfig,
                   train_sets: dict, test_sets: dict) -> ClassifierReport:
    """Train on ``train_sets`` of the experiment's training sources, test on
    ``test_sets[test_source]`` plus synthetic negatives ``test_sets[SYNTHETIC]``."""
    missing = [s for s in experiment.train_sources if s not in train_sets]
    if missing:
        raise InsufficientSamples(f"no prepared training set for {[s.value for s in missing]}")
    if experiment.test_source not in test_sets:
        raise InsufficientSamples(f"no prepared test set for {experiment.test_source.value}")
    train_items = [it for s in sorted(experiment.train_sources, key=lambda s: s.value) for it in train_sets[s]]
    test_items = list(test_sets[experiment.test_source]) + list(test_sets.get(Source.SYNTHETIC, []))

    torch.manual_seed(experiment.seed)
    model = train_classifier(VisionTransformer(model_cfg), train_items, model_cfg, experiment.seed)
    with torch.no_grad():
        logits = torch.cat([model(_to_inputs(test_items[i:i + 64], model_cfg.image_size))
                            for i in range(0, len(test_items), 64)])
    preds = logits.argmax(dim=1).tolist()
    confusion = confusion_matrix([it.label for it in test_items], preds)
    exp_echo = {
        "train_sources": sorted(s.value for s in experiment.train_sources),
        "test_source": experiment.test_source.value,
        "per_class_count": experiment.per_class_count,
        "seed": experiment.seed,
        "checkpoint_id": experiment.checkpoint_id,
    }
    reference = {}
    if experiment.key() in REFERENCE_ACCURACY:
        reference = {"full_scale_per_class_accuracy": REFERENCE_ACCURACY[experiment.key()],
                     "note": "full-scale reference only; not a desk-scale target"}
    return ClassifierReport(per_class_accuracy(confusion), confusion,
                            {"experiment": exp_echo, "model": asdict(model_cfg)}, reference)
