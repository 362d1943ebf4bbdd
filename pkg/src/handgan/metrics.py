"""FID and KID over embedded image sets.

FID fits a Gaussian to each feature set and measures the Fréchet distance
between the fits::

    d^2 = |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})

KID is the unbiased squared MMD under the cubic polynomial kernel
``k(u, v) = (u.v / d + 1)^3``, averaged over random subsets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    EmbeddingError,
    IncomparableFeatures,
    InsufficientSamples,
    NumericalInstability,
    ShapeMismatch,
    WeightLoadError,
)

SQRT_RESIDUE_TOL = 1e-3


@dataclass
class FeatureSet:
    vectors: np.ndarray
    embed_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeMismatch(f"features must be n x d, got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise EmbeddingError("non-finite feature values")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    n_generated: int
    n_reference: int
    embed_id: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        if set(data) != set(cls.__dataclass_fields__):
            raise ValueError(f"unexpected report fields: {sorted(data)}")
        return cls(**data)

    def summary(self) -> str:
        return (f"FID {self.fid:.3f} | KID {self.kid_mean:.4f} +/- {self.kid_std:.4f} "
                f"| {self.n_generated} vs {self.n_reference} images | {self.embed_id}")


# --------------------------------------------------------------------------
# Embeddings

class RandomConvEmbedding(nn.Module):
    """Seeded random conv net with global average pooling; a desk-scale stand-in
    for a pretrained inception network."""

    def __init__(self, seed: int = 0, dim: int = 64, size: int = 64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        widths = [3, 32, 64, dim]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(widths, widths[1:]))
        with torch.no_grad():
            for conv in self.convs:
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (conv.in_channels * 9)) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
        self.size = size
        self.embed_id = f"random-conv-seed{seed}-d{dim}-s{size}"
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.mean(dim=(2, 3))


class InceptionEmbedding(nn.Module):
    """Pool features (d = 2048) of an Inception-V3 classifier loaded from a state-dict file."""

    def __init__(self, weights_path):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits.")}
            net.load_state_dict(state)
        except Exception as exc:
            raise WeightLoadError(f"cannot load inception weights {weights_path}: {exc}") from exc
        net.fc = nn.Identity()
        self.net = net.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.embed_id = f"inception-v3:{weights_path}"
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        x = ((x + 1) * 0.5 - self.mean) / self.std
        return self.net(x)


def build_embedding(weights_path=None, seed: int = 0) -> nn.Module:
    if weights_path:
        return InceptionEmbedding(weights_path)
    return RandomConvEmbedding(seed)


def embed(images, network: nn.Module, batch_size: int = 64) -> FeatureSet:
    """One pooled feature vector per image. ``images`` is ``N x 3 x H x W`` in [-1, 1]."""
    if not isinstance(images, torch.Tensor):
        images = torch.as_tensor(np.asarray(images))
    rows = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out = network(images[start:start + batch_size].float())
            if not torch.isfinite(out).all():
                raise EmbeddingError(f"non-finite activations in batch starting at {start}")
            rows.append(out.double().cpu().numpy())
    vectors = np.concatenate(rows) if rows else np.zeros((0, 0))
    return FeatureSet(vectors, network.embed_id)


# --------------------------------------------------------------------------
# FID

def gaussian_stats(features: FeatureSet) -> GaussianStats:
    x = features.vectors
    if x.shape[0] < 2:
        raise InsufficientSamples(f"need at least 2 feature vectors, got {x.shape[0]}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T))


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (sigma + sigma.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Fréchet distance between two Gaussians.

    ``Tr((S_a S_b)^{1/2})`` is computed as ``Tr((A S_b A)^{1/2})`` with
    ``A = S_a^{1/2}``; both roots go through a symmetric eigendecomposition
    with negative eigenvalues clamped to zero.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeMismatch(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    middle = root_a @ b.sigma @ root_a
    # Residues are judged against the trace of the matrix being rooted.
    tr_ab = abs(np.trace(a.sigma)) + abs(np.trace(b.sigma))
    scale = abs(np.trace(middle)) + 1e-12 * tr_ab ** 2 + np.finfo(float).tiny
    asym = np.abs(middle - middle.T).sum()
    w = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    negative = -w[w < 0].sum()
    if asym > SQRT_RESIDUE_TOL * scale or negative > SQRT_RESIDUE_TOL * scale:
        raise NumericalInstability(
            f"matrix square root residue too large (asymmetry {asym:.3g}, "
            f"negative mass {negative:.3g}, trace scale {scale:.3g})")
    tr_covmean = np.sqrt(np.clip(w, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_covmean
    return float(max(value, 0.0))


# --------------------------------------------------------------------------
# KID

def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid(x: FeatureSet, y: FeatureSet, subset_size: int = 100, n_subsets: int = 10,
        rng: np.random.Generator = None):
    """Mean and sample standard deviation of the subset MMD^2 estimates."""
    if x.embed_id != y.embed_id:
        raise IncomparableFeatures(f"{x.embed_id!r} vs {y.embed_id!r}")
    if subset_size < 2:
        raise InsufficientSamples("subset_size must be >= 2")
    if subset_size > x.n or subset_size > y.n:
        raise InsufficientSamples(f"subset_size {subset_size} exceeds set sizes {x.n}, {y.n}")
    if x.vectors.shape[1] != y.vectors.shape[1]:
        raise ShapeMismatch("feature dimensions differ")
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    values = np.empty(n_subsets)
    for i in range(n_subsets):
        xs = x.vectors[rng.choice(x.n, subset_size, replace=False)]
        ys = y.vectors[rng.choice(y.n, subset_size, replace=False)]
        values[i] = mmd2_unbiased(xs, ys)
    std = float(values.std(ddof=1)) if n_subsets > 1 else 0.0
    return float(values.mean()), std


def evaluate_sets(generated, reference, embedding: nn.Module, subset_size: int = 100,
                  n_subsets: int = 10, seed: int = 0) -> MetricReport:
    """FID and KID between two image batches (``N x 3 x H x W`` in [-1, 1]).

    When a set is smaller than ``subset_size`` the KID subsets shrink to the
    smaller set size.
    """
    fx = embed(generated, embedding)
    fy = embed(reference, embedding)
    if fx.n < 2 or fy.n < 2:
        raise InsufficientSamples(f"need >= 2 images per set, got {fx.n} and {fy.n}")
    value = fid(gaussian_stats(fx), gaussian_stats(fy))
    m = min(subset_size, fx.n, fy.n)
    kid_mean, kid_std = kid(fx, fy, m, n_subsets, np.random.default_rng(seed))
    return MetricReport(value, kid_mean, kid_std, fx.n, fy.n, fx.embed_id, seed)

