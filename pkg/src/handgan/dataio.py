"""Loading of the two unpaired image domains.

On-disk layout::

    root/
        synthetic/images/*.png   synthetic/masks/*.png  (masks optional)
        real/images/*.png        real/masks/*.png

Pixels are stored as float32 ``H x W x 3`` arrays in [-1, 1]; masks as
uint8 ``H x W`` arrays holding only 0 and 1.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import (
    CropTooLarge,
    DecodeError,
    EmptyDataset,
    InvalidBatchSize,
    MaskRequired,
    ShapeMismatch,
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
MASK_THRESHOLD = 127


class DomainTag(enum.Enum):
    SYNTHETIC = "synthetic"
    REAL = "real"


@dataclass
class ImageSample:
    pixels: np.ndarray
    domain: DomainTag
    mask: Optional[np.ndarray] = None
    source_path: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeMismatch(f"expected H x W x 3 pixels, got {px.shape}")
        if px.shape[0] < 4 or px.shape[1] < 4:
            raise ShapeMismatch(f"image too small: {px.shape[:2]}")
        if not (np.all(px >= -1.0) and np.all(px <= 1.0)):
            raise ValueError("pixel values outside [-1, 1]")
        if self.mask is not None:
            if self.mask.shape != px.shape[:2]:
                raise ShapeMismatch(
                    f"mask {self.mask.shape} does not match image {px.shape[:2]}"
                )
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError("mask must be binary")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class IndexEntry:
    image_path: str
    mask_path: Optional[str] = None


@dataclass
class DatasetIndex:
    domain: DomainTag
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise EmptyDataset(f"no images for domain {self.domain.value}")

    @property
    def count(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)


@dataclass
class UnpairedBatch:
    synthetic: list
    real: list

    def __post_init__(self):
        if not self.synthetic or not self.real:
            raise InvalidBatchSize("both sides of a batch must be non-empty")
        sizes = {(s.height, s.width) for s in [*self.synthetic, *self.real]}
        if len(sizes) != 1:
            raise ShapeMismatch(f"batch mixes spatial sizes {sorted(sizes)}")


def list_images(directory):
    return sorted(
        f for f in os.listdir(directory)
        if f.lower().endswith(IMAGE_EXTENSIONS) and os.path.isfile(os.path.join(directory, f))
    )


def _find_mask(mask_dir, filename):
    """Match by exact filename first, then by stem (so ``a.jpg`` pairs with ``a.png``)."""
    exact = os.path.join(mask_dir, filename)
    if os.path.isfile(exact):
        return exact
    stem = os.path.splitext(filename)[0]
    for ext in IMAGE_EXTENSIONS:
        candidate = os.path.join(mask_dir, stem + ext)
        if os.path.isfile(candidate):
            return candidate
    return None


def scan_domain_dir(root_path, domain: DomainTag) -> DatasetIndex:
    """Index ``root_path/images`` (sorted by filename) and attach masks from ``root_path/masks``."""
    image_dir = os.path.join(root_path, "images")
    if not os.path.isdir(image_dir):
        raise EmptyDataset(f"{image_dir} does not exist")
    mask_dir = os.path.join(root_path, "masks")
    has_masks = os.path.isdir(mask_dir)
    entries = []
    for name in list_images(image_dir):
        mask_path = _find_mask(mask_dir, name) if has_masks else None
        entries.append(IndexEntry(os.path.join(image_dir, name), mask_path))
    if not entries:
        raise EmptyDataset(f"{image_dir} contains no images")
    return DatasetIndex(domain, entries)


def uint8_to_unit(array: np.ndarray) -> np.ndarray:
    return (array.astype(np.float32) / 127.5 - 1.0).clip(-1.0, 1.0)


def unit_to_uint8(array) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    return np.round((array.clip(-1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    return (gray > MASK_THRESHOLD).astype(np.uint8)


def write_rgb(path, pixels) -> None:
    Image.fromarray(unit_to_uint8(pixels), mode="RGB").save(path)


def write_mask(path, mask) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_sample(entry: IndexEntry, domain: DomainTag) -> ImageSample:
    pixels = uint8_to_unit(read_rgb(entry.image_path))
    mask = None
    if entry.mask_path is not None:
        mask = read_mask(entry.mask_path)
        if mask.shape != pixels.shape[:2]:
            raise ShapeMismatch(
                f"mask {entry.mask_path} is {mask.shape}, image is {pixels.shape[:2]}"
            )
    return ImageSample(pixels, domain, mask, entry.image_path)


def _crop(sample: ImageSample, top: int, left: int, size: int) -> ImageSample:
    pixels = sample.pixels[top:top + size, left:left + size]
    mask = None if sample.mask is None else sample.mask[top:top + size, left:left + size]
    return replace(sample, pixels=np.ascontiguousarray(pixels),
                   mask=None if mask is None else np.ascontiguousarray(mask))


def random_crop(sample: ImageSample, size: int, rng: np.random.Generator) -> ImageSample:
    h, w = sample.height, sample.width
    if size > h or size > w:
        raise CropTooLarge(f"crop {size} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return _crop(sample, top, left, size)


def center_crop(sample: ImageSample, size: int) -> ImageSample:
    h, w = sample.height, sample.width
    if size > h or size > w:
        raise CropTooLarge(f"crop {size} exceeds image {h}x{w}")
    return _crop(sample, (h - size) // 2, (w - size) // 2, size)


def resize_sample(sample: ImageSample, size: int) -> ImageSample:
    """Full-frame resize; the alternative to center cropping for validation."""
    img = Image.fromarray(unit_to_uint8(sample.pixels)).resize((size, size), Image.BICUBIC)
    mask = None
    if sample.mask is not None:
        m = Image.fromarray(sample.mask * 255).resize((size, size), Image.NEAREST)
        mask = (np.asarray(m) > MASK_THRESHOLD).astype(np.uint8)
    return replace(sample, pixels=uint8_to_unit(np.asarray(img)), mask=mask)


class EpochSampler:
    """Endless stream of indices; each pass is a fresh permutation of ``range(count)``."""

    def __init__(self, count: int, rng: np.random.Generator):
        if count <= 0:
            raise EmptyDataset("cannot sample from an empty index")
        self.count = count
        self.rng = rng
        self._queue: list = []

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = [int(i) for i in self.rng.permutation(self.count)]
            out.append(self._queue.pop(0))
        return out


def make_unpaired_batch(syn_index: DatasetIndex, real_index: DatasetIndex, batch_size: int,
                        crop_size: int, rng: np.random.Generator,
                        samplers: Optional[tuple] = None) -> UnpairedBatch:
    """Draw ``batch_size`` samples per domain independently and crop them.

    ``samplers`` is an optional ``(syn, real)`` pair of :class:`EpochSampler` that
    persists across calls so an epoch visits every image before repeating.
    """
    if batch_size < 1:
        raise InvalidBatchSize(f"batch_size must be >= 1, got {batch_size}")
    if samplers is None:
        samplers = (EpochSampler(syn_index.count, rng), EpochSampler(real_index.count, rng))
    syn = [random_crop(load_sample(syn_index.entries[i], syn_index.domain), crop_size, rng)
           for i in samplers[0].take(batch_size)]
    real = [random_crop(load_sample(real_index.entries[i], real_index.domain), crop_size, rng)
            for i in samplers[1].take(batch_size)]
    return UnpairedBatch(syn, real)


def composite_background(sample: ImageSample, background: ImageSample,
                         rng: np.random.Generator) -> ImageSample:
    """Paste the masked foreground of ``sample`` onto a random crop of ``background``."""
    if sample.mask is None:
        raise MaskRequired(f"{sample.source_path or 'sample'} has no mask")
    h, w = sample.height, sample.width
    if background.height < h or background.width < w:
        raise CropTooLarge(f"background {background.height}x{background.width} smaller than {h}x{w}")
    top = int(rng.integers(0, background.height - h + 1))
    left = int(rng.integers(0, background.width - w + 1))
    bg = background.pixels[top:top + h, left:left + w]
    m = sample.mask[..., None].astype(np.float32)
    pixels = (m * sample.pixels + (1.0 - m) * bg).astype(np.float32)
    return ImageSample(pixels, sample.domain, None, sample.source_path)


def samples_to_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    """Stack samples into an ``N x 3 x H x W`` float32 tensor."""
    return torch.from_numpy(np.stack([s.pixels for s in samples])).permute(0, 3, 1, 2).contiguous()


def masks_to_tensor(samples: Sequence[ImageSample]) -> Optional[torch.Tensor]:
    """``N x 1 x H x W`` mask tensor, or None when no sample carries a mask.

    Samples without a mask get an all-ones plane, i.e. they are left unmasked.
    """
    if all(s.mask is None for s in samples):
        return None
    planes = [np.ones((s.height, s.width), np.float32) if s.mask is None
              else s.mask.astype(np.float32) for s in samples]
    return torch.from_numpy(np.stack(planes))[:, None]


def tensor_to_samples(batch: torch.Tensor, domain: DomainTag, paths=None) -> list:
    arr = batch.detach().cpu().float().clamp(-1, 1).permute(0, 2, 3, 1).numpy()
    paths = paths or [""] * len(arr)
    return [ImageSample(np.ascontiguousarray(a), domain, None, p) for a, p in zip(arr, paths)]
