"""Clean-up of noisy binary hand masks and masking of generated images.

The refinement pipeline is fixed: median filter, keep the largest
8-connected blob, close small gaps, then erode the border.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .dataio import ImageSample
from .errors import InvalidKernel, ShapeMismatch

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class RefineParams:
    median_kernel: int = 5
    close_kernel: int = 2
    erode_kernel: int = 1

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise InvalidKernel(f"median_kernel must be odd and >= 1, got {self.median_kernel}")
        if self.close_kernel < 0 or self.erode_kernel < 0:
            raise InvalidKernel("morphology radii must be non-negative")


def _as_bool(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool)


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def median_filter(mask, k: int) -> np.ndarray:
    """Majority vote over each ``k x k`` window, replicating edge pixels."""
    if k < 1 or k % 2 == 0:
        raise InvalidKernel(f"median kernel must be odd, got {k}")
    m = _as_bool(mask)
    if k > min(m.shape):
        raise InvalidKernel(f"kernel {k} larger than mask {m.shape}")
    if k == 1:
        return m.astype(np.uint8)
    return ndimage.median_filter(m.astype(np.uint8), size=k, mode="nearest")


def keep_largest_component(mask) -> np.ndarray:
    """Retain only the largest 8-connected foreground blob.

    Equal areas are resolved in favour of the blob whose first pixel comes
    earliest in row-major order (``ndimage.label`` numbers blobs that way).
    """
    m = _as_bool(mask)
    labels, n = ndimage.label(m, structure=EIGHT_CONNECTED)
    if n == 0:
        return m.astype(np.uint8)
    areas = np.bincount(labels.ravel())[1:]
    winner = int(np.argmax(areas)) + 1
    return (labels == winner).astype(np.uint8)


def erode(mask, radius: int) -> np.ndarray:
    """Erosion with a square element; pixels beyond the frame count as background."""
    m = _as_bool(mask)
    if radius < 0:
        raise InvalidKernel(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return m.astype(np.uint8)
    return ndimage.binary_erosion(m, structure=_square(radius), border_value=0).astype(np.uint8)


def dilate(mask, radius: int) -> np.ndarray:
    m = _as_bool(mask)
    if radius < 0:
        raise InvalidKernel(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return m.astype(np.uint8)
    return ndimage.binary_dilation(m, structure=_square(radius), border_value=0).astype(np.uint8)


def morph_close(mask, radius: int) -> np.ndarray:
    """Dilation followed by erosion.

    The erosion step treats out-of-frame pixels as foreground so a hand that
    touches the image edge is not eaten away by closing alone.
    """
    m = _as_bool(mask)
    if radius < 0:
        raise InvalidKernel(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return m.astype(np.uint8)
    grown = ndimage.binary_dilation(m, structure=_square(radius), border_value=0)
    return ndimage.binary_erosion(grown, structure=_square(radius), border_value=1).astype(np.uint8)


def refine_mask(mask, params: RefineParams = RefineParams()) -> np.ndarray:
    m = median_filter(mask, params.median_kernel)
    m = keep_largest_component(m)
    m = morph_close(m, params.close_kernel)
    return erode(m, params.erode_kernel)


def apply_mask(image: ImageSample, mask, fill: float = -1.0) -> ImageSample:
    """Keep foreground pixels and paint the background with ``fill`` in every channel."""
    if not -1.0 <= fill <= 1.0:
        raise ValueError(f"fill must lie in [-1, 1], got {fill}")
    m = _as_bool(mask)
    if m.shape != image.pixels.shape[:2]:
        raise ShapeMismatch(f"mask {m.shape} does not match image {image.pixels.shape[:2]}")
    pixels = np.where(m[..., None], image.pixels, np.float32(fill)).astype(np.float32)
    return replace(image, pixels=pixels)


def apply_mask_tensor(images, masks, fill: float = -1.0):
    """Batched, differentiable counterpart of :func:`apply_mask` for ``N x C x H x W`` tensors."""
    if masks is None:
        return images
    if masks.shape[0] != images.shape[0] or masks.shape[-2:] != images.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(masks.shape)} does not match images {tuple(images.shape)}")
    masks = masks.to(images.dtype)
    return images * masks + fill * (1.0 - masks)
