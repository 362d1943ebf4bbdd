"""Side-by-side image grids for visual inspection."""

import numpy as np
from PIL import Image

from .dataio import unit_to_uint8


def tile_images(images, ncols: int, pad: int = 2, pad_value: float = 1.0) -> np.ndarray:
    """Tile ``H x W x 3`` arrays in [-1, 1] row by row; smaller tiles are top-left aligned."""
    if not images:
        raise ValueError("no images to tile")
    ncols = max(1, min(ncols, len(images)))
    nrows = -(-len(images) // ncols)
    th = max(im.shape[0] for im in images)
    tw = max(im.shape[1] for im in images)
    canvas = np.full((nrows * th + (nrows + 1) * pad, ncols * tw + (ncols + 1) * pad, 3),
                     pad_value, dtype=np.float32)
    for i, im in enumerate(images):
        r, c = divmod(i, ncols)
        y = pad + r * (th + pad)
        x = pad + c * (tw + pad)
        canvas[y:y + im.shape[0], x:x + im.shape[1]] = im
    return canvas


def save_grid(path, images, ncols: int, pad: int = 2) -> None:
    Image.fromarray(unit_to_uint8(tile_images(list(images), ncols, pad)), mode="RGB").save(path)
