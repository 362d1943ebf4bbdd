import numpy as np
import pytest

from handgan.visual import tile_images


def test_layout_and_placement():
    tiles = [np.full((4, 5, 3), v, np.float32) for v in (-1.0, -0.5, 0.0, 0.5, 0.9)]
    grid = tile_images(tiles, ncols=3, pad=1, pad_value=1.0)
    assert grid.shape == (2 * 4 + 3, 3 * 5 + 4, 3)
    for i, v in enumerate((-1.0, -0.5, 0.0, 0.5, 0.9)):
        r, c = divmod(i, 3)
        y, x = 1 + r * 5, 1 + c * 6
        assert np.all(grid[y:y + 4, x:x + 5] == v)
    assert np.all(grid[0] == 1.0)
    assert np.all(grid[6:10, 13:18] == 1.0)  # empty slot


def test_ncols_clamped():
    assert tile_images([np.zeros((2, 2, 3))], ncols=10, pad=0).shape == (2, 2, 3)


def test_empty():
    with pytest.raises(ValueError):
        tile_images([], 2)
