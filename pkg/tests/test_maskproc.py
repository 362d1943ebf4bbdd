import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from handgan.dataio import DomainTag, ImageSample
from handgan.errors import InvalidKernel, ShapeMismatch
from handgan.maskproc import (
    RefineParams,
    apply_mask,
    erode,
    keep_largest_component,
    median_filter,
    morph_close,
    refine_mask,
)
from oracles import (
    close_oracle,
    components_oracle,
    erode_oracle,
    largest_component_oracle,
    median_oracle,
    refine_oracle,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures", "masks")

small_masks = arrays(np.uint8, st.tuples(st.integers(5, 14), st.integers(5, 14)), elements=st.integers(0, 1))


def _read(path):
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def _sample(rng, h, w):
    return ImageSample(rng.uniform(-1, 1, (h, w, 3)).astype(np.float32), DomainTag.REAL)


class TestMedian:
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_constant_unchanged(self, k):
        for v in (0, 1):
            m = np.full((9, 9), v, np.uint8)
            assert np.array_equal(median_filter(m, k), m)

    def test_isolated_pixel_removed(self):
        m = np.zeros((7, 7), np.uint8)
        m[3, 3] = 1
        assert median_filter(m, 3).sum() == 0

    def test_k1_identity(self):
        m = (np.random.default_rng(0).random((10, 10)) > 0.5).astype(np.uint8)
        assert np.array_equal(median_filter(m, 1), m)

    def test_even_kernel(self):
        with pytest.raises(InvalidKernel):
            median_filter(np.zeros((5, 5), np.uint8), 4)

    @settings(max_examples=25, deadline=None)
    @given(small_masks, st.sampled_from([1, 3, 5]))
    def test_matches_oracle(self, m, k):
        if k > min(m.shape):
            return
        assert np.array_equal(median_filter(m, k), median_oracle(m, k))


class TestLargestComponent:
    def test_keeps_bigger_blob(self):
        m = np.zeros((60, 60), np.uint8)
        m[5:25, 5:30] = 1  # 500
        m[40:44, 40:45] = 1  # 20
        out = keep_largest_component(m)
        assert out.sum() == 500
        assert np.array_equal(out, largest_component_oracle(m))

    def test_single_blob_unchanged(self):
        m = np.zeros((10, 10), np.uint8)
        m[2:6, 3:8] = 1
        assert np.array_equal(keep_largest_component(m), m)

    def test_all_zero(self):
        m = np.zeros((8, 8), np.uint8)
        assert np.array_equal(keep_largest_component(m), m)

    def test_diagonal_contact_is_connected(self):
        m = np.zeros((6, 6), np.uint8)
        m[1, 1] = m[2, 2] = m[3, 3] = 1
        m[5, 0] = 1
        assert keep_largest_component(m).sum() == 3

    def test_tie_prefers_row_major_first(self):
        m = np.zeros((8, 8), np.uint8)
        m[5:7, 0:2] = 1
        m[0:2, 5:7] = 1
        out = keep_largest_component(m)
        assert out[0, 5] == 1 and out[5, 0] == 0

    @settings(max_examples=40, deadline=None)
    @given(small_masks)
    def test_matches_oracle_and_properties(self, m):
        out = keep_largest_component(m)
        assert np.array_equal(out, largest_component_oracle(m))
        assert out.sum() <= m.sum()
        assert len(components_oracle(out)) <= 1


class TestMorphology:
    def test_close_radius0_identity(self):
        m = (np.random.default_rng(1).random((9, 9)) > 0.5).astype(np.uint8)
        assert np.array_equal(morph_close(m, 0), m)

    def test_close_fills_hole(self):
        m = np.zeros((16, 16), np.uint8)
        m[3:13, 3:13] = 1
        m[7, 7] = 0
        out = morph_close(m, 1)
        expected = m.copy()
        expected[7, 7] = 1
        assert np.array_equal(out, expected)
        assert np.array_equal(out, close_oracle(m, 1))

    def test_close_empty(self):
        assert morph_close(np.zeros((6, 6), np.uint8), 2).sum() == 0

    def test_erode_radius0_identity(self):
        m = (np.random.default_rng(2).random((9, 9)) > 0.5).astype(np.uint8)
        assert np.array_equal(erode(m, 0), m)

    def test_erode_square_to_center(self):
        m = np.zeros((7, 7), np.uint8)
        m[2:5, 2:5] = 1
        expected = np.zeros_like(m)
        expected[3, 3] = 1
        assert np.array_equal(erode(m, 1), expected)

    def test_erode_all_ones_removes_ring(self):
        m = np.ones((6, 8), np.uint8)
        expected = np.zeros_like(m)
        expected[1:-1, 1:-1] = 1
        assert np.array_equal(erode(m, 1), expected)

    @settings(max_examples=30, deadline=None)
    @given(small_masks, st.integers(0, 2))
    def test_erode_oracle_and_subset(self, m, r):
        out = erode(m, r)
        assert np.array_equal(out, erode_oracle(m, r))
        assert np.all(out <= m)

    @settings(max_examples=30, deadline=None)
    @given(small_masks, st.integers(0, 2))
    def test_close_oracle(self, m, r):
        assert np.array_equal(morph_close(m, r), close_oracle(m, r))


class TestRefine:
    def test_clean_blob_preserved_up_to_erosion(self):
        m = np.zeros((24, 24), np.uint8)
        m[6:18, 5:19] = 1
        out = refine_mask(m, RefineParams(3, 1, 1))
        assert np.array_equal(out, refine_oracle(m, 3, 1, 1))
        # The median filter trims corners, so the result sits between the
        # twice-eroded and the once-eroded rectangle.
        assert np.all(out <= erode_oracle(m, 1))
        assert np.all(erode_oracle(m, 2) <= out)

    @pytest.mark.parametrize("name", ["speckle", "two_blob"])
    def test_committed_fixtures(self, name):
        src = _read(os.path.join(FIXTURES, f"{name}.png"))
        expected = _read(os.path.join(FIXTURES, "expected", f"{name}.png"))
        out = refine_mask(src, RefineParams())
        assert np.array_equal(out, expected)
        assert len(components_oracle(out)) == 1

    def test_all_zero(self):
        assert refine_mask(np.zeros((12, 12), np.uint8)).sum() == 0

    def test_deterministic(self):
        src = _read(os.path.join(FIXTURES, "speckle.png"))
        assert np.array_equal(refine_mask(src), refine_mask(src.copy()))

    def test_bad_params(self):
        with pytest.raises(InvalidKernel):
            RefineParams(median_kernel=4)
        with pytest.raises(InvalidKernel):
            RefineParams(erode_kernel=-1)


class TestApplyMask:
    def test_all_ones(self):
        s = _sample(np.random.default_rng(0), 8, 8)
        assert np.array_equal(apply_mask(s, np.ones((8, 8))).pixels, s.pixels)

    def test_all_zeros(self):
        s = _sample(np.random.default_rng(0), 8, 8)
        assert np.all(apply_mask(s, np.zeros((8, 8)), -1.0).pixels == -1.0)

    def test_checkerboard_oracle(self):
        s = _sample(np.random.default_rng(0), 8, 8)
        mask = (np.indices((8, 8)).sum(0) % 2).astype(np.uint8)
        out = apply_mask(s, mask, 0.25).pixels
        for y in range(8):
            for x in range(8):
                expected = s.pixels[y, x] if mask[y, x] else np.full(3, 0.25, np.float32)
                assert np.array_equal(out[y, x], expected)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            apply_mask(_sample(np.random.default_rng(0), 8, 8), np.ones((4, 4)))

    @settings(max_examples=20, deadline=None)
    @given(arrays(np.uint8, (6, 6), elements=st.integers(0, 1)), st.floats(-1, 1))
    def test_idempotent(self, mask, fill):
        s = _sample(np.random.default_rng(3), 6, 6)
        once = apply_mask(s, mask, fill)
        twice = apply_mask(once, mask, fill)
        assert np.array_equal(once.pixels, twice.pixels)
