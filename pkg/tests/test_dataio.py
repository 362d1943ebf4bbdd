import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from handgan.dataio import (
    DomainTag,
    EpochSampler,
    ImageSample,
    IndexEntry,
    composite_background,
    load_sample,
    make_unpaired_batch,
    masks_to_tensor,
    random_crop,
    samples_to_tensor,
    scan_domain_dir,
)
from handgan.errors import (
    CropTooLarge,
    DecodeError,
    EmptyDataset,
    InvalidBatchSize,
    MaskRequired,
    ShapeMismatch,
)


def _write(path, array):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(array).save(path)


def _rand_sample(rng, size=32, mask=False):
    px = rng.uniform(-1, 1, (size, size, 3)).astype(np.float32)
    m = (rng.random((size, size)) > 0.5).astype(np.uint8) if mask else None
    return ImageSample(px, DomainTag.SYNTHETIC, m)


class TestScan:
    def test_images_without_masks(self, tmp_path):
        for name in ("b.png", "a.png", "c.png"):
            _write(str(tmp_path / "images" / name), np.zeros((8, 8, 3), np.uint8))
        index = scan_domain_dir(str(tmp_path), DomainTag.REAL)
        assert index.count == 3
        assert [os.path.basename(e.image_path) for e in index.entries] == ["a.png", "b.png", "c.png"]
        assert all(e.mask_path is None for e in index.entries)

    def test_masks_joined_by_filename(self, tmp_path):
        for name in ("a.png", "b.png", "c.png"):
            _write(str(tmp_path / "images" / name), np.zeros((8, 8, 3), np.uint8))
            _write(str(tmp_path / "masks" / name), np.zeros((8, 8), np.uint8))
        index = scan_domain_dir(str(tmp_path), DomainTag.SYNTHETIC)
        for e in index.entries:
            assert os.path.basename(e.mask_path) == os.path.basename(e.image_path)

    def test_empty_images_dir(self, tmp_path):
        os.makedirs(tmp_path / "images")
        with pytest.raises(EmptyDataset):
            scan_domain_dir(str(tmp_path), DomainTag.REAL)


class TestLoad:
    def test_black_maps_to_minus_one(self, tmp_path):
        _write(str(tmp_path / "k.png"), np.zeros((8, 8, 3), np.uint8))
        s = load_sample(IndexEntry(str(tmp_path / "k.png")), DomainTag.REAL)
        assert np.all(s.pixels == -1.0)

    def test_white_maps_to_plus_one(self, tmp_path):
        _write(str(tmp_path / "w.png"), np.full((8, 8, 3), 255, np.uint8))
        s = load_sample(IndexEntry(str(tmp_path / "w.png")), DomainTag.REAL)
        assert np.all(s.pixels == 1.0)

    def test_mask_shape_mismatch(self, tmp_path):
        _write(str(tmp_path / "i.png"), np.zeros((128, 128, 3), np.uint8))
        _write(str(tmp_path / "m.png"), np.zeros((64, 64), np.uint8))
        with pytest.raises(ShapeMismatch):
            load_sample(IndexEntry(str(tmp_path / "i.png"), str(tmp_path / "m.png")), DomainTag.REAL)

    def test_mask_threshold(self, tmp_path):
        _write(str(tmp_path / "i.png"), np.zeros((4, 4, 3), np.uint8))
        m = np.array([[0, 127, 128, 255]] * 4, np.uint8)
        _write(str(tmp_path / "m.png"), m)
        s = load_sample(IndexEntry(str(tmp_path / "i.png"), str(tmp_path / "m.png")), DomainTag.REAL)
        assert s.mask[0].tolist() == [0, 0, 1, 1]

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(DecodeError):
            load_sample(IndexEntry(str(tmp_path / "bad.png")), DomainTag.REAL)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
    def test_range_property(self, r, g, b):
        from handgan.dataio import uint8_to_unit

        px = uint8_to_unit(np.array([[[r, g, b]]], np.uint8))
        assert np.all(px >= -1) and np.all(px <= 1)


class TestCrop:
    def test_full_size_crop_is_identity(self):
        s = _rand_sample(np.random.default_rng(0), 32, mask=True)
        out = random_crop(s, 32, np.random.default_rng(5))
        assert np.array_equal(out.pixels, s.pixels)
        assert np.array_equal(out.mask, s.mask)

    def test_same_seed_same_crop(self):
        s = _rand_sample(np.random.default_rng(0), 256)
        a = random_crop(s, 128, np.random.default_rng(42))
        b = random_crop(s, 128, np.random.default_rng(42))
        assert np.array_equal(a.pixels, b.pixels)

    def test_too_large(self):
        s = _rand_sample(np.random.default_rng(0), 256)
        with pytest.raises(CropTooLarge):
            random_crop(s, 512, np.random.default_rng(0))

    def test_mask_uses_same_offsets(self):
        rng = np.random.default_rng(1)
        px = rng.uniform(-1, 1, (40, 40, 3)).astype(np.float32)
        # mask encodes a pixel's own parity so misaligned crops are detectable
        mask = (px[..., 0] > 0).astype(np.uint8)
        out = random_crop(ImageSample(px, DomainTag.REAL, mask), 16, np.random.default_rng(3))
        assert np.array_equal(out.mask, (out.pixels[..., 0] > 0).astype(np.uint8))


class TestBatch:
    def test_single_item_indices(self, toy_dataset):
        from handgan.dataio import DatasetIndex

        syn = scan_domain_dir(str(toy_dataset / "synthetic"), DomainTag.SYNTHETIC)
        real = scan_domain_dir(str(toy_dataset / "real"), DomainTag.REAL)
        syn1 = DatasetIndex(syn.domain, syn.entries[:1])
        real1 = DatasetIndex(real.domain, real.entries[:1])
        batch = make_unpaired_batch(syn1, real1, 1, 64, np.random.default_rng(0))
        assert batch.synthetic[0].source_path == syn1.entries[0].image_path
        assert batch.real[0].source_path == real1.entries[0].image_path

    def test_reproducible(self, toy_dataset):
        syn = scan_domain_dir(str(toy_dataset / "synthetic"), DomainTag.SYNTHETIC)
        real = scan_domain_dir(str(toy_dataset / "real"), DomainTag.REAL)
        a = make_unpaired_batch(syn, real, 4, 32, np.random.default_rng(9))
        b = make_unpaired_batch(syn, real, 4, 32, np.random.default_rng(9))
        assert [s.source_path for s in a.synthetic] == [s.source_path for s in b.synthetic]
        for x, y in zip(a.real, b.real):
            assert np.array_equal(x.pixels, y.pixels)

    def test_zero_batch(self, toy_dataset):
        syn = scan_domain_dir(str(toy_dataset / "synthetic"), DomainTag.SYNTHETIC)
        with pytest.raises(InvalidBatchSize):
            make_unpaired_batch(syn, syn, 0, 32, np.random.default_rng(0))

    def test_absent_masks_propagate(self, tmp_path):
        for name in ("a.png", "b.png"):
            _write(str(tmp_path / "s" / "images" / name), np.zeros((16, 16, 3), np.uint8))
            _write(str(tmp_path / "r" / "images" / name), np.zeros((16, 16, 3), np.uint8))
        _write(str(tmp_path / "r" / "masks" / "a.png"), np.full((16, 16), 255, np.uint8))
        syn = scan_domain_dir(str(tmp_path / "s"), DomainTag.SYNTHETIC)
        real = scan_domain_dir(str(tmp_path / "r"), DomainTag.REAL)
        batch = make_unpaired_batch(syn, real, 2, 8, np.random.default_rng(0))
        assert all(s.mask is None for s in batch.synthetic)
        assert masks_to_tensor(batch.synthetic) is None
        by_name = {os.path.basename(s.source_path): s for s in batch.real}
        assert by_name["b.png"].mask is None
        assert by_name["a.png"].mask is not None

    def test_epoch_sampler_visits_everything(self):
        s = EpochSampler(5, np.random.default_rng(0))
        first = s.take(5)
        assert sorted(first) == list(range(5))
        assert sorted(s.take(5)) == list(range(5))


class TestComposite:
    def test_all_ones_mask_keeps_sample(self):
        rng = np.random.default_rng(0)
        s = _rand_sample(rng, 16)
        s.mask = np.ones((16, 16), np.uint8)
        bg = _rand_sample(rng, 32)
        out = composite_background(s, bg, np.random.default_rng(1))
        assert np.array_equal(out.pixels, s.pixels)
        assert out.mask is None

    def test_all_zero_mask_gives_background_crop(self):
        rng = np.random.default_rng(0)
        s = _rand_sample(rng, 16)
        s.mask = np.zeros((16, 16), np.uint8)
        bg = _rand_sample(rng, 16)
        out = composite_background(s, bg, np.random.default_rng(1))
        assert np.array_equal(out.pixels, bg.pixels)

    def test_half_plane_against_per_pixel_oracle(self):
        rng = np.random.default_rng(0)
        s = _rand_sample(rng, 16)
        s.mask = np.zeros((16, 16), np.uint8)
        s.mask[:, :8] = 1
        bg = _rand_sample(rng, 16)
        out = composite_background(s, bg, np.random.default_rng(1))
        for y in range(16):
            for x in range(16):
                expected = s.pixels[y, x] if x < 8 else bg.pixels[y, x]
                assert np.array_equal(out.pixels[y, x], expected)

    def test_mask_required(self):
        rng = np.random.default_rng(0)
        with pytest.raises(MaskRequired):
            composite_background(_rand_sample(rng, 16), _rand_sample(rng, 16), rng)


def test_tensor_layout():
    s = _rand_sample(np.random.default_rng(0), 8)
    t = samples_to_tensor([s, s])
    assert t.shape == (2, 3, 8, 8)
    assert float(t[1, 2, 3, 4]) == float(s.pixels[3, 4, 2])
