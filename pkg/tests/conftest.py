import os
import sys

import numpy as np
import pytest
import torch
from PIL import Image

sys.path.insert(0, os.path.dirname(__file__))

from handgan.dataio import DomainTag, ImageSample  # noqa: E402

torch.set_num_threads(1)


def hand_like_samples(rng, tint, domain, n=16, size=64):
    """Shaded disks ("hands") on a horizontal-gradient background, each with its mask."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    out = []
    for _ in range(n):
        cy, cx = rng.uniform(0.35, 0.65, 2)
        r = rng.uniform(0.2, 0.3)
        dist = np.hypot(yy - cy, xx - cx) / r
        mask = (dist < 1).astype(np.uint8)
        shade = 1 - 0.3 * dist
        img = np.stack([np.where(mask, tint[c] * shade, -0.8 + 0.3 * xx) for c in range(3)], -1)
        out.append(ImageSample(img.astype(np.float32).clip(-1, 1), domain, mask))
    return out


SYN_TINT = (0.9, 0.5, 0.4)
REAL_TINT = (0.6, 0.3, 0.1)


def write_domain(root, samples, with_masks=True):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    if with_masks:
        os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for i, s in enumerate(samples):
        u8 = np.round((s.pixels + 1) * 127.5).astype(np.uint8)
        Image.fromarray(u8).save(os.path.join(root, "images", f"{i:03d}.png"))
        if with_masks and s.mask is not None:
            Image.fromarray(s.mask * 255).save(os.path.join(root, "masks", f"{i:03d}.png"))


@pytest.fixture
def toy_dataset(tmp_path):
    """``root/{synthetic,real}/{images,masks}`` with 4 hand-like 64x64 images per domain."""
    rng = np.random.default_rng(0)
    root = tmp_path / "data"
    write_domain(str(root / "synthetic"), hand_like_samples(rng, SYN_TINT, DomainTag.SYNTHETIC, n=4))
    write_domain(str(root / "real"), hand_like_samples(rng, REAL_TINT, DomainTag.REAL, n=4))
    return root


def solid_image(value_u8, size=16):
    return np.full((size, size, 3), value_u8, np.uint8)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
