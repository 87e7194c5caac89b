"""Synthetic segmentation scenes for desk-scale training.

Each scene is a noisy background (class 0) with one or two colored shapes
(axis-aligned rectangles or circles) per foreground class. Colors and
textures are class-specific, so classes are separable by local appearance
and expert specialization by class is observable. Generation is
deterministic in the seed and retries until every class is present in the
mask.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from .tensor import Tensor

# Base colors per class id; foreground entries cycle for C_cls > 8.
_PALETTE = np.array(
    [
        [0.20, 0.20, 0.22],  # background
        [0.85, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.90],
        [0.90, 0.80, 0.20],
        [0.75, 0.25, 0.80],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.15],
    ]
)


@dataclass
class SceneSample:
    image: Tensor  # [1, 3, H, W], values in [0, 1]
    mask: np.ndarray  # [H, W] int class ids
    seed: int


def _paint(image, mask, region, cls, color, rng):
    jitter = rng.normal(0.0, 0.04, size=3)
    for ch in range(3):
        image[ch][region] = np.clip(color[ch] + jitter[ch], 0.05, 0.95)
    mask[region] = cls


def generate_scene(seed, h=64, w=64, n_classes=4):
    """Deterministic synthetic scene: image [1, 3, H, W] plus class mask."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes (background + 1)")
    if h < 16 or w < 16:
        raise ConfigError("scene dimensions must be >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    while True:
        image = np.empty((3, h, w))
        base = _PALETTE[0]
        for ch in range(3):
            image[ch] = base[ch]
        mask = np.zeros((h, w), dtype=np.int64)
        for cls in range(1, n_classes):
            color = _PALETTE[(cls - 1) % (len(_PALETTE) - 1) + 1]
            for _ in range(int(rng.integers(1, 3))):
                size = int(rng.integers(max(6, h // 6), max(8, h // 3)))
                cy = int(rng.integers(size // 2, h - size // 2))
                cx = int(rng.integers(size // 2, w - size // 2))
                if rng.random() < 0.5:
                    region = (abs(yy - cy) <= size // 2) & (abs(xx - cx) <= size // 2)
                else:
                    region = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size // 2) ** 2
                _paint(image, mask, region, cls, color, rng)
        # Class-specific stripe texture keeps appearance locally informative.
        for cls in range(1, n_classes):
            sel = mask == cls
            if sel.any():
                stripes = 0.04 * np.sin(2.0 * np.pi * (yy + cls * xx) / (4.0 + cls))
                image[cls % 3][sel] += stripes[sel]
        image += rng.normal(0.0, 0.03, size=image.shape)
        np.clip(image, 0.0, 1.0, out=image)
        if len(np.unique(mask)) == n_classes:
            return SceneSample(image=Tensor(image[None]), mask=mask, seed=int(seed))


def sample_seed(base_seed, index, validation=False):
    """Per-sample seed stream; validation samples live in a disjoint block."""
    return int(base_seed) * 10_000_000 + (5_000_000 if validation else 0) + int(index)


def make_dataset(base_seed, n, h=64, w=64, n_classes=4, validation=False):
    return [
        generate_scene(sample_seed(base_seed, i, validation), h, w, n_classes)
        for i in range(n)
    ]


def export_dataset(samples, out_dir):
    """Write images as PPM (P6), masks as PGM (P5), plus a manifest file."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name = f"sample_{i:04d}.ppm"
        mask_name = f"sample_{i:04d}_mask.pgm"
        rgb = np.rint(s.image.data[0].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        write_ppm(os.path.join(out_dir, img_name), rgb)
        write_pgm(os.path.join(out_dir, mask_name), s.mask.astype(np.uint8))
        lines.append(f"{s.seed} {img_name} {mask_name}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def import_dataset(in_dir):
    """Read a dataset written by export_dataset (images are 8-bit quantized)."""
    manifest = os.path.join(in_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataError(f"missing dataset manifest: {manifest}")
    samples = []
    with open(manifest) as f:
        for line in f:
            if not line.strip():
                continue
            seed, img_name, mask_name = line.split()
            rgb = read_ppm(os.path.join(in_dir, img_name)).astype(np.float64) / 255.0
            mask = read_pgm(os.path.join(in_dir, mask_name)).astype(np.int64)
            samples.append(
                SceneSample(image=Tensor(rgb.transpose(2, 0, 1)[None]), mask=mask, seed=int(seed))
            )
    return samples
