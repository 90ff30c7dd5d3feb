"""Synthetic shape-segmentation data, on-disk dataset I/O, and augmentation."""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .pnm import read_pnm, write_pnm

IGNORE = 255
SHAPE_KINDS = ("rect", "circle", "triangle")
MIN_SIZE_FRAC, MAX_SIZE_FRAC = 0.10, 0.40
PIXEL_NOISE = 0.03
COLOR_JITTER = 0.04


@dataclass
class SegSample:
    image: np.ndarray  # 3 x S x S float32 in [0, 1]
    labels: np.ndarray  # S x S uint8, class ids or IGNORE

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must be 3 x S x S, got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise DataError("labels must match image extents")


def class_colors(num_classes: int) -> np.ndarray:
    """Mean RGB per foreground class (row 0 unused): evenly spaced saturated hues."""
    colors = np.zeros((num_classes, 3))
    for c in range(1, num_classes):
        colors[c] = colorsys.hsv_to_rgb((c - 1) / (num_classes - 1), 0.85, 0.9)
    return colors


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    lo = max(1, int(math.ceil(MIN_SIZE_FRAC * size)))
    hi = max(lo, int(math.floor(MAX_SIZE_FRAC * size)))
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rect":
        bw, bh = rng.integers(lo, hi + 1, size=2)
        x0 = rng.integers(0, size - bw + 1)
        y0 = rng.integers(0, size - bh + 1)
        return (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
    if kind == "circle":
        d = int(rng.integers(lo, hi + 1))
        r = d / 2.0
        cx = rng.uniform(r, size - r)
        cy = rng.uniform(r, size - r)
        return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    if kind == "triangle":
        bw, bh = rng.integers(lo, hi + 1, size=2)
        x0 = rng.integers(0, size - bw + 1)
        y0 = rng.integers(0, size - bh + 1)
        apex = x0 + rng.uniform(0, bw)
        # apex on top edge, base on the bottom edge of the bounding box
        t = (yy + 0.5 - y0) / bh
        left = apex + (x0 - apex) * t
        right = apex + (x0 + bw - apex) * t
        return (t >= 0) & (t <= 1) & (xx + 0.5 >= left) & (xx + 0.5 <= right)
    raise ConfigError(f"unknown shape kind {kind!r}")


def gen_synthetic(
    seed: int,
    count: int,
    size: int,
    num_classes: int,
    shapes_per_image: tuple = (2, 5),
    kinds: tuple = SHAPE_KINDS,
) -> list:
    """Deterministic images of coloured shapes on a grey background.

    Class 0 is background. Foreground classes are told apart by colour; the
    shape kind is random. The last (topmost, never occluded) shape of sample
    ``i`` has class ``1 + i % (K - 1)``, so every foreground class is visible
    in at least ``count // (K - 1)`` samples.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if size < 32 or size % 32:
        raise ConfigError("size must be a multiple of 32, at least 32")
    lo_n, hi_n = shapes_per_image
    if not 1 <= lo_n <= hi_n:
        raise ConfigError("shapes_per_image must satisfy 1 <= min <= max")
    rng = np.random.default_rng(seed)
    means = class_colors(num_classes)
    fg = num_classes - 1
    samples = []
    for i in range(count):
        base = rng.uniform(0.3, 0.6)
        image = np.empty((3, size, size))
        image[:] = base + rng.normal(0, 0.02, size=3)[:, None, None]
        labels = np.zeros((size, size), dtype=np.uint8)
        n_shapes = int(rng.integers(lo_n, hi_n + 1))
        classes = list(rng.integers(1, fg + 1, size=n_shapes - 1)) + [1 + i % fg]
        for cls in classes:
            kind = kinds[int(rng.integers(len(kinds)))]
            mask = _shape_mask(kind, size, rng)
            color = np.clip(means[cls] + rng.normal(0, COLOR_JITTER, size=3), 0, 1)
            image[:, mask] = color[:, None]
            labels[mask] = cls
        image += rng.normal(0, PIXEL_NOISE, size=image.shape)
        samples.append(SegSample(np.clip(image, 0, 1).astype(np.float32), labels))
    return samples


def frequency_bounds(count: int, size: int, num_classes: int, shapes_per_image: tuple = (2, 5)) -> np.ndarray:
    """Per-class (low, high) pixel-frequency bounds implied by the generator.

    The topmost shape is unoccluded and no smaller than a triangle of minimal
    extent; all shapes together cover at most ``max_shapes`` maximal boxes.
    """
    fg = num_classes - 1
    lo_side = max(1, int(math.ceil(MIN_SIZE_FRAC * size)))
    hi_side = max(lo_side, int(math.floor(MAX_SIZE_FRAC * size)))
    min_top = (lo_side * lo_side) / 2.0 - lo_side  # discretized triangle, conservative
    max_cover = min(1.0, shapes_per_image[1] * hi_side * hi_side / (size * size))
    bounds = np.zeros((num_classes, 2))
    bounds[0] = (1.0 - max_cover, 1.0)
    per_class_tops = count // fg
    for c in range(1, num_classes):
        bounds[c] = (per_class_tops * max(min_top, 0) / (count * size * size), max_cover)
    return bounds


# --------------------------------------------------------------------- disk I/O


def save_dataset(samples: list, out_dir, seed: int, num_classes: int) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    size = samples[0].labels.shape[0] if samples else 0
    meta = f"num_classes={num_classes}\ncount={len(samples)}\nsize={size}\nseed={seed}\n"
    (out / "meta.txt").write_text(meta)
    for i, s in enumerate(samples):
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        write_pnm(out / "images" / f"{i:05d}.ppm", b"P6", rgb)
        write_pnm(out / "labels" / f"{i:05d}.pgm", b"P5", s.labels)


def read_meta(data_dir) -> dict:
    meta = {}
    for line in Path(data_dir, "meta.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = int(value.strip())
    return meta


def load_dataset(data_dir) -> tuple:
    """Return ``(samples, meta)``; images are quantized to 8 bits on disk."""
    root = Path(data_dir)
    meta = read_meta(root)
    samples = []
    for i in range(meta["count"]):
        rgb = read_pnm(root / "images" / f"{i:05d}.ppm", b"P6")
        labels = read_pnm(root / "labels" / f"{i:05d}.pgm", b"P5")
        image = rgb.transpose(2, 0, 1).astype(np.float32) / 255
        bad = (labels != IGNORE) & (labels >= meta["num_classes"])
        if bad.any():
            raise DataError(f"{root}: sample {i} has label >= num_classes")
        samples.append(SegSample(image, labels))
    return samples, meta


# ------------------------------------------------------------------ augmentation


def _source_index(out_size: int, in_size: int) -> np.ndarray:
    return (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5


def resize_image(image: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of a C x S x S array (pixel-centre convention)."""
    s = image.shape[1]
    src = np.clip(_source_index(out_size, s), 0, s - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), max(s - 2, 0))
    i1 = np.minimum(i0 + 1, s - 1)
    f = (src - i0).astype(image.dtype)
    rows = image[:, i0, :] * (1 - f)[None, :, None] + image[:, i1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]


def resize_labels(labels: np.ndarray, out_size: int) -> np.ndarray:
    s = labels.shape[0]
    idx = np.minimum(np.floor((np.arange(out_size) + 0.5) * (s / out_size)).astype(np.intp), s - 1)
    return labels[idx][:, idx]


def augment(sample: SegSample, rng: np.random.Generator, scale_range=(0.75, 2.0)) -> SegSample:
    """Random horizontal flip, scale jitter, then crop (or pad) back to S x S."""
    image, labels = sample.image, sample.labels
    s = labels.shape[0]
    if rng.random() < 0.5:
        image, labels = image[:, :, ::-1], labels[:, ::-1]
    new = max(1, int(round(s * rng.uniform(*scale_range))))
    image, labels = resize_image(image, new), resize_labels(labels, new)
    if new >= s:
        y0, x0 = rng.integers(0, new - s + 1, size=2)
        image = image[:, y0:y0 + s, x0:x0 + s]
        labels = labels[y0:y0 + s, x0:x0 + s]
    else:
        y0, x0 = rng.integers(0, s - new + 1, size=2)
        canvas = np.zeros((3, s, s), dtype=image.dtype)
        lab = np.full((s, s), IGNORE, dtype=labels.dtype)
        canvas[:, y0:y0 + new, x0:x0 + new] = image
        lab[y0:y0 + new, x0:x0 + new] = labels
        image, labels = canvas, lab
    return SegSample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(labels))


def stack(samples: list) -> tuple:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return images, labels
