"""Colour coding for flows, feature maps, gates and label maps; binary PPM I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import IGNORE
from .errors import DataError
from .pnm import read_pnm, write_pnm


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # height x width x 3, uint8

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise DataError(f"pixel buffer {self.pixels.shape} != ({self.height}, {self.width}, 3)")


def _as_plane(x, channels: int) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if channels and arr.shape[0] != channels:
        raise DataError(f"expected {channels} channels, got {arr.shape[0]}")
    return arr


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sextant HSV->RGB; ``h`` in degrees [0, 360), ``s, v`` in [0, 1]."""
    c = v * s
    hp = (h % 360.0) / 60.0
    x = c * (1 - np.abs(hp % 2 - 1))
    sextant = np.floor(hp).astype(int) % 6
    zero = np.zeros_like(c)
    table = [(c, x, zero), (x, c, zero), (zero, c, x), (zero, x, c), (x, zero, c), (c, zero, x)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        m = sextant == k
        rgb[m] = np.stack([r[m], g[m], b[m]], axis=-1)
    rgb += (v - c)[..., None]
    return rgb


def _to_bytes(rgb01: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(rgb01 * 255 + 0.5), 0, 255).astype(np.uint8)


def flow_to_rgb(flow, max_mag: float | None = None) -> RgbImage:
    """Hue encodes direction ``atan2(dy, dx)``, saturation encodes magnitude."""
    f = _as_plane(flow, 2)
    if not np.all(np.isfinite(f)):
        raise DataError("flow contains non-finite values")
    dx, dy = f[0], f[1]
    mag = np.hypot(dx, dy)
    scale = float(mag.max()) if max_mag is None else float(max_mag)
    h, w = dx.shape
    if scale <= 0:
        return RgbImage(w, h, np.full((h, w, 3), 255, dtype=np.uint8))
    hue = np.degrees(np.arctan2(dy, dx)) % 360.0
    sat = np.minimum(1.0, mag / scale)
    return RgbImage(w, h, _to_bytes(hsv_to_rgb(hue, sat, np.ones_like(sat))))


def heat_table() -> np.ndarray:
    """256 entries running linearly from blue (cold) to red (hot)."""
    i = np.arange(256)
    return np.stack([i, np.zeros(256, dtype=int), 255 - i], axis=1).astype(np.uint8)


def feature_heatmap(feature) -> RgbImage:
    """Channel mean, min-max normalized, through :func:`heat_table`."""
    f = _as_plane(feature, 0)
    if f.shape[0] < 1:
        raise DataError("feature needs at least one channel")
    m = f.mean(axis=0)
    lo, hi = float(m.min()), float(m.max())
    norm = np.full_like(m, 0.5) if hi == lo else (m - lo) / (hi - lo)
    idx = np.clip(np.floor(norm * 255 + 0.5), 0, 255).astype(int)
    h, w = m.shape
    return RgbImage(w, h, heat_table()[idx])


def gate_to_rgb(gate) -> RgbImage:
    """Grey level ``255 * gate`` for a single-channel map in [0, 1]."""
    g = _as_plane(gate, 1)[0]
    v = _to_bytes(np.clip(g, 0, 1))
    h, w = g.shape
    return RgbImage(w, h, np.repeat(v[:, :, None], 3, axis=2))


def default_palette(num_classes: int) -> np.ndarray:
    from .data import class_colors

    pal = _to_bytes(class_colors(num_classes))
    pal[0] = (128, 128, 128)
    return pal


def label_to_rgb(labels: np.ndarray, palette: np.ndarray) -> RgbImage:
    """Ignore pixels are black; other labels must index ``palette``."""
    labels = np.asarray(labels)
    k = len(palette)
    valid = labels != IGNORE
    if np.any(labels[valid] >= k) or np.any(labels < 0):
        raise DataError(f"label outside [0, {k}) and not {IGNORE}")
    h, w = labels.shape
    pixels = np.zeros((h, w, 3), dtype=np.uint8)
    pixels[valid] = np.asarray(palette, dtype=np.uint8)[labels[valid]]
    return RgbImage(w, h, pixels)


def write_ppm(image: RgbImage, path) -> None:
    write_pnm(path, b"P6", image.pixels)


def read_ppm(path) -> RgbImage:
    pixels = read_pnm(path, b"P6")
    return RgbImage(pixels.shape[1], pixels.shape[0], pixels)
