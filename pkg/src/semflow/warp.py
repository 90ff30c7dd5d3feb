"""Flow-driven bilinear warping between grids of integral resolution ratio.

An output pixel ``p = (x, y)`` on the fine ``H x W`` grid samples the coarse
``h x w`` feature at ``q = (p + flow(p)) / r``. Coordinates are clamped to the
border, then the four lattice neighbours of ``q`` are blended bilinearly.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DataError, DimensionError
from .tensor import Tensor, make_result


def _bilinear_sample(feature: Tensor, qx: np.ndarray, qy: np.ndarray, flow: Tensor | None, ratio: float) -> Tensor:
    """Sample ``feature`` at raw coordinates ``qx, qy`` of shape (N, H, W).

    When ``flow`` is given, the coordinates are ``(p + flow) / ratio`` and the
    backward rule also returns the flow gradient.
    """
    fd = feature.data
    n, c, h, w = fd.shape
    out_h, out_w = qx.shape[1], qx.shape[2]
    hw, out_hw = h * w, out_h * out_w

    qxc = np.clip(qx, 0, w - 1)
    qyc = np.clip(qy, 0, h - 1)
    x0 = np.minimum(np.floor(qxc), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(qyc), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (qxc - x0).astype(fd.dtype).reshape(n, 1, out_hw)
    fy = (qyc - y0).astype(fd.dtype).reshape(n, 1, out_hw)

    flat = fd.reshape(n, c, hw)
    idx = [(iy * w + ix).reshape(n, 1, out_hw) for iy, ix in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    v00, v01, v10, v11 = (np.take_along_axis(flat, i, axis=2) for i in idx)
    gx, gy = 1 - fx, 1 - fy
    out = (v00 * gx + v01 * fx) * gy + (v10 * gx + v11 * fx) * fy
    out = out.reshape(n, c, out_h, out_w)

    def backward(g):
        g3 = g.reshape(n, c, out_hw)
        gfeat = None
        if feature.requires_grad:
            base = (np.arange(n * c, dtype=np.intp) * hw).reshape(n, c, 1)
            acc = np.zeros(n * c * hw, dtype=np.float64)
            for i, wgt in zip(idx, (gx * gy, fx * gy, gx * fy, fx * fy)):
                acc += np.bincount((base + i).ravel(), weights=(g3 * wgt).ravel(), minlength=n * c * hw)
            gfeat = acc.astype(fd.dtype).reshape(fd.shape)
        if flow is None:
            return (gfeat,)
        gflow = None
        if flow.requires_grad:
            d_qx = ((v01 - v00) * gy + (v11 - v10) * fy) * g3
            d_qy = ((v10 - v00) * gx + (v11 - v01) * fx) * g3
            d_qx = d_qx.sum(axis=1).reshape(n, out_h, out_w)
            d_qy = d_qy.sum(axis=1).reshape(n, out_h, out_w)
            # clamped sampling is locally constant along an axis outside the grid
            d_qx[(qx < 0) | (qx > w - 1)] = 0
            d_qy[(qy < 0) | (qy > h - 1)] = 0
            if w == 1:
                d_qx[...] = 0
            if h == 1:
                d_qy[...] = 0
            gflow = (np.stack([d_qx, d_qy], axis=1) / ratio).astype(flow.dtype)
        return gfeat, gflow

    parents = (feature,) if flow is None else (feature, flow)
    return make_result(out, parents, backward, "grid_warp")


def _check_feature_flow(feature: Tensor, flow: Tensor, ratio: int) -> None:
    if feature.ndim != 4 or flow.ndim != 4:
        raise DimensionError("grid_warp: feature and flow must be 4-D")
    if not isinstance(ratio, (int, np.integer)) or ratio < 1:
        raise DimensionError(f"grid_warp: ratio must be a positive int, got {ratio!r}")
    n, _, h, w = feature.shape
    fn, fc, fh, fw = flow.shape
    if fc != 2:
        raise DimensionError(f"grid_warp: flow must have 2 channels, got {fc}")
    if fn != n:
        raise DimensionError(f"grid_warp: batch mismatch {n} vs {fn}")
    if fh != ratio * h or fw != ratio * w:
        raise DimensionError(f"grid_warp: flow grid {fh}x{fw} != {ratio} x feature grid {h}x{w}")
    if not np.all(np.isfinite(flow.data)):
        raise DataError("grid_warp: flow contains non-finite values")


def grid_warp(feature: Tensor, flow: Tensor, ratio: int) -> Tensor:
    """Warp an ``N x C x h x w`` feature onto the ``r``-times finer flow grid.

    ``flow`` is ``N x 2 x rh x rw`` with channel 0 the horizontal and channel 1
    the vertical displacement, in fine-grid pixels.
    """
    _check_feature_flow(feature, flow, ratio)
    n, _, big_h, big_w = flow.shape
    dt = flow.dtype
    ys = np.arange(big_h, dtype=dt)[None, :, None]
    xs = np.arange(big_w, dtype=dt)[None, None, :]
    qx = (xs + flow.data[:, 0]) / dt.type(ratio)
    qy = (ys + flow.data[:, 1]) / dt.type(ratio)
    return _bilinear_sample(feature, qx, qy, flow, ratio)


def bilinear_upsample(feature: Tensor, ratio: int) -> Tensor:
    """Zero-flow :func:`grid_warp`; exactly the baseline FPN upsampling."""
    if feature.ndim != 4:
        raise DimensionError("bilinear_upsample: feature must be 4-D")
    n, _, h, w = feature.shape
    zero = Tensor(np.zeros((n, 2, ratio * h, ratio * w), dtype=feature.dtype))
    return grid_warp(feature, zero, ratio)


def bilinear_resize(feature: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize to arbitrary extents with the same convention, ``q = p * in / out``."""
    if feature.ndim != 4:
        raise DimensionError("bilinear_resize: feature must be 4-D")
    n, _, h, w = feature.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize: output extents must be positive")
    if out_h % h == 0 and out_w % w == 0 and out_h // h == out_w // w:
        return bilinear_upsample(feature, out_h // h)
    dt = feature.dtype
    qy = np.broadcast_to((np.arange(out_h, dtype=np.float64) * (h / out_h)).astype(dt)[None, :, None], (n, out_h, out_w))
    qx = np.broadcast_to((np.arange(out_w, dtype=np.float64) * (w / out_w)).astype(dt)[None, None, :], (n, out_h, out_w))
    return _bilinear_sample(feature, qx, qy, None, 1)


def warp_oracle(feature: Tensor, flow: Tensor, ratio: int) -> Tensor:
    """Reference warp: one Python loop iteration per output pixel, float64."""
    _check_feature_flow(feature, flow, ratio)
    f = np.asarray(feature.data, dtype=np.float64)
    fl = np.asarray(flow.data, dtype=np.float64)
    n, c, h, w = f.shape
    big_h, big_w = fl.shape[2], fl.shape[3]
    out = np.zeros((n, c, big_h, big_w), dtype=np.float64)
    for b in range(n):
        for y in range(big_h):
            for x in range(big_w):
                sx = (x + float(fl[b, 0, y, x])) / ratio
                sy = (y + float(fl[b, 1, y, x])) / ratio
                sx = min(max(sx, 0.0), w - 1.0)
                sy = min(max(sy, 0.0), h - 1.0)
                left = max(min(int(math.floor(sx)), w - 2), 0)
                top = max(min(int(math.floor(sy)), h - 2), 0)
                right = left + 1 if left + 1 < w else left
                bottom = top + 1 if top + 1 < h else top
                ax, ay = sx - left, sy - top
                neighbours = (
                    (top, left, (1.0 - ax) * (1.0 - ay)),
                    (top, right, ax * (1.0 - ay)),
                    (bottom, left, (1.0 - ax) * ay),
                    (bottom, right, ax * ay),
                )
                for ch in range(c):
                    acc = 0.0
                    for iy, ix, wgt in neighbours:
                        acc += wgt * f[b, ch, iy, ix]
                    out[b, ch, y, x] = acc
    return Tensor(out)
