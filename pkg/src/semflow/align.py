"""Flow alignment blocks: FAM, gated dual FAM, and the pyramid pooling head."""
from __future__ import annotations

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import Conv2d, ConvNormAct, Module
from .tensor import Tensor, make_result
from .warp import bilinear_resize, bilinear_upsample, grid_warp

GATE_TARGETS = ("high_res", "low_res")
PPM_BINS = (1, 2, 3, 6)


class FlowHead(Module):
    """3x3 conv -> norm -> relu -> 3x3 conv; the last conv starts at zero."""

    def __init__(self, channels: int, out_channels: int, norm: str = "batchnorm"):
        super().__init__()
        self.conv1 = ConvNormAct(2 * channels, channels, 3, norm)
        self.conv2 = Conv2d(channels, out_channels, 3, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class FAM(Module):
    """Predicts a 2-channel flow from (upsampled low-res, high-res) and warps the low-res map."""

    def __init__(self, channels: int, norm: str = "batchnorm"):
        super().__init__()
        self.flow_head = FlowHead(channels, 2, norm)

    def __call__(self, f_low: Tensor, f_high: Tensor):
        return fam_forward(f_low, f_high, self)


def fam_forward(f_low: Tensor, f_high: Tensor, weights: FAM):
    """Return ``(warped, flow)``; ``warped`` has ``f_high``'s extents.

    Adding the warped map to ``f_high`` is left to the caller.
    """
    n, d, h, w = f_low.shape
    if f_high.shape != (n, d, 2 * h, 2 * w):
        raise DimensionError(f"fam_forward: high-res input {f_high.shape} must be {(n, d, 2 * h, 2 * w)}")
    up = bilinear_upsample(f_low, 2)
    flow = weights.flow_head(T.concat([up, f_high]))
    return grid_warp(f_low, flow, 2), flow


def split_flow(flows: Tensor) -> tuple:
    """Split a 4-channel flow map into (high-res flow, low-res flow)."""
    return T.slice_channels(flows, 0, 2), T.slice_channels(flows, 2, 4)


def gated_fuse(a: Tensor, b: Tensor, gate: Tensor) -> Tensor:
    """``gate * a + (1 - gate) * b`` with a 1-channel gate broadcast over channels."""
    if a.shape != b.shape:
        raise DimensionError(f"gated_fuse: shape mismatch {a.shape} vs {b.shape}")
    n, _, h, w = a.shape
    if gate.shape != (n, 1, h, w):
        raise DimensionError(f"gated_fuse: gate shape {gate.shape} must be {(n, 1, h, w)}")
    g = gate.data
    inv = 1 - g
    out = g * a.data + inv * b.data

    def backward(up):
        ga = up * g if a.requires_grad else None
        gb = up * inv if b.requires_grad else None
        gg = (up * (a.data - b.data)).sum(axis=1, keepdims=True) if gate.requires_grad else None
        return ga, gb, gg

    return make_result(out, (a, b, gate), backward, "gated_fuse")


class GDFAM(Module):
    """Gated dual flow alignment: two flows, one shared sigmoid gate."""

    def __init__(self, channels: int, norm: str = "batchnorm", gate_on: str = "high_res"):
        super().__init__()
        if gate_on not in GATE_TARGETS:
            raise ConfigError(f"gate_on must be one of {GATE_TARGETS}, got {gate_on!r}")
        self.flow_head = FlowHead(channels, 4, norm)
        self.gate_conv = Conv2d(4, 1, 1)
        self.gate_on = gate_on

    def __call__(self, f_high: Tensor, f_low: Tensor, ratio: int):
        return gdfam_forward(f_high, f_low, ratio, self)


def gdfam_forward(f_high: Tensor, f_low: Tensor, ratio: int, weights: GDFAM):
    """Return ``(fused, flow_high, flow_low, gate)`` on ``f_high``'s grid."""
    n, d, h, w = f_low.shape
    if f_high.shape != (n, d, ratio * h, ratio * w):
        raise DimensionError(
            f"gdfam_forward: high-res input {f_high.shape} must be {(n, d, ratio * h, ratio * w)}"
        )
    up = bilinear_upsample(f_low, ratio)
    flows = weights.flow_head(T.concat([up, f_high]))
    flow_high, flow_low = split_flow(flows)
    stats = T.concat([T.channel_avg(f_high), T.channel_avg(up), T.channel_max(f_high), T.channel_max(up)])
    gate = T.sigmoid(weights.gate_conv(stats))
    warped_high = grid_warp(f_high, flow_high, 1)
    warped_low = grid_warp(f_low, flow_low, ratio)
    if weights.gate_on == "high_res":
        fused = gated_fuse(warped_high, warped_low, gate)
    else:
        fused = gated_fuse(warped_low, warped_high, gate)
    return fused, flow_high, flow_low, gate


class PPM(Module):
    """Pyramid pooling: per-bin avg pool -> 1x1 conv to C/4 -> resize, concat, 3x3 conv."""

    def __init__(self, in_channels: int, out_channels: int, norm: str = "batchnorm", bins=PPM_BINS):
        super().__init__()
        if in_channels < 4:
            raise ConfigError("PPM needs at least 4 input channels")
        self.bins = tuple(bins)
        branch = in_channels // 4
        self.branches = [ConvNormAct(in_channels, branch, 1, norm) for _ in self.bins]
        self.bottleneck = ConvNormAct(in_channels + branch * len(self.bins), out_channels, 3, norm)

    def __call__(self, x: Tensor, clamp_bins: bool = False) -> Tensor:
        return ppm_forward(x, self, clamp_bins)


def ppm_forward(x: Tensor, weights: PPM, clamp_bins: bool = False) -> Tensor:
    """Context head; output keeps the input's spatial extents.

    With ``clamp_bins`` a bin count larger than the map is reduced to the map
    extent instead of raising.
    """
    n, c, h, w = x.shape
    outs = [x]
    for b, branch in zip(weights.bins, weights.branches):
        if b > h or b > w:
            if not clamp_bins:
                raise ConfigError(f"ppm_forward: {h}x{w} input is smaller than bin {b}")
        bh, bw = min(b, h), min(b, w)
        pooled = branch(T.adaptive_avg_pool(x, bh, bw))
        outs.append(bilinear_resize(pooled, h, w))
    return weights.bottleneck(T.concat(outs))


__all__ = [
    "FAM",
    "GDFAM",
    "PPM",
    "FlowHead",
    "fam_forward",
    "gdfam_forward",
    "gated_fuse",
    "ppm_forward",
    "split_flow",
    "GATE_TARGETS",
    "PPM_BINS",
]
