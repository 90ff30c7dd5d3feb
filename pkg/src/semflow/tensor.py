"""Minimal deterministic tensor engine with reverse-mode gradients.

Arrays are dense numpy buffers in (N, C, H, W) layout. Every differentiable
operation computes its output eagerly and, when a :class:`Tape` is active and
some input requires a gradient, appends one record ``(output, inputs,
backward)`` to the tape. :meth:`Tape.backward` replays the records in reverse.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, GradcheckError, NonFiniteError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Tensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            if dtype is None and arr.dtype.kind in "iub":
                arr = arr.astype(np.float32)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with its optimizer state."""

    __slots__ = ("name", "momentum_buf")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        self.momentum_buf = np.zeros_like(self.data)

    @property
    def grad_accum(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad


_state = threading.local()


def _current_tape() -> Optional["Tape"]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Linear record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are recorded in execution order.
    """

    def __init__(self):
        self.records: list = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``grad`` (default: ones) from ``output`` to every leaf.

        Leaf gradients are accumulated into ``tensor.grad``.
        """
        if grad is None:
            grad = np.ones_like(output.data)
        grads = {id(output): np.asarray(grad, dtype=output.dtype)}
        leaves = {id(output): output}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            leaves.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves[key] = parent
        for key, g in grads.items():
            leaf = leaves[key]
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.records.clear()


def check_finite(arr: np.ndarray, what: str = "operation") -> None:
    # A finite sum implies finite elements for the magnitudes this engine sees.
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NonFiniteError(f"{what} produced non-finite values")


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, what: str = "operation") -> Tensor:
    """Wrap ``data`` as an op output and record ``backward`` on the active tape.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    check_finite(data, what)
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        tape = _current_tape()
        if tape is not None:
            tape.records.append((out, tuple(parents), backward))
    return out


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected a 4-D tensor, got shape {x.shape}")


# --------------------------------------------------------------------------- conv


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and one matrix product."""
    _require_4d(x, "conv2d input")
    _require_4d(weight, "conv2d weight")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be positive and padding non-negative")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    k = kh
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigError(
            f"conv2d: output extent ({h}+2*{padding}-{k})/{stride}+1 is not a positive integer"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    pointwise_fast = k == 1 and stride == 1
    if pointwise_fast:
        cols = xd.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = weight.data.reshape(cout, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    hp, wp = xd.shape[2], xd.shape[3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wm
            if pointwise_fast:
                gxp = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                dc = dcols.reshape(n, ho, wo, c, k, k)
                gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                            dc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, backward, "conv2d")


# --------------------------------------------------------------------- batch norm


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = BN_EPS,
) -> Tensor:
    _require_4d(x, "batch_norm input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},)")
    count = n * h * w
    xd = x.data
    if training:
        if count < 2:
            raise ConfigError("batch_norm: train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * (count / (count - 1))).astype(
            state.running_var.dtype
        )
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (dxhat - s1 / count - xhat * (s2 / count)) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gg

    return make_result(y, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_result(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    tiny = np.finfo(xd.dtype).tiny
    s = np.clip(s, tiny, np.nextafter(xd.dtype.type(1), xd.dtype.type(0))).astype(xd.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown pointwise function {fn!r}")


# ------------------------------------------------------------------------ combine


def add(*xs: Tensor) -> Tensor:
    if not xs:
        raise DimensionError("add: need at least one input")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise DimensionError(f"add: shape mismatch {shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return make_result(out, xs, lambda g: tuple(g for _ in xs), "add")


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return make_result(x.data * f, (x,), lambda g: (g * f,), "scale")


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels; the first input occupies the first channels."""
    xs = tuple(xs)
    if not xs:
        raise DimensionError("concat: need at least one input")
    for t in xs:
        _require_4d(t, "concat input")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(f"concat: N,H,W mismatch {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, xs, backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels input")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise DimensionError(f"slice_channels: [{start},{stop}) outside 0..{c}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(out, (x,), backward, "slice_channels")


# -------------------------------------------------------------------------- pool


def _bin_edges(size: int, bins: int) -> list:
    return [(i * size) // bins for i in range(bins + 1)]


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over contiguous bins ``floor(i*H/out)..floor((i+1)*H/out)``."""
    _require_4d(x, "adaptive_avg input")
    n, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError(f"adaptive_avg: output {out_h}x{out_w} exceeds input {h}x{w}")
    xd = x.data
    if h % out_h == 0 and w % out_w == 0:
        bh, bw = h // out_h, w // out_w
        y = xd.reshape(n, c, out_h, bh, out_w, bw).mean(axis=(3, 5))

        def backward(g):
            gx = np.broadcast_to((g / (bh * bw))[:, :, :, None, :, None], (n, c, out_h, bh, out_w, bw))
            return (gx.reshape(n, c, h, w),)

        return make_result(y, (x,), backward, "adaptive_avg")

    ey, ex = _bin_edges(h, out_h), _bin_edges(w, out_w)
    y = np.empty((n, c, out_h, out_w), dtype=xd.dtype)
    for i in range(out_h):
        for j in range(out_w):
            y[:, :, i, j] = xd[:, :, ey[i]:ey[i + 1], ex[j]:ex[j + 1]].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(xd)
        for i in range(out_h):
            for j in range(out_w):
                area = (ey[i + 1] - ey[i]) * (ex[j + 1] - ex[j])
                gx[:, :, ey[i]:ey[i + 1], ex[j]:ex[j + 1]] = (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return make_result(y, (x,), backward, "adaptive_avg")


def channel_avg(x: Tensor) -> Tensor:
    _require_4d(x, "channel_avg input")
    c = x.shape[1]
    if c < 1:
        raise DimensionError("channel_avg: need at least one channel")
    y = x.data.mean(axis=1, keepdims=True)
    return make_result(
        y, (x,), lambda g: (np.broadcast_to(g / c, x.shape).astype(g.dtype),), "channel_avg"
    )


def channel_max(x: Tensor) -> Tensor:
    """Max over channels; ties resolve to the lowest channel index."""
    _require_4d(x, "channel_max input")
    if x.shape[1] < 1:
        raise DimensionError("channel_max: need at least one channel")
    idx = np.argmax(x.data, axis=1)[:, None]
    y = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make_result(y, (x,), backward, "channel_max")


def pool(x: Tensor, kind: str, out_size: Optional[tuple] = None) -> Tensor:
    if kind == "adaptive_avg":
        if out_size is None:
            raise ConfigError("adaptive_avg needs out_size")
        return adaptive_avg_pool(x, *out_size)
    if kind == "channel_avg":
        return channel_avg(x)
    if kind == "channel_max":
        return channel_max(x)
    raise ConfigError(f"unknown pool kind {kind!r}")


# --------------------------------------------------------------------- gradcheck


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    seed: int = 0,
) -> list:
    """Compare tape gradients against central differences.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar by a fixed
    random cotangent. Returns, per input, the max over elements of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise ConfigError(f"gradcheck: input {i} must be float64, got {t.dtype}")
    probe = fn(*inputs)
    cot = np.random.default_rng(seed).standard_normal(probe.shape)

    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out, cot)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t, (rg, gr) in zip(inputs, saved):
        t.requires_grad, t.grad = rg, gr

    def objective() -> float:
        return float(np.sum(fn(*inputs).data * cot))

    errors = []
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        an = analytic[i].reshape(-1)
        if not np.all(np.isfinite(an)):
            bad = int(np.flatnonzero(~np.isfinite(an))[0])
            raise GradcheckError(f"non-finite analytic gradient: input {i}, element {bad}")
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = objective()
            flat[j] = orig - eps
            fm = objective()
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            if not np.isfinite(num):
                raise GradcheckError(f"non-finite numeric gradient: input {i}, element {j}")
            err = abs(an[j] - num) / max(1.0, abs(an[j]), abs(num))
            worst = max(worst, err)
        errors.append(worst)
    return errors
