"""The shipped gradient-check suite, shared by the CLI and the tests.

Inputs are float64 and kept away from non-smooth points: relu inputs satisfy
``|x| > 1e-3``, sampling coordinates sit at least 1e-3 from lattice lines and
borders, and channel-max winners lead by more than 1e-3.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .align import FAM, GDFAM, PPM, fam_forward, gated_fuse, gdfam_forward, ppm_forward
from .net import ModelConfig, build_model
from .tensor import Tensor, gradcheck
from .train import ohem_ce_loss, total_loss, TrainConfig
from .warp import bilinear_resize, grid_warp

MARGIN = 1e-3
E2E_TOL = 1e-3


def away_from_zero(x: np.ndarray, margin: float = MARGIN) -> np.ndarray:
    return np.where(np.abs(x) < 2 * margin, np.where(x < 0, -1, 1) * (2 * margin + np.abs(x)), x)


def separated_channels(rng: np.random.Generator, shape: tuple, gap: float = 10 * MARGIN) -> np.ndarray:
    """Random values whose per-pixel channel ranking has gaps larger than ``gap``."""
    n, c, h, w = shape
    ranks = np.argsort(rng.random((n, c, h, w)), axis=1).astype(np.float64)
    return ranks * (1 + gap) + rng.uniform(0, 1 - gap, size=shape) * 0.1


def sanitized_flow(rng: np.random.Generator, n: int, h: int, w: int, ratio: int, outside: float = 0.2) -> np.ndarray:
    """Flow whose source coordinates avoid lattice lines and borders by ``MARGIN``.

    A fraction ``outside`` of pixels samples clearly outside the grid, which
    exercises the clamped (zero flow gradient) branch.
    """
    big_h, big_w = ratio * h, ratio * w

    def coords(extent, size):
        cell = rng.integers(0, max(extent - 1, 1), size=size)
        frac = rng.uniform(2 * MARGIN, 1 - 2 * MARGIN, size=size)
        q = cell + frac if extent > 1 else np.zeros(size)
        flip = rng.random(size) < outside
        off = rng.uniform(0.05, 0.5, size=size)
        q = np.where(flip & (rng.random(size) < 0.5), -off, q)
        q = np.where(flip & (q >= 0), extent - 1 + off, q)
        return q

    qx = coords(w, (n, big_h, big_w))
    qy = coords(h, (n, big_h, big_w))
    ys, xs = np.mgrid[0:big_h, 0:big_w]
    return np.stack([qx * ratio - xs, qy * ratio - ys], axis=1)


def _randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    for _, p in module.named_parameters():
        p.data = rng.standard_normal(p.shape) * scale
    for _, owner, attr in module.named_buffers():
        setattr(owner, attr, getattr(owner, attr).astype(np.float64))


def _conv(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    a = gradcheck(lambda x, w, b: T.conv2d(x, w, b, 1, 1), [x, w, b], eps=1e-5)
    s = gradcheck(lambda x, w, b: T.conv2d(x, w, b, 2, 0), [x, w, b], eps=1e-5)
    return a + s


def _batch_norm(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    g, b = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.standard_normal(3))
    state = T.BatchNormState(3, np.float64)
    state.running_mean = rng.standard_normal(3)
    state.running_var = rng.uniform(0.5, 2, 3)
    train = gradcheck(lambda x, g, b: T.batch_norm(x, g, b, state, True), [x, g, b])
    evals = gradcheck(lambda x, g, b: T.batch_norm(x, g, b, state, False), [x, g, b])
    return train + evals


def _pointwise(rng):
    x = Tensor(away_from_zero(rng.standard_normal((1, 2, 3, 3))))
    return gradcheck(T.relu, [x]) + gradcheck(T.sigmoid, [Tensor(rng.standard_normal((1, 2, 3, 3)) * 3)])


def _combine(rng):
    a, b = Tensor(rng.standard_normal((1, 2, 3, 3))), Tensor(rng.standard_normal((1, 3, 3, 3)))
    c = Tensor(rng.standard_normal((1, 2, 3, 3)))
    return gradcheck(lambda a, c: T.add(a, c), [a, c]) + gradcheck(lambda a, b: T.concat([a, b]), [a, b])


def _pool(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 7)))
    m = Tensor(separated_channels(rng, (1, 4, 3, 3)))
    return (
        gradcheck(lambda x: T.adaptive_avg_pool(x, 2, 3), [x])
        + gradcheck(lambda x: T.adaptive_avg_pool(x, 1, 7), [x])
        + gradcheck(T.channel_avg, [x])
        + gradcheck(T.channel_max, [m])
    )


def _grid_warp(rng):
    errs = []
    for ratio, (h, w) in ((1, (4, 5)), (2, (3, 3)), (4, (2, 3))):
        f = Tensor(rng.standard_normal((2, 2, h, w)))
        fl = Tensor(sanitized_flow(rng, 2, h, w, ratio))
        errs += gradcheck(lambda f, fl: grid_warp(f, fl, ratio), [f, fl])
    f = Tensor(rng.standard_normal((1, 3, 3, 4)))
    errs += gradcheck(lambda f: bilinear_resize(f, 5, 7), [f])
    return errs


def _fam(rng):
    d = 4
    fam = FAM(d, norm="none")
    _randomize(fam, rng)
    low, high = Tensor(rng.standard_normal((1, d, 3, 3))), Tensor(rng.standard_normal((1, d, 6, 6)))
    params = fam.parameters()

    def fn(low, high, *ps):
        warped, flow = fam_forward(low, high, fam)
        return T.concat([warped, flow])

    return gradcheck(fn, [low, high] + params)


def _gdfam(rng):
    d = 4
    mod = GDFAM(d, norm="none")
    _randomize(mod, rng)
    low = Tensor(rng.standard_normal((1, d, 2, 2)))
    high = Tensor(separated_channels(rng, (1, d, 8, 8)))
    params = mod.parameters()

    def fn(high, low, *ps):
        fused, fh, fl, gate = gdfam_forward(high, low, 4, mod)
        return T.concat([fused, gate])

    errs = gradcheck(fn, [high, low] + params)
    a, b = Tensor(rng.standard_normal((1, 3, 2, 2))), Tensor(rng.standard_normal((1, 3, 2, 2)))
    g = Tensor(rng.uniform(0.1, 0.9, (1, 1, 2, 2)))
    return errs + gradcheck(gated_fuse, [a, b, g])


def _ppm(rng):
    ppm = PPM(8, 4, norm="batchnorm")
    _randomize(ppm, rng)
    for b in ppm.branches + [ppm.bottleneck]:
        b.bn.gamma.data = rng.uniform(0.5, 1.5, b.bn.gamma.shape)
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    return gradcheck(lambda x, *ps: ppm_forward(x, ppm), [x] + ppm.parameters())


def _ohem(rng):
    logits = Tensor(rng.standard_normal((2, 4, 3, 5)) * 2)
    labels = rng.integers(0, 4, size=(2, 3, 5))
    labels[0, 0, :2] = 255
    errs = gradcheck(lambda z: ohem_ce_loss(z, labels, 0.25), [logits])
    aux = Tensor(rng.standard_normal((2, 4, 3, 5)))
    cfg = TrainConfig(ohem_keep_frac=0.5)
    return errs + gradcheck(lambda z, a: total_loss(z, a, labels, cfg), [logits, aux])


def tiny_config(variant: str = "sfnet") -> ModelConfig:
    return ModelConfig(
        variant=variant,
        stem_channels=4,
        stage_channels=(4, 4, 8, 8),
        blocks_per_stage=1,
        decoder_channels=4,
        num_classes=3,
        norm="none",
        seed=3,
    )


def tiny_model(variant: str, rng: np.random.Generator):
    """Float64 tiny model whose flow heads are random, not zero."""
    model = build_model(tiny_config(variant)).astype(np.float64)
    for name, p in model.named_parameters():
        if "flow_head.conv2" in name:
            p.data = rng.standard_normal(p.shape) * 0.3
    return model


def _end_to_end(variant):
    def run(rng):
        model = tiny_model(variant, rng)
        image = Tensor(rng.random((1, 3, 32, 32)))
        params = model.parameters()

        def fn(image, *ps):
            return model(image).logits

        return gradcheck(fn, [image] + params)

    return run


SUITE = [
    ("conv2d", "conv2d", _conv, None),
    ("batch_norm", "batch_norm", _batch_norm, None),
    ("pointwise", "pointwise", _pointwise, None),
    ("combine", "combine", _combine, None),
    ("pool", "pool", _pool, None),
    ("grid_warp", "grid_warp", _grid_warp, None),
    ("fam_forward", "fam_forward", _fam, None),
    ("gdfam_forward", "gdfam_forward", _gdfam, None),
    ("ppm_forward", "ppm_forward", _ppm, None),
    ("ohem_ce_loss", "ohem_ce_loss", _ohem, None),
    ("end_to_end_sfnet", "end_to_end", _end_to_end("sfnet"), E2E_TOL),
    ("end_to_end_sfnet_lite", "end_to_end", _end_to_end("sfnet_lite"), E2E_TOL),
]

OPS = tuple(dict.fromkeys(op for _, op, _, _ in SUITE))


def run_suite(op: str | None = None, tol: float = 1e-4, seed: int = 0):
    """Yield ``(name, max_error, budget, passed)`` per case.

    Operator cases use ``tol``; end-to-end cases use ``max(tol, 1e-3)``.
    """
    for name, case_op, fn, budget in SUITE:
        if op is not None and op not in (name, case_op):
            continue
        limit = tol if budget is None else max(tol, budget)
        err = max(fn(np.random.default_rng(seed)))
        yield name, err, limit, err < limit
