import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles as O
from semflow.data import gen_synthetic
from semflow.errors import ConfigError, DataError, DegenerateBatchError, NonFiniteError, UndefinedMetricError
from semflow.net import ModelConfig
from semflow.tensor import Parameter, Tape, Tensor
from semflow.train import (
    TrainConfig,
    argmax_labels,
    ce_loss,
    confusion_update,
    final_miou,
    kept_count,
    miou,
    ohem_ce_loss,
    poly_lr,
    sgd_step,
    total_loss,
    train_loop,
    write_history,
)
from semflow.warp import bilinear_resize

TINY = ModelConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), blocks_per_stage=1, decoder_channels=4)


def random_batch(rng, n=2, k=4, h=3, w=5, ignore_frac=0.2):
    logits = rng.standard_normal((n, k, h, w)) * 2
    labels = rng.integers(0, k, size=(n, h, w))
    labels[rng.random((n, h, w)) < ignore_frac] = 255
    return logits, labels


def oracle_ohem(logits, labels, frac):
    losses = O.softmax_ce(logits, labels)
    valid = [(l, i) for i, l in enumerate(losses) if l is not None]
    k = max(1, math.ceil(Decimal(repr(frac)) * len(valid)))
    chosen = sorted(valid, key=lambda t: (-t[0], t[1]))[:k]
    return sum(l for l, _ in chosen) / k


# -------------------------------------------------------------------- OHEM


def test_keep_all_is_mean_ce():
    rng = np.random.default_rng(0)
    logits, labels = random_batch(rng)
    losses = [v for v in O.softmax_ce(logits, labels) if v is not None]
    assert abs(ohem_ce_loss(Tensor(logits), labels, 1.0).item() - sum(losses) / len(losses)) < 1e-12


def test_ten_valid_pixels_keep_one():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((1, 3, 2, 5))
    labels = rng.integers(0, 3, size=(1, 2, 5))
    losses = O.softmax_ce(logits, labels)
    assert kept_count(10, 0.1) == 1
    assert abs(ohem_ce_loss(Tensor(logits), labels, 0.1).item() - max(losses)) < 1e-12


def test_hand_built_two_by_two():
    logits = np.array([[[[2.0, 0.0], [0.0, 1.0]], [[0.0, 2.0], [1.0, 1.0]]]])
    labels = np.array([[[0, 0], [1, 255]]])
    # per-pixel CE: log(1+e^-2), log(1+e^2), log(1+e^-1); keep ceil(0.5*3) = 2 largest
    ces = [math.log(1 + math.exp(-2)), math.log(1 + math.exp(2)), math.log(1 + math.exp(-1))]
    expected = (ces[1] + ces[2]) / 2
    assert abs(ohem_ce_loss(Tensor(logits), labels, 0.5).item() - expected) < 1e-12


def test_ties_break_by_ascending_index():
    logits = np.zeros((1, 2, 2, 2))
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    t = Tensor(logits, requires_grad=True)
    with Tape() as tape:
        loss = ohem_ce_loss(t, labels, 0.5)
    tape.backward(loss)
    touched = np.abs(t.grad).sum(axis=1).ravel() > 0
    assert touched.tolist() == [True, True, False, False]


def test_degenerate_and_bad_inputs():
    logits = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(DegenerateBatchError):
        ohem_ce_loss(logits, np.full((1, 2, 2), 255), 0.5)
    with pytest.raises(ConfigError):
        ohem_ce_loss(logits, np.zeros((1, 2, 2), dtype=int), 0.0)
    with pytest.raises(DataError):
        ohem_ce_loss(logits, np.full((1, 2, 2), 3), 0.5)


@settings(max_examples=60, deadline=None)
@given(valid=st.integers(1, 5000), frac=st.floats(1e-4, 1.0, allow_nan=False))
def test_kept_count_formula(valid, frac):
    assert kept_count(valid, frac) == max(1, math.ceil(Decimal(repr(frac)) * valid))
    assert 1 <= kept_count(valid, frac) <= valid


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), frac=st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.9, 1.0]))
def test_ohem_matches_oracle(seed, frac):
    logits, labels = random_batch(np.random.default_rng(seed))
    if np.all(labels == 255):
        labels[0, 0, 0] = 0
    assert abs(ohem_ce_loss(Tensor(logits), labels, frac).item() - oracle_ohem(logits, labels, frac)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_loss_monotone_in_keep_frac(seed):
    logits, labels = random_batch(np.random.default_rng(seed), ignore_frac=0.0)
    vals = [ohem_ce_loss(Tensor(logits), labels, f).item() for f in (1.0, 0.5, 0.25, 0.1, 0.01)]
    assert vals[0] >= 0
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------- total loss


def test_total_loss_cases():
    rng = np.random.default_rng(2)
    logits, labels = random_batch(rng, h=4, w=4)
    main = Tensor(logits)
    aux = Tensor(rng.standard_normal((2, 4, 2, 2)))
    zero_aux = total_loss(main, aux, labels, TrainConfig(aux_weight=0.0)).item()
    assert zero_aux == ohem_ce_loss(main, labels, 0.1).item()
    same = total_loss(main, main, labels, TrainConfig(ohem_keep_frac=1.0, aux_weight=0.4)).item()
    assert abs(same - 1.4 * ce_loss(main, labels).item()) < 1e-12
    resized = bilinear_resize(aux, 4, 4).data
    expected = oracle_ohem(logits, labels, 0.1) + 0.4 * oracle_ohem(resized, labels, 1.0)
    assert abs(total_loss(main, aux, labels, TrainConfig()).item() - expected) < 1e-12


# ----------------------------------------------------------------- poly lr


def test_poly_lr():
    assert poly_lr(0, 2000, 0.01, 0.9) == 0.01
    assert poly_lr(2000, 2000, 0.01, 0.9) == 0.0
    getcontext().prec = 40
    exact = Decimal("0.01") * Decimal(0.5) ** Decimal("0.9")
    assert abs(Decimal(poly_lr(1000, 2000, 0.01, 0.9)) - exact) < Decimal("1e-17")
    with pytest.raises(ConfigError):
        poly_lr(2001, 2000, 0.01, 0.9)


# --------------------------------------------------------------------- SGD


def scalar_param(value, grad=None):
    p = Parameter(np.array([value]), name="w")
    p.grad = None if grad is None else np.array([grad])
    return p


def test_sgd_plain_step():
    p = scalar_param(1.0, 0.5)
    sgd_step([p], 0.1, 0.0, 0.0)
    assert p.data[0] == 1.0 - 0.1 * 0.5
    assert p.grad is None


def test_sgd_zero_grad_keeps_value():
    p = scalar_param(2.0)
    sgd_step([p], 0.1, 0.9, 0.0)
    assert p.data[0] == 2.0


def test_sgd_two_step_recurrence():
    lr, m, wd = 0.05, 0.9, 5e-4
    p = scalar_param(1.0, 0.3)
    sgd_step([p], lr, m, wd)
    p.grad = np.array([-0.2])
    sgd_step([p], lr, m, wd)
    w, buf = 1.0, 0.0
    for g in (0.3, -0.2):
        buf = m * buf + (g + wd * w)
        w = w - lr * buf
    assert p.data[0] == w and p.momentum_buf[0] == buf


def test_sgd_rejects_non_finite_without_mutation():
    good, bad = scalar_param(1.0, 0.1), scalar_param(2.0, np.nan)
    bad.name = "decoder.bad"
    with pytest.raises(NonFiniteError, match="decoder.bad"):
        sgd_step([good, bad], 0.1, 0.9, 0.0)
    assert good.data[0] == 1.0


def test_sgd_reduces_quadratic():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 4))
    q = a @ a.T + np.eye(4)
    p = Parameter(rng.standard_normal(4), name="x")
    obj = lambda x: 0.5 * x @ q @ x
    before = obj(p.data)
    p.grad = q @ p.data
    sgd_step([p], 1e-3, 0.9, 0.0)
    assert obj(p.data) < before


# ----------------------------------------------------------------- metrics


def test_confusion_cases():
    k = 3
    gt = np.array([[0, 1], [2, 2]])
    s = confusion_update(np.zeros((k, k), dtype=np.int64), gt, gt)
    assert np.count_nonzero(s - np.diag(np.diag(s))) == 0
    ign = confusion_update(s, gt, np.full((2, 2), 255))
    assert np.array_equal(ign, s)
    binary = confusion_update(np.zeros((2, 2), dtype=np.int64), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert binary.tolist() == [[1, 1], [0, 2]]
    with pytest.raises(DataError):
        confusion_update(np.zeros((2, 2), dtype=np.int64), np.array([0]), np.array([5]))


def test_confusion_row_sums_are_gt_counts():
    rng = np.random.default_rng(4)
    gt = rng.integers(0, 4, size=500)
    gt[:37] = 255
    pred = rng.integers(0, 4, size=500)
    s = confusion_update(np.zeros((4, 4), dtype=np.int64), pred, gt)
    assert s.sum() == 463
    assert s.sum(axis=1).tolist() == [int((gt == c).sum()) for c in range(4)]


def test_argmax_ties_lowest():
    logits = np.zeros((1, 3, 1, 2))
    logits[0, 2, 0, 1] = 1
    assert argmax_labels(logits).tolist() == [[[0, 2]]]


def test_miou_cases():
    assert miou(np.diag([3, 4, 5]))[0] == 1.0
    m, per = miou(np.array([[3, 1], [1, 3]]))
    assert per.tolist() == [0.6, 0.6] and m == 0.6
    m, per = miou(np.array([[2, 0, 0], [0, 0, 0], [0, 0, 2]]))
    assert math.isnan(per[1]) and m == 1.0
    with pytest.raises(UndefinedMetricError):
        miou(np.zeros((3, 3)))


# -------------------------------------------------------------------- loop


def test_train_loop_deterministic_and_schedule(tmp_path):
    data = gen_synthetic(0, 8, 32, 6)
    val = gen_synthetic(1, 4, 32, 6)
    tc = TrainConfig(total_iters=4, batch_size=2, eval_every=2)
    _, h1 = train_loop(TINY, tc, data, val, out_dir=tmp_path / "a")
    _, h2 = train_loop(TINY, tc, data, val, out_dir=tmp_path / "b")
    assert [r.loss for r in h1] == [r.loss for r in h2]
    assert [r.lr for r in h1] == [poly_lr(i, 4, 0.01, 0.9) for i in range(4)]
    assert [r.val_miou is not None for r in h1] == [False, True, False, True]
    for name in ("history.csv", "model.sfnc"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "history.csv").read_text().splitlines()[0]
    assert header == "iter,lr,loss,val_miou"
    assert final_miou(h1) == h1[-1].val_miou


def test_train_loop_needs_data():
    with pytest.raises(ConfigError):
        train_loop(TINY, TrainConfig(total_iters=1), [])


def test_final_miou_without_scores(tmp_path):
    _, hist = train_loop(TINY, TrainConfig(total_iters=1, batch_size=2), gen_synthetic(0, 2, 32, 6))
    with pytest.raises(UndefinedMetricError):
        final_miou(hist)
    write_history(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[1].endswith(",")


def test_train_config_validation():
    for bad in (dict(ohem_keep_frac=0.0), dict(ohem_keep_frac=1.5), dict(total_iters=0), dict(scale_min=3.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
