"""Loss recipe, optimizer, metrics and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import IGNORE, augment, stack
from .errors import ConfigError, DataError, DegenerateBatchError, NonFiniteError, UndefinedMetricError
from .net import ModelConfig, SegModel, build_model, save_checkpoint
from .tensor import Tape, Tensor, make_result
from .warp import bilinear_resize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    total_iters: int = 2000
    batch_size: int = 8
    ohem_keep_frac: float = 0.1
    aux_weight: float = 0.4
    seed: int = 0
    scale_min: float = 0.75
    scale_max: float = 2.0
    eval_every: int = 500

    def __post_init__(self):
        if not 0 < self.ohem_keep_frac <= 1:
            raise ConfigError("ohem_keep_frac must lie in (0, 1]")
        if self.total_iters < 1 or self.batch_size < 1:
            raise ConfigError("total_iters and batch_size must be positive")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("scale range must satisfy 0 < min <= max")


# ------------------------------------------------------------------------ losses


def kept_count(valid: int, keep_frac: float) -> int:
    """``max(1, ceil(keep_frac * valid))`` evaluated on the decimal value of keep_frac."""
    return max(1, math.ceil(Fraction(repr(float(keep_frac))) * valid))


def pixel_ce(logits: np.ndarray, labels: np.ndarray):
    """Per-pixel softmax cross-entropy. Returns (loss, softmax, valid mask)."""
    n, k = logits.shape[:2]
    valid = labels != IGNORE
    if np.any(labels[valid] >= k) or np.any(labels < 0):
        raise DataError(f"labels must lie in [0, {k}) or equal {IGNORE}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    prob = expd / denom
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    loss = np.log(denom[:, 0]) - picked
    return loss, prob, valid, safe


def ohem_ce_loss(logits: Tensor, labels: np.ndarray, keep_frac: float = 0.1, ignore: int = IGNORE) -> Tensor:
    """Mean cross-entropy over the hardest ``keep_frac`` of valid pixels in the batch.

    Ties in per-pixel loss are broken by ascending flat pixel index.
    """
    if not 0 < keep_frac <= 1:
        raise ConfigError("keep_frac must lie in (0, 1]")
    if ignore != IGNORE:
        labels = np.where(labels == ignore, IGNORE, labels)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DataError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    loss, prob, valid, safe = pixel_ce(logits.data, labels)
    flat_valid = np.flatnonzero(valid.ravel())
    v = flat_valid.size
    if v == 0:
        raise DegenerateBatchError("no valid pixels to average over")
    k = kept_count(v, keep_frac)
    flat_loss = loss.ravel()
    if k == v:
        kept = flat_valid
    else:
        order = np.argsort(-flat_loss[flat_valid], kind="stable")
        kept = np.sort(flat_valid[order[:k]])
    value = np.asarray(flat_loss[kept].sum() / k, dtype=logits.dtype)

    def backward(g):
        mask = np.zeros(loss.size, dtype=logits.dtype)
        mask[kept] = 1
        mask = mask.reshape(loss.shape)
        grad = prob.copy()
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, None], 1, axis=1)
        grad -= onehot
        grad *= (mask * (g / k))[:, None]
        return (grad.astype(logits.dtype),)

    out = make_result(value, (logits,), backward, "ohem_ce_loss")
    return out


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return ohem_ce_loss(logits, labels, keep_frac=1.0)


def total_loss(main_logits: Tensor, aux_logits: Tensor, labels: np.ndarray, cfg: TrainConfig) -> Tensor:
    """OHEM CE on the main head plus ``aux_weight`` times plain CE on the aux head."""
    main = ohem_ce_loss(main_logits, labels, cfg.ohem_keep_frac)
    if cfg.aux_weight == 0:
        return main
    h, w = labels.shape[-2:]
    aux = ce_loss(bilinear_resize(aux_logits, h, w), labels)
    return T.add(main, T.scale(aux, cfg.aux_weight))


# --------------------------------------------------------------------- optimizer


def poly_lr(iteration: int, total: int, base: float, power: float) -> float:
    if not 0 <= iteration <= total:
        raise ConfigError(f"iteration {iteration} outside [0, {total}]")
    return base * (1 - iteration / total) ** power


def sgd_step(params, lr: float, momentum: float, weight_decay: float) -> None:
    """SGD with momentum and L2 weight decay; gradients are cleared afterwards."""
    for p in params:
        grad = p.grad_accum
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    for p in params:
        g = p.grad_accum + p.data.dtype.type(weight_decay) * p.data
        p.momentum_buf = (p.data.dtype.type(momentum) * p.momentum_buf + g).astype(p.data.dtype)
        p.data -= p.data.dtype.type(lr) * p.momentum_buf
        p.grad = None


# ----------------------------------------------------------------------- metrics


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Class argmax over axis 1; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=1)


def confusion_update(state: np.ndarray, pred: np.ndarray, gt: np.ndarray, ignore: int = IGNORE) -> np.ndarray:
    """Add per-pixel counts ``state[gt, pred]`` for every non-ignored pixel."""
    k = state.shape[0]
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise DataError("prediction and ground truth sizes differ")
    valid = gt != ignore
    g, p = gt[valid].astype(np.int64), pred[valid].astype(np.int64)
    if np.any(g >= k) or np.any(g < 0):
        raise DataError(f"ground-truth label outside [0, {k}) and not {ignore}")
    if np.any(p >= k) or np.any(p < 0):
        raise DataError(f"predicted label outside [0, {k})")
    return state + np.bincount(g * k + p, minlength=k * k).reshape(k, k).astype(state.dtype)


def miou(state: np.ndarray):
    """Return ``(mean IoU, per-class IoU)``; classes with empty union are NaN and excluded."""
    if state.sum() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    tp = np.diag(state).astype(np.float64)
    union = state.sum(axis=0) + state.sum(axis=1) - tp
    ious = np.full(state.shape[0], np.nan)
    present = union > 0
    ious[present] = tp[present] / union[present]
    return float(ious[present].mean()), ious


def evaluate(model: SegModel, samples: list, batch_size: int = 16) -> tuple:
    """Eval-mode confusion matrix and mIoU over ``samples``."""
    model.eval()
    k = model.cfg.num_classes
    state = np.zeros((k, k), dtype=np.int64)
    for i in range(0, len(samples), batch_size):
        images, labels = stack(samples[i:i + batch_size])
        out = model(Tensor(images))
        state = confusion_update(state, argmax_labels(out.logits.data), labels)
    model.train()
    return state, miou(state)


# -------------------------------------------------------------------------- loop


@dataclass
class HistoryRow:
    iter: int
    lr: float
    loss: float
    val_miou: Optional[float] = None


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: list,
    val_dataset: Optional[list] = None,
    out_dir=None,
    model: Optional[SegModel] = None,
) -> tuple:
    """Train from scratch; returns ``(model, history)``.

    With ``out_dir`` the history is written as ``history.csv`` and the final
    weights as ``model.sfnc``.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    model = model or build_model(model_cfg)
    model.train()
    params = model.parameters()
    rng = np.random.default_rng(train_cfg.seed)
    order = np.empty(0, dtype=np.intp)
    cursor = 0
    history = []
    for it in range(train_cfg.total_iters):
        if cursor + train_cfg.batch_size > order.size:
            order = np.concatenate([order[cursor:], rng.permutation(len(dataset))])
            cursor = 0
        batch_idx = order[cursor:cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        batch = [augment(dataset[i], rng, (train_cfg.scale_min, train_cfg.scale_max)) for i in batch_idx]
        images, labels = stack(batch)
        lr = poly_lr(it, train_cfg.total_iters, train_cfg.base_lr, train_cfg.power)
        with Tape() as tape:
            out = model(Tensor(images))
            loss = total_loss(out.logits, out.aux_logits, labels, train_cfg)
        tape.backward(loss)
        sgd_step(params, lr, train_cfg.momentum, train_cfg.weight_decay)
        row = HistoryRow(it, lr, float(loss.data))
        last = it == train_cfg.total_iters - 1
        if val_dataset and train_cfg.eval_every and ((it + 1) % train_cfg.eval_every == 0 or last):
            _, (score, _) = evaluate(model, val_dataset)
            row.val_miou = score
            log.info("iter %d lr %.5f loss %.4f val mIoU %.4f", it, lr, row.loss, score)
        history.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(history, out / "history.csv")
        save_checkpoint(model, out / "model.sfnc")
    return model, history


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "lr", "loss", "val_miou"])
        for row in history:
            writer.writerow([row.iter, repr(row.lr), repr(row.loss), "" if row.val_miou is None else repr(row.val_miou)])


def final_miou(history: list) -> float:
    scores = [r.val_miou for r in history if r.val_miou is not None]
    if not scores:
        raise UndefinedMetricError("history carries no validation score")
    return scores[-1]
