"""Chronological splits, dead-zone labels and the training loop.

One sample is one trading day's snapshot; ``batch_size`` days are averaged
into each Adam step. The returned parameters are those of the epoch with the
best validation macro-F1 (earliest epoch on ties).
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .evaluate import classification_metrics
from .model import DOWN, NEUTRAL, UP, ModelConfig, ModelParams, forward, init_params, loss_and_grad
from .numerics import AdamState, adam_step
from .rng import stream


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0:
            raise ValueError("split fractions must be positive")
        if not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


def split(dates: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Contiguous train/val/test day ranges in chronological order."""
    dates = list(dates)
    n = len(dates)
    if n < 3:
        raise ValueError(f"need at least 3 dates to split, got {n}")
    n_train = max(1, int(round(n * spec.train_frac)))
    n_val = max(1, int(round(n * spec.val_frac)))
    if n_train + n_val > n - 1:
        n_train = max(1, n - 1 - n_val)
        n_val = n - 1 - n_train
    return dates[:n_train], dates[n_train : n_train + n_val], dates[n_train + n_val :]


def derive_labels(returns, dead_zone: float) -> np.ndarray:
    """up (2) above ``dead_zone``, down (0) below ``-dead_zone``, else neutral (1); -1 where undefined."""
    if dead_zone < 0:
        raise ValueError("dead_zone must be >= 0")
    r = np.asarray(returns, dtype=np.float64)
    out = np.full(r.shape, NEUTRAL, dtype=np.int64)
    out[r > dead_zone] = UP
    out[r < -dead_zone] = DOWN
    out[~np.isfinite(r)] = -1
    return out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 5e-5
    batch_size: int = 32
    epochs: int = 100
    dropout: float = 0.5
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr and epochs must be positive, weight_decay >= 0, batch_size >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    model_config: ModelConfig

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_macro_f1"])
        for h in self.history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_macro_f1"])])
        return buf.getvalue()


def predict(snapshot, params, config: ModelConfig) -> np.ndarray:
    return np.argmax(forward(snapshot, params, config).probs, axis=1)


def evaluate_days(samples: Sequence, params, config: ModelConfig):
    """Classification report over all labelled stocks of ``(snapshot, labels)`` samples."""
    preds, labs = [], []
    for snap, lab in samples:
        mask = lab >= 0
        if mask.any():
            preds.append(predict(snap, params, config)[mask])
            labs.append(lab[mask])
    if not preds:
        raise ValueError("no labelled stock-days to evaluate")
    return classification_metrics(np.concatenate(preds), np.concatenate(labs))


def batch_gradient(samples, indices, params, config, epoch, threads=1):
    """Mean loss and mean gradient over ``indices``; summed in index order."""

    def one(i):
        snap, lab = samples[i]
        return loss_and_grad(snap, lab, params, config, training=True, dropout_key=(epoch, int(i)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(i) for i in indices]
    total = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    for value, grads in results:
        losses.append(value)
        for k in total:
            total[k] += grads[k]
    n = len(results)
    return losses, {k: v / n for k, v in total.items()}


def train(
    train_samples: Sequence,
    val_samples: Sequence,
    model_config: ModelConfig,
    config: TrainConfig = TrainConfig(),
    init: ModelParams | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit on ``(snapshot, labels)`` days; select by validation macro-F1."""
    train_samples = [(s, l) for s, l in train_samples if (l >= 0).any()]
    if not train_samples:
        raise ValueError("no labelled training days")
    if not val_samples:
        raise ValueError("validation range is empty")
    model_config = replace(model_config, dropout_p=config.dropout)
    params = init if init is not None else init_params(model_config)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    best, best_f1, best_epoch = params, -math.inf, 0
    history = []
    n = len(train_samples)
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, "shuffle", epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            losses, grads = batch_gradient(train_samples, idx, params, model_config, epoch, config.threads)
            epoch_losses.extend(losses)
            if not all(math.isfinite(v) for v in losses) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss or gradient in epoch {epoch}, batch at {start}")
            params = ModelParams(adam_step(dict(params), grads, state))
        val_f1 = evaluate_days(val_samples, params, model_config).macro_f1
        rec = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_macro_f1": val_f1}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if val_f1 > best_f1:
            best, best_f1, best_epoch = params, val_f1, epoch
    return TrainResult(best, history, best_epoch, model_config)


def dataset_samples(dataset, days: Sequence[int], dead_zone: float) -> list:
    labels = derive_labels(dataset.next_returns, dead_zone)
    return [(dataset.snapshot(t), labels[t]) for t in days]
