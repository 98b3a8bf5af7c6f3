"""Training: Adam, early stopping on validation accuracy, multi-seed runs."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, argmax_rows, backward, cross_entropy


class TrainingDivergence(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, epoch=None, clamp_counts=None):
        super().__init__(message)
        self.epoch = epoch
        self.clamp_counts = clamp_counts


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 100
    seeds: list = field(default_factory=lambda: list(range(10)))
    dropout: float = 0.5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        from .layers import ConfigError

        if not self.lr >= 0:
            raise ConfigError("train.lr must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be positive")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("train.patience must lie in [1, max_epochs]")
        if not self.seeds:
            raise ConfigError("train.seeds must not be empty")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout must lie in [0, 1)")
        return self


@dataclass
class RunMetrics:
    train_loss: list
    val_acc: list
    test_acc: float
    best_val_acc: float
    best_epoch: int
    epochs: int
    clamp_counts: list
    seconds: float


class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One Adam update with bias correction; weight decay is added to the gradient."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state must have the same length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape or state.m[i].shape != p.values.shape:
            raise ShapeError(f"adam_step: shape mismatch for parameter {i}: {p.values.shape} vs {g.shape}")
        if weight_decay:
            g = g + weight_decay * p.values
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.values = p.values - step


def accuracy(logits, labels, mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    pred = argmax_rows(logits)
    return float(np.mean(pred[mask] == np.asarray(labels)[mask]))


def evaluate(model, ds, mask):
    """Accuracy of the argmax prediction over ``mask`` (dropout off)."""
    return accuracy(model(ds.features, training=False), ds.labels, mask)


def fit(model, ds, cfg, seed=0):
    """Train ``model`` on the training mask, keeping the best-validation parameters."""
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = AdamState(params)
    x, y = ds.features, ds.labels
    start = time.perf_counter()
    losses, val_accs = [], []
    best_val, best_loss, best_epoch = -1.0, np.inf, 0
    best_state = model.state()
    since_best = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        for p in params:
            p.grad = None
        logits = model(x, training=True, rng=rng)
        loss = cross_entropy(logits, y, ds.train_mask)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(
                f"non-finite training loss at epoch {epoch} (clamped entries per Bregman layer: "
                f"{model.clamp_counts})", epoch=epoch, clamp_counts=list(model.clamp_counts))
        backward(loss)
        adam_step(params, [p.grad for p in params], state, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        losses.append(value)

        eval_logits = model(x, training=False)
        val = accuracy(eval_logits, y, ds.val_mask)
        val_loss = cross_entropy(eval_logits, y, ds.val_mask).item() if ds.val_mask.any() else 0.0
        val_accs.append(val)
        if val > best_val or (val == best_val and val_loss < best_loss):
            best_val, best_loss, best_epoch = val, val_loss, epoch
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model.load_state(best_state)
    final_logits = model(x, training=False)
    return RunMetrics(
        train_loss=losses,
        val_acc=val_accs,
        test_acc=accuracy(final_logits, y, ds.test_mask),
        best_val_acc=best_val,
        best_epoch=best_epoch,
        epochs=epoch,
        clamp_counts=list(model.clamp_counts),
        seconds=time.perf_counter() - start,
    )


def mean_std(values):
    """Mean and sample standard deviation (n - 1 denominator).

    Computed with exact rational arithmetic, so equal inputs give a std of
    exactly zero.
    """
    v = [float(x) for x in values]
    if len(v) < 2:
        raise ValueError("need at least two values for a sample standard deviation")
    return float(statistics.mean(v)), float(statistics.stdev(v))


@dataclass
class SeedSummary:
    mean: float
    std: float
    runs: list

    def __iter__(self):
        yield self.mean
        yield self.std


def multi_seed(model_builder, ds, cfg):
    """Train one fresh model per seed; summarize test accuracy as mean and std.

    ``model_builder(seed)`` must return a new, untrained model.
    """
    if len(cfg.seeds) < 2:
        raise ValueError("multi_seed needs at least two seeds")
    runs = [fit(model_builder(seed), ds, cfg, seed=seed) for seed in cfg.seeds]
    mean, std = mean_std([r.test_acc for r in runs])
    return SeedSummary(mean, std, runs)
