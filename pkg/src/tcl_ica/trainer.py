"""Minibatch gradient descent with momentum on the segment-discrimination loss.

Also provides the held-out split, classification accuracy, and the
chance-level baseline (frozen random features, trained head only).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ObservationSeries
from .network import (
    clone_model,
    features_forward,
    mlr_posterior,
    named_parameters,
    tcl_gradients,
    tcl_loss,
)


class NonFiniteLossError(RuntimeError):
    """Training loss left the reals, usually a too-large learning rate."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 200
    l2_weight: float = 1e-4
    seed: int | None = 0
    lr_decay: float = 0.999
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be nonnegative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class TrainHistory:
    losses: list  # per-epoch mean minibatch loss
    accuracies: list  # per-epoch training accuracy
    holdout_accuracy: float
    improved: bool  # final epoch loss <= first epoch loss

    def __len__(self):
        return len(self.losses)


def split_holdout(data, fraction):
    """Reserve the last `fraction` of each contiguous segment block.

    Returns (train, holdout) ObservationSeries.  fraction == 0 returns the
    original data and an empty holdout.
    """
    labels = data.labels
    n = len(labels)
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    train_idx, hold_idx = [], []
    for s, e in zip(starts, ends):
        cut = e - int(np.ceil((e - s) * fraction))
        train_idx.append(np.arange(s, cut))
        hold_idx.append(np.arange(cut, e))
    train_idx = np.concatenate(train_idx)
    hold_idx = np.concatenate(hold_idx)
    train = ObservationSeries(
        data.values[:, train_idx], labels[train_idx].copy(), data.n_segments
    )
    hold = ObservationSeries(
        data.values[:, hold_idx], labels[hold_idx].copy(), data.n_segments
    )
    return train, hold


def classification_accuracy(data, model):
    """Fraction of samples whose posterior argmax matches the segment label.

    np.argmax takes the first maximum, so ties break toward the lower class.
    """
    h = features_forward(data.values, model.features)
    posterior = mlr_posterior(h, model.mlr)
    predicted = np.argmax(posterior, axis=0)
    return float(np.mean(predicted == data.labels))


def _check_coverage(labels, n_classes):
    present = np.unique(labels)
    if present.min() < 0 or present.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if len(present) != n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ValueError(f"labels must cover every class; missing {missing}")


def _train(data, model, cfg, trainable_prefixes):
    model = clone_model(model)
    if cfg.batch_size > data.n_samples:
        raise ValueError("batch_size exceeds the number of samples")
    train, hold = split_holdout(data, cfg.holdout_fraction)
    _check_coverage(train.labels, model.mlr.n_classes)

    params = named_parameters(model)
    trainable = [k for k in params if k.startswith(trainable_prefixes)]
    velocity = {k: np.zeros_like(params[k]) for k in trainable}

    rng = np.random.default_rng(cfg.seed)
    x, y = train.values, train.labels
    n = train.n_samples
    lr = cfg.learning_rate
    losses, accuracies = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = tcl_gradients(
                x[:, idx], y[idx], model.features, model.mlr, cfg.l2_weight
            )
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    "training loss is not finite; lower the learning rate"
                )
            batch_losses.append(loss)
            for key in trainable:
                v = velocity[key]
                v *= cfg.momentum
                v -= lr * grads[key]
                params[key] += v
        lr *= cfg.lr_decay
        losses.append(float(np.mean(batch_losses)))
        accuracies.append(classification_accuracy(train, model))
    holdout_accuracy = (
        classification_accuracy(hold, model) if hold.n_samples else float("nan")
    )
    history = TrainHistory(
        losses=losses,
        accuracies=accuracies,
        holdout_accuracy=holdout_accuracy,
        improved=losses[-1] <= losses[0],
    )
    return model, history


def train_tcl(data, model, cfg):
    """Train feature extractor and head jointly; returns (model, history).

    The input model is left untouched.  Updates follow the classic momentum
    rule v <- momentum*v - lr*grad; param <- param + v, with per-epoch
    reshuffling and multiplicative learning-rate decay.  Pivot parameters
    receive zero gradient and therefore never move.
    """
    return _train(data, model, cfg, ("hidden", "output", "mlr"))


def chance_level(data, model, cfg):
    """Held-out accuracy with the feature extractor frozen at its given
    (random) initialization and only the head trained.

    The caller passes a freshly initialized model; with informative raw
    features this baseline can sit well above 1/n_classes, which is why it
    is the honest reference for trained accuracy.
    """
    _, history = _train(data, model, cfg, ("mlr",))
    return history.holdout_accuracy


def write_history_csv(history, path):
    """Training log with columns (epoch, loss, accuracy)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for epoch, (loss, acc) in enumerate(zip(history.losses, history.accuracies)):
            writer.writerow([epoch, repr(loss), repr(acc)])


def read_history_csv(path):
    """Load (epochs, losses, accuracies) back from write_history_csv output."""
    path = Path(path)
    epochs, losses, accuracies = [], [], []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            losses.append(float(row["loss"]))
            accuracies.append(float(row["accuracy"]))
    return epochs, losses, accuracies
