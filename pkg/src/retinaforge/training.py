"""Training loop: deep-supervised BCE, Adam, and plateau LR decay.

Every output map of the model receives the loss with equal weight; the
learning rate drops by 10x whenever validation loss fails to improve by
more than min_delta for ``plateau_patience`` consecutive epochs.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .engine import Tape, Tensor, adam_step, backward
from .errors import ConfigError, StateError


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    dropout: float = 0.1
    iterations: int = 4
    seed: int = 0
    plateau_min_delta: float = 1e-4

    def __post_init__(self):
        for name in ("epochs", "batch_size", "plateau_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.initial_lr <= 0 or self.lr_decay_factor <= 1:
            raise ConfigError("initial_lr must be > 0 and lr_decay_factor > 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    best_val: float = math.inf
    since_improve: int = 0
    plateau_ref: float = math.inf


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, lr, train_loss, val_loss)
    best_epoch: int = -1
    best_val: float = math.inf

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
            for row in self.rows:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def composite_loss(outputs, target):
    """Equal-weight mean of per-output BCE losses (deep supervision)."""
    losses = [L.bce_loss(out, target) for out in outputs]
    if len(losses) == 1:
        return losses[0]
    return L.scalar_mean(losses)


def plateau_step(state, val_loss, config):
    """Reduce-on-plateau bookkeeping; call exactly once per epoch.

    The counter resets only on an improvement strictly greater than
    min_delta against the reference loss; after ``plateau_patience``
    consecutive stale epochs the lr divides by the decay factor. The first
    observation seeds the reference and already counts as one stale epoch,
    so a loss that never moves decays the lr exactly at epoch
    ``plateau_patience``.
    """
    if math.isinf(state.plateau_ref):
        state.plateau_ref = val_loss
        state.since_improve += 1
    elif state.plateau_ref - val_loss > config.plateau_min_delta:
        state.plateau_ref = val_loss
        state.since_improve = 0
    else:
        state.since_improve += 1
    if state.since_improve >= config.plateau_patience:
        state.lr /= config.lr_decay_factor
        state.since_improve = 0
    return state


def _batches(count, batch_size, order=None):
    idx = np.arange(count) if order is None else order
    for start in range(0, count, batch_size):
        yield idx[start:start + batch_size]


def _run_loss(model, patches, labels, config, training, rng):
    outputs = model.forward(
        patches, training=training, rng=rng, dropout_rate=config.dropout
    )
    return composite_loss(outputs.maps, Tensor(labels))


def validate(model, val_set, config):
    """Mean composite loss over the validation patches, dropout off."""
    if len(val_set) == 0:
        raise ConfigError("validation patch set is empty")
    total, seen = 0.0, 0
    for idx in _batches(len(val_set), config.batch_size):
        loss = _run_loss(model, val_set.patches[idx], val_set.labels[idx], config, False, None)
        total += loss.item() * len(idx)
        seen += len(idx)
    return total / seen


def train(model, train_set, val_set, config, checkpoint_path=None, log=None):
    """Run the full loop; returns the training History.

    Per epoch: seeded shuffle, batches of ``batch_size`` (the final short
    batch included), forward -> composite BCE -> backward -> Adam, then
    validation, checkpointing on improvement, and the plateau step.
    """
    if len(train_set) == 0:
        raise ConfigError("training patch set is empty")
    if train_set.labels is None or val_set.labels is None:
        raise ConfigError("patch sets must carry groundtruth labels")
    from .data import save_weights  # local import; data also imports architectures

    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x7E41]))
    state = TrainState(lr=config.initial_lr)
    history = History()
    for epoch in range(config.epochs):
        state.epoch = epoch
        lr_used = state.lr
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for bi, idx in enumerate(_batches(len(train_set), config.batch_size, order)):
            with Tape() as tape:
                loss = _run_loss(
                    model, train_set.patches[idx], train_set.labels[idx], config, True, rng
                )
            value = loss.item()
            if not math.isfinite(value):
                raise StateError(
                    f"non-finite training loss at epoch {epoch} batch {bi}: {value}"
                )
            backward(tape, loss)
            adam_step(model.store, state.lr)
            total += value * len(idx)
            seen += len(idx)
        train_loss = total / seen
        val_loss = validate(model, val_set, config)
        if val_loss < state.best_val:
            state.best_val = val_loss
            history.best_val = val_loss
            history.best_epoch = epoch
            if checkpoint_path is not None:
                save_weights(model, checkpoint_path, seed=config.seed, epoch=epoch)
        plateau_step(state, val_loss, config)
        history.rows.append((epoch, lr_used, train_loss, val_loss))
        if log:
            log(
                f"epoch {epoch + 1}/{config.epochs}  lr {lr_used:g}  "
                f"train {train_loss:.4f}  val {val_loss:.4f}"
            )
    return history
