"""Adam, reduce-on-plateau scheduling, best-checkpoint tracking and the epoch loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nn
from .errors import InvalidArgument, TrainingDiverged
from .metrics import evaluate


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgument("Adam betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise InvalidArgument("Adam epsilon must be positive")
        if self.t < 0:
            raise InvalidArgument("Adam step count must be non-negative")


def adam_init(params, alpha=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    return AdamState(alpha, beta1, beta2, epsilon, 0,
                     [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise InvalidArgument("params, grads and moment lists differ in length")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (np.shape(p) == np.shape(g) == m.shape == v.shape):
            raise InvalidArgument(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            new_params.append(p - state.alpha * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
            new_m.append(m)
            new_v.append(v)
    if not all(np.all(np.isfinite(a)) for a in new_params + new_v):
        raise TrainingDiverged("parameter update overflowed")
    return new_params, replace(state, t=t, m=new_m, v=new_v)


@dataclass(frozen=True)
class PlateauState:
    current_lr: float
    patience: int = 5
    factor: float = 0.2
    min_lr: float = 1e-7
    min_delta: float = 0.0
    best_loss: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise InvalidArgument("plateau factor must be in (0, 1)")
        if self.patience < 0 or self.min_delta < 0:
            raise InvalidArgument("patience and min_delta must be non-negative")
        if self.current_lr < self.min_lr:
            raise InvalidArgument("current_lr below min_lr")


def plateau_update(state: PlateauState, epoch_val_loss: float) -> PlateauState:
    """Cut the learning rate once ``patience + 1`` epochs in a row fail to improve."""
    if not math.isfinite(epoch_val_loss):
        raise InvalidArgument("validation loss must be finite")
    if epoch_val_loss < state.best_loss - state.min_delta:
        return replace(state, best_loss=epoch_val_loss, wait=0)
    wait = state.wait + 1
    if wait > state.patience:
        return replace(state, current_lr=max(state.current_lr * state.factor, state.min_lr), wait=0)
    return replace(state, wait=wait)


@dataclass(frozen=True)
class CheckpointState:
    best_val_loss: float = math.inf
    best_epoch: Optional[int] = None
    best_weights: Optional[nn.NetworkState] = None


def checkpoint_update(state: CheckpointState, epoch: int, val_loss: float, net) -> CheckpointState:
    """Keep a snapshot of ``net`` iff ``val_loss`` strictly beats the best so far."""
    if not math.isfinite(val_loss):
        raise InvalidArgument("validation loss must be finite")
    if val_loss < state.best_val_loss:
        return CheckpointState(val_loss, epoch, net.copy())
    return state


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    initial_lr: float = 1e-4
    shuffle_seed: int = 0
    patience: int = 5
    factor: float = 0.2
    min_lr: float = 1e-7
    min_delta: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise InvalidArgument("initial_lr must be positive")


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "train_acc", "val_acc",
                   "train_prec", "val_prec", "train_rec", "val_rec")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    train_prec: float
    val_prec: float
    train_rec: float
    val_rec: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != HISTORY_COLUMNS:
            raise InvalidArgument("history table header does not match the expected columns")
        records = []
        for row in rows[1:]:
            if len(row) != len(HISTORY_COLUMNS):
                raise InvalidArgument(f"history row has {len(row)} fields")
            records.append(EpochRecord(int(row[0]), *(float(x) for x in row[1:])))
        return cls(records)


def _split_xy(data, input_dim, name):
    x, y = data
    x = nn.as_matrix(x, name)
    y = nn.as_matrix(y, name + " labels")
    if x.shape[0] == 0:
        raise InvalidArgument(f"{name} set is empty")
    if x.shape[0] != y.shape[0]:
        raise InvalidArgument(f"{name} set has {x.shape[0]} rows but {y.shape[0]} labels")
    if x.shape[1] != input_dim:
        raise InvalidArgument(f"{name} set has {x.shape[1]} features, network expects {input_dim}")
    return x, y


def _score(net, x, y, threshold, epoch):
    out, _ = nn.forward_pass(net, x, nn.Mode.INFERENCE)
    if not np.all(np.isfinite(out)):
        raise TrainingDiverged("non-finite network output", epoch)
    loss, _ = nn.bce_loss(out, y)
    return loss, evaluate(y, out, threshold)


def train(net: nn.NetworkState, train_set, val_set, config: TrainConfig,
          on_epoch_end: Optional[Callable] = None):
    """Mini-batch Adam on BCE with plateau scheduling and best-val-loss checkpointing.

    ``train_set``/``val_set`` are ``(features, labels)`` pairs. Returns the
    checkpointed network (never simply the last epoch) and the history.
    ``on_epoch_end(epoch, net, record)`` is called after each epoch with the
    live network.
    """
    xt, yt = _split_xy(train_set, net.input_dim, "train")
    xv, yv = _split_xy(val_set, net.input_dim, "validation")

    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.shuffle_seed).spawn(2))
    adam = adam_init(net.parameters(), config.initial_lr, config.beta1, config.beta2, config.adam_epsilon)
    plateau = PlateauState(config.initial_lr, config.patience, config.factor,
                           min(config.min_lr, config.initial_lr), config.min_delta)
    ckpt = CheckpointState()
    history = TrainHistory()
    n = xt.shape[0]

    # overflow surfaces as non-finite values, which are checked explicitly below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            lr = plateau.current_lr
            adam = replace(adam, alpha=lr)
            order = shuffle_rng.permutation(n)
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                out, trace = nn.forward_pass(net, xt[idx], nn.Mode.TRAIN, rng=dropout_rng)
                if not np.all(np.isfinite(out)):
                    raise TrainingDiverged("non-finite network output", epoch)
                loss, grad = nn.bce_loss(out, yt[idx])
                if not math.isfinite(loss):
                    raise TrainingDiverged("non-finite training loss", epoch)
                grads = nn.backward_pass(net, trace, grad)
                try:
                    params, adam = adam_step(adam, net.parameters(), grads)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(str(exc), epoch) from exc
                net = nn.update_batchnorm_stats(net.with_parameters(params), trace)

            train_loss, train_m = _score(net, xt, yt, config.threshold, epoch)
            val_loss, val_m = _score(net, xv, yv, config.threshold, epoch)
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise TrainingDiverged("non-finite epoch loss", epoch)
            record = EpochRecord(epoch, lr, train_loss, val_loss,
                                 train_m.accuracy, val_m.accuracy, train_m.precision, val_m.precision,
                                 train_m.recall, val_m.recall)
            history.records.append(record)
            ckpt = checkpoint_update(ckpt, epoch, val_loss, net)
            plateau = plateau_update(plateau, val_loss)
            if on_epoch_end is not None:
                on_epoch_end(epoch, net, record)

    return ckpt.best_weights, history
