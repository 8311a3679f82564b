"""SGD with Nesterov momentum, lr schedules, and the training loops.

Three regimes share one optimizer:

* ``e2e``: one global loss, one backward through every block.
* ``local``: each block trains on its own head's loss; block inputs are
  detached, so updates happen block by block inside a step.
* ``man``: local training with the momentum adapters enabled; after all
  blocks update, each adapter's EMA copy is refreshed from the next
  block's first layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Parameter, Tape, Tensor, backward, softmax_cross_entropy
from .memory import measure_peak_memory
from .network import PartitionedNetwork, ema_update, forward_inference, forward_train_block

MODES = ("e2e", "local", "man")


class NumericalError(RuntimeError):
    """Raised when a loss or gradient goes non-finite."""


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 128
    lr_schedule: str = "cosine"
    man_momentum: float = 0.995
    seed: int = 0
    mode: str = "local"
    aux_lr: Optional[float] = None   # head/adapter rate; defaults to lr

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.man_momentum <= 1.0:
            raise ValueError(
                f"man_momentum must be in [0, 1], got {self.man_momentum}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class MetricsRow:
    epoch: int
    split: str
    mode: str
    block: str
    loss: Optional[float]
    total_objective: Optional[float]
    accuracy: Optional[float]
    lr: float
    peak_scalars: int


METRICS_HEADER = "epoch,split,mode,block,loss,total_objective,accuracy,lr,peak_scalars"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(path, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(",".join([
                str(r.epoch), r.split, r.mode, r.block,
                _fmt(r.loss), _fmt(r.total_objective), _fmt(r.accuracy),
                _fmt(r.lr), str(r.peak_scalars),
            ]) + "\n")


class TrainState:
    """Mutable optimizer and bookkeeping state for one fit run."""

    def __init__(self):
        self.epoch = 0
        self.step = 0
        self.velocities: dict[str, np.ndarray] = {}
        self.history: list[MetricsRow] = []
        self.best_test_error: float = math.inf
        self.final_test_error: float = math.nan

    def velocity(self, p: Parameter) -> np.ndarray:
        v = self.velocities.get(p.id)
        if v is None:
            v = np.zeros_like(p.value.data)
            self.velocities[p.id] = v
        return v


def lr_at(schedule: str, epoch: int, total_epochs: int, lr_max: float) -> float:
    """Cosine: lr_max * (1 + cos(pi * epoch / total)) / 2; constant: lr_max."""
    if schedule == "constant":
        return lr_max
    if total_epochs <= 0:
        return lr_max
    return lr_max * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def sgd_step(params: Sequence[Parameter], state: TrainState, lr: float, *,
             momentum: float, weight_decay: float) -> None:
    """Nesterov momentum step with L2 decay folded into the gradient.

    v <- mu*v + g; theta <- theta - lr*(g + mu*v). Decay is skipped for
    parameters flagged decay=False (the adapters' learnable bias).
    """
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {p.id}")
        if weight_decay and p.decay:
            g = g + weight_decay * p.value.data
        v = state.velocity(p)
        v *= momentum
        v += g
        p.value.data -= lr * (g + momentum * v)
        p.updates += 1


def _check_mode(net: PartitionedNetwork, mode: str) -> None:
    if mode == "man" and not net.flags.use_adapter:
        raise ValueError("mode 'man' requires a network built with adapters")
    if mode == "local" and net.flags.use_adapter:
        raise ValueError("mode 'local' requires a network built without adapters")


def local_train_step(net: PartitionedNetwork, batch, cfg: SgdConfig,
                     state: TrainState) -> dict:
    """One optimizer step of block-local training.

    Blocks run in order; each computes its local loss, backpropagates
    inside its isolation boundary, and updates immediately. The detached
    activation feeds the next block. The last block trains on the global
    loss through the final classifier. Afterwards, every adapter's EMA
    copy tracks the freshly updated next-block first layer.
    """
    if net.K == 1:
        return e2e_train_step(net, batch, cfg, state)
    x, y = batch
    lr = lr_at(cfg.lr_schedule, state.epoch, cfg.epochs, cfg.lr)
    aux_lr = cfg.aux_lr if cfg.aux_lr is not None else lr
    net.zero_grad()
    losses = []
    with Tape():
        xt = Tensor(x)
        for k in range(1, net.K + 1):
            logits, nxt = forward_train_block(net, k, xt)
            loss = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite local loss at block {k}")
            backward(loss)
            main, aux = net.update_set(k)
            sgd_step(main, state, lr, momentum=cfg.momentum,
                     weight_decay=cfg.weight_decay)
            if aux:
                sgd_step(aux, state, aux_lr, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
            losses.append(loss.item())
            xt = nxt
    if net.flags.use_adapter and net.flags.use_ema:
        for i, adapter in enumerate(net.adapters):
            ema_update(adapter, net.blocks[i + 1].first_parametric,
                       cfg.man_momentum)
    state.step += 1
    return {"losses": losses, "total": float(sum(losses)), "lr": lr}


def e2e_train_step(net: PartitionedNetwork, batch, cfg: SgdConfig,
                   state: TrainState) -> dict:
    """One global step: a single loss through all blocks and the classifier."""
    x, y = batch
    lr = lr_at(cfg.lr_schedule, state.epoch, cfg.epochs, cfg.lr)
    net.zero_grad()
    with Tape():
        logits = forward_inference(net, Tensor(x))
        loss = softmax_cross_entropy(logits, y)
        if not np.isfinite(loss.data):
            raise NumericalError("non-finite global loss")
        backward(loss)
        sgd_step(net.main_parameters(), state, lr, momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay)
    state.step += 1
    return {"losses": [loss.item()], "total": loss.item(), "lr": lr}


def total_objective(net: PartitionedNetwork, batch) -> float:
    """Global loss plus the sum of local head losses, on current values.

    Logging-only quantity; it is never backpropagated jointly.
    """
    x, y = batch
    total = 0.0
    xt = Tensor(x)
    for k in range(1, net.K + 1):
        logits, nxt = forward_train_block(net, k, xt)
        total += softmax_cross_entropy(logits, y).item()
        xt = nxt
    return total


def evaluate(net: PartitionedNetwork, x: np.ndarray, y: np.ndarray,
             chunk: int = 4096) -> float:
    """Accuracy of the inference path over a split."""
    correct = 0
    for lo in range(0, len(y), chunk):
        logits = forward_inference(net, Tensor(x[lo:lo + chunk]))
        correct += int((np.argmax(logits.data, axis=1) == y[lo:lo + chunk]).sum())
    return correct / len(y) if len(y) else math.nan


def fit(net: PartitionedNetwork, dataset, cfg: SgdConfig) -> TrainState:
    """Run the configured number of epochs and evaluate every epoch.

    Batches are reshuffled each epoch with a seed derived from
    (cfg.seed, epoch); the last partial batch is kept. Metrics rows land in
    the returned state's history. A non-finite loss aborts with epoch and
    step context.
    """
    _check_mode(net, cfg.mode)
    state = TrainState()
    step_fn = e2e_train_step if cfg.mode == "e2e" else local_train_step
    peak = measure_peak_memory(net.specs, net.K, cfg.mode, cfg.batch_size,
                               input_shape=net.input_shape,
                               n_classes=net.n_classes).peak_scalars
    xtr, ytr = dataset.train_inputs, dataset.train_labels
    xte, yte = dataset.test_inputs, dataset.test_labels
    if len(ytr) == 0 or len(yte) == 0:
        raise ValueError("fit requires non-empty train and test splits")

    def eval_row(epoch, lr):
        acc = evaluate(net, xte, yte)
        state.history.append(MetricsRow(epoch, "test", cfg.mode, "all",
                                        None, None, acc, lr, peak))
        err = 1.0 - acc
        state.best_test_error = min(state.best_test_error, err)
        state.final_test_error = err
        return acc

    eval_row(0, lr_at(cfg.lr_schedule, 0, cfg.epochs, cfg.lr))
    n = len(ytr)
    for epoch_idx in range(cfg.epochs):
        state.epoch = epoch_idx
        lr = lr_at(cfg.lr_schedule, epoch_idx, cfg.epochs, cfg.lr)
        order = np.random.default_rng((cfg.seed, epoch_idx)).permutation(n)
        sums = None
        total_sum = 0.0
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                metrics = step_fn(net, (xtr[idx], ytr[idx]), cfg, state)
            except NumericalError as exc:
                raise NumericalError(
                    f"{exc} (epoch {epoch_idx + 1}, step {state.step + 1})") from exc
            if sums is None:
                sums = [0.0] * len(metrics["losses"])
            for i, v in enumerate(metrics["losses"]):
                sums[i] += v
            total_sum += metrics["total"]
            batches += 1
        mean_total = total_sum / batches
        for i, s in enumerate(sums):
            block_label = str(i + 1) if len(sums) > 1 else str(net.K)
            state.history.append(MetricsRow(
                epoch_idx + 1, "train", cfg.mode, block_label,
                s / batches, mean_total, None, lr, peak))
        eval_row(epoch_idx + 1, lr)
    return state
