"""Cross-entropy training over sliding windows and the accuracy metric.

Training iterates mini-batches of windows in chronological order (an opt-in
shuffle exists but is off by default so runs are reproducible), averages the
loss per node and per window, and applies Adam with additive L2 weight decay.
Accuracy is the fraction of exact per-host event-id matches, aggregated over
all hosts and windows; the ``exclude_zero_event`` flag drops no-event targets
from the counted set without changing any individual match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from . import numerics as nm
from .cells import ModelParams, forward_sequence, init_params
from .graph import HostGraph, with_order
from .numerics import AdamState, Matrix, Tape, adam_step, backward
from .pipeline import EventDataset, WindowBatch, sliding_windows, split

__all__ = [
    "TrainConfig",
    "EpochMetrics",
    "cross_entropy",
    "accuracy",
    "majority_baseline",
    "train",
    "evaluate",
    "write_metrics_csv",
]

PROB_FLOOR = 1e-12
EVAL_CHUNK_ROWS = 4096


@dataclass
class TrainConfig:
    """Hyperparameters of one training run (defaults are the reference setup)."""

    variant: str = "step"
    s: int = 10
    d_h: int = 128
    K: int = 2
    lr: float = 1e-3
    weight_decay: float = 1.5e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    train_fraction: float = 0.8
    exclude_zero_event: bool = False
    kernel_size: int = 3
    shuffle_seed: int | None = None

    def __post_init__(self):
        if self.variant not in ("step", "lstm", "convlstm"):
            raise InputError(f"unknown variant {self.variant!r}")
        positive = {
            "s": self.s,
            "d_h": self.d_h,
            "K": self.K,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "kernel_size": self.kernel_size,
        }
        for name, value in positive.items():
            if value is None or value <= 0:
                if name == "weight_decay" and value == 0:
                    continue  # turning decay off is legitimate
                raise InputError(f"{name} must be positive, got {value}")
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


def cross_entropy(probs: Matrix, targets: np.ndarray) -> Matrix:
    """Mean negative log-likelihood, floored at 1e-12 before the log."""
    t = np.asarray(targets, dtype=np.intp)
    picked = nm.take_per_row(probs, t)
    total = nm.sum_all(nm.log(picked, floor=PROB_FLOOR))
    return nm.scale(total, -1.0 / probs.rows)


def accuracy(
    preds: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None
) -> float:
    """Fraction of exact matches over the counted positions."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise InputError(
            f"predictions and targets differ in length: {preds.shape} vs {targets.shape}"
        )
    if mask is not None:
        preds, targets = preds[mask], targets[mask]
    if targets.size == 0:
        raise InputError("no targets to score")
    return float(np.mean(preds == targets))


def _target_mask(targets: np.ndarray, exclude_zero_event: bool) -> np.ndarray | None:
    return (targets != 0) if exclude_zero_event else None


def majority_baseline(
    train_batch: WindowBatch, test_batch: WindowBatch, exclude_zero_event: bool = False
) -> float:
    """Accuracy of predicting each host's modal training target (ties to the
    lowest class)."""
    train_targets = np.stack(train_batch.targets)  # windows x hosts
    test_targets = np.concatenate(test_batch.targets)
    n = train_targets.shape[1]
    modal = np.array(
        [np.bincount(train_targets[:, i]).argmax() for i in range(n)]
    )
    preds = np.tile(modal, len(test_batch))
    return accuracy(preds, test_targets, _target_mask(test_targets, exclude_zero_event))


def _stack_windows(windows: list[list[Matrix]], s: int) -> list[Matrix]:
    """Row-stack a batch of windows per time step."""
    if len(windows) == 1:
        return list(windows[0])
    return [
        Matrix(np.vstack([w[t].data for w in windows])) for t in range(s - 1)
    ]


def train(
    dataset: EventDataset, config: TrainConfig
) -> tuple[ModelParams, list[EpochMetrics]]:
    """Fit the configured variant on the dataset's chronological train split.

    Returns the final parameters and one metrics row per epoch. train_acc is
    measured on the same forward passes that produce the updates, so it
    reflects the parameters as they evolve within the epoch; test_acc is
    measured after the epoch. Deterministic for a given config.
    """
    windows = sliding_windows(dataset, config.s)
    train_batch, test_batch = split(windows, config.train_fraction)
    graph = with_order(dataset.graph, config.K) if config.variant == "step" else None
    params = init_params(
        config.variant,
        d_x=dataset.d,
        d_h=config.d_h,
        d=dataset.d,
        K=config.K,
        seed=config.seed,
        kernel_size=config.kernel_size,
    )
    state = AdamState()
    shuffle_rng = (
        np.random.default_rng(config.shuffle_seed)
        if config.shuffle_seed is not None
        else None
    )
    metrics: list[EpochMetrics] = []
    w_train = len(train_batch)
    step_count = 0
    for epoch in range(config.epochs):
        order = np.arange(w_train)
        if shuffle_rng is not None:
            shuffle_rng.shuffle(order)
        loss_sum = 0.0
        hits = 0
        counted = 0
        for start in range(0, w_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_windows = [train_batch.inputs[i] for i in idx]
            targets = np.concatenate([train_batch.targets[i] for i in idx])
            frames = _stack_windows(batch_windows, config.s)
            with Tape() as tape:
                probs = forward_sequence(params, graph, frames, batch=len(idx))
                loss = cross_entropy(probs, targets)
            loss_value = float(loss.data[0, 0])
            if not np.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            grads = backward(tape, loss)
            named = {name: grads.get(t) for name, t in params.tensors.items()}
            step_count += 1
            params.tensors = adam_step(
                params.tensors,
                named,
                state,
                lr=config.lr,
                weight_decay=config.weight_decay,
                t=step_count,
            )
            loss_sum += loss_value * len(idx)
            preds = probs.data.argmax(axis=1)
            mask = _target_mask(targets, config.exclude_zero_event)
            if mask is None:
                hits += int((preds == targets).sum())
                counted += targets.size
            else:
                hits += int((preds[mask] == targets[mask]).sum())
                counted += int(mask.sum())
        if counted == 0:
            raise InputError("no targets to score")
        test_acc = evaluate(params, graph, test_batch, config)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / w_train,
                train_acc=hits / counted,
                test_acc=test_acc,
            )
        )
    return params, metrics


def evaluate(
    params: ModelParams,
    graph: HostGraph | None,
    test_batch: WindowBatch,
    config: TrainConfig,
) -> float:
    """Accuracy of argmax predictions over every (window, host) pair."""
    if len(test_batch) == 0:
        raise InputError("no targets to score")
    n = test_batch.inputs[0][0].rows
    chunk = max(1, EVAL_CHUNK_ROWS // n)
    all_preds = []
    for start in range(0, len(test_batch), chunk):
        windows = test_batch.inputs[start : start + chunk]
        frames = _stack_windows(windows, config.s)
        probs = forward_sequence(params, graph, frames, batch=len(windows))
        all_preds.append(probs.data.argmax(axis=1))
    preds = np.concatenate(all_preds)
    targets = np.concatenate(test_batch.targets)
    return accuracy(preds, targets, _target_mask(targets, config.exclude_zero_event))


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    """One row per epoch: epoch,train_loss,train_acc,test_acc."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,train_acc,test_acc\n")
        for m in metrics:
            fh.write(f"{m.epoch},{m.train_loss:.12g},{m.train_acc:.12g},{m.test_acc:.12g}\n")
