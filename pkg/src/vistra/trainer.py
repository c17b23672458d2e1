"""Pretraining, transfer with scheduled snapshots, and loss traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, CheckpointDigestError
from .data import Dataset, batches
from .nets import HeadSpec, ModelGraph, head_loss, logits, replace_head
from .tensor import AdamState, Tape, Tensor, adam_step

TRANSFER_SCHEDULE = (0, 10, 20, 30, 60, 150, 1000, 3000)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss {loss})")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int | None = 3
    iterations: int | None = None  # overrides epochs when set
    seed: int = 0
    loss: str = "categorical"
    val_fraction: float = 0.1

    def __post_init__(self):
        # lr == 0 is allowed: it is the no-op control run
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be a finite non-negative number, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss not in ("categorical", "binary"):
            raise ValueError(f"loss must be categorical or binary, got {self.loss!r}")
        if self.epochs is None and self.iterations is None:
            raise ValueError("set either epochs or iterations")

    def budget(self, n_train: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * math.ceil(n_train / self.batch_size)


@dataclass(frozen=True)
class SnapshotSchedule:
    iterations: tuple[int, ...] = TRANSFER_SCHEDULE

    def __post_init__(self):
        its = tuple(int(i) for i in self.iterations)
        if not its:
            raise ValueError("snapshot schedule is empty")
        if its[0] < 0 or any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError(f"snapshot schedule must be strictly increasing and non-negative, got {list(its)}")
        object.__setattr__(self, "iterations", its)


@dataclass
class TraceRow:
    iteration: int
    loss: float
    metric: float | None = None


def write_trace(rows: list[TraceRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "metric"])
        for r in rows:
            w.writerow([r.iteration, f"{r.loss:.6g}", "" if r.metric is None else f"{r.metric:.6g}"])
    return path


def evaluate(model: ModelGraph, dataset: Dataset, indices, batch_size: int = 100) -> float:
    """Accuracy (categorical head) or mean attribute accuracy (sigmoid head),
    always with inference-mode batch norm."""
    indices = np.asarray(indices)
    if len(indices) == 0:
        return float("nan")
    binary = model.config["head"]["activation"] == "sigmoid"
    correct = 0.0
    for i in range(0, len(indices), batch_size):
        x, y = dataset.batch(indices[i : i + batch_size])
        z = logits(model, x).data
        if binary:
            correct += float(np.sum((z > 0) == (y > 0.5))) / y.shape[1]
        else:
            correct += float(np.sum(z.argmax(axis=1) == y))
    return correct / len(indices)


def train_step(model: ModelGraph, x: np.ndarray, y: np.ndarray, state: AdamState) -> float:
    """One Adam step on all parameters; batch-norm statistics update in place."""
    params = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    with Tape() as tape:
        loss = head_loss(model, logits(model, x, training=True, params=params), y)
        value = loss.item()
        if not math.isfinite(value):
            return value
        grads = tape.backward(loss)
    adam_step(model.params, {k: grads[t] for k, t in params.items()}, state)
    return value


def _stream(train_idx: np.ndarray, batch_size: int, seed: int):
    """Endless batch stream; each epoch reshuffles from ``(seed, epoch)``."""
    epoch = 0
    while True:
        for pos, b in enumerate(batches(train_idx, batch_size, epoch_seed=[seed, epoch])):
            yield epoch, pos, b
        epoch += 1


def _check_loss(model: ModelGraph, config: TrainConfig) -> None:
    want = HeadSpec(**model.config["head"]).loss
    if want != config.loss:
        raise ValueError(f"config loss {config.loss!r} does not match the {want!r} head")


def _run(
    model: ModelGraph,
    dataset: Dataset,
    config: TrainConfig,
    budget: int,
    snapshots: tuple[int, ...],
    on_snapshot: Callable[[Checkpoint], None] | None,
    progress: Callable[[int, float], None] | None,
) -> tuple[list[Checkpoint], list[TraceRow]]:
    train_idx, val_idx = dataset.split(config.val_fraction, seed=config.seed)
    state = AdamState(lr=config.lr)
    trace: list[TraceRow] = []
    taken: list[Checkpoint] = []
    stream = _stream(train_idx, config.batch_size, config.seed)
    epoch, pos = 0, -1
    wanted = set(snapshots)
    per_epoch = math.ceil(len(train_idx) / config.batch_size)

    def snap(it):
        ck = Checkpoint.from_model(model, it, state, {"seed": config.seed, "epoch": epoch, "batch": pos + 1})
        taken.append(ck)
        if on_snapshot is not None:
            on_snapshot(ck)

    if 0 in wanted:
        snap(0)
    for it in range(1, budget + 1):
        epoch, pos, idx = next(stream)
        x, y = dataset.batch(idx)
        loss = train_step(model, x, y, state)
        if not math.isfinite(loss):
            raise DivergenceError(it, loss)
        metric = None
        if it in wanted or it == budget or pos == per_epoch - 1:
            metric = evaluate(model, dataset, val_idx)
        trace.append(TraceRow(it, loss, metric))
        if progress is not None:
            progress(it, loss)
        if it in wanted:
            snap(it)
    return taken, trace


def pretrain(
    model: ModelGraph,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    progress: Callable[[int, float], None] | None = None,
) -> tuple[Checkpoint, list[TraceRow]]:
    """Train ``model`` in place on ``dataset``; return its final checkpoint and
    the loss trace."""
    if model.input_shape != dataset.images.shape[1:]:
        raise ValueError(f"model input {model.input_shape} does not match dataset images {dataset.images.shape[1:]}")
    _check_loss(model, config)
    n_train = len(dataset.split(config.val_fraction, seed=config.seed)[0])
    budget = config.budget(n_train)
    taken, trace = _run(model, dataset, config, budget, (budget,), None, progress)
    return (taken[-1] if taken else Checkpoint.from_model(model, 0)), trace


def transfer(
    checkpoint: Checkpoint,
    dataset: Dataset,
    config: TrainConfig,
    schedule: SnapshotSchedule = SnapshotSchedule(),
    head: HeadSpec | None = None,
    expected_digest: str | None = None,
    on_snapshot: Callable[[Checkpoint], None] | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[list[Checkpoint], list[TraceRow]]:
    """Swap in a freshly initialized head and train every parameter, taking a
    full snapshot at each scheduled iteration (0 = before any update)."""
    if expected_digest is not None and checkpoint.digest != expected_digest:
        raise CheckpointDigestError(f"checkpoint digest {checkpoint.digest[:12]} != expected {expected_digest[:12]}")
    base = checkpoint.model()
    head = head or HeadSpec(dataset.spec.arity, hidden=None, activation="sigmoid" if dataset.spec.multilabel else "softmax")
    if head.classes != dataset.spec.arity:
        raise ValueError(f"head has {head.classes} outputs but the dataset has arity {dataset.spec.arity}")
    model = replace_head(base, head, seed=config.seed)
    _check_loss(model, config)
    n_train = len(dataset.split(config.val_fraction, seed=config.seed)[0])
    budget = config.budget(n_train)
    if schedule.iterations[-1] > budget:
        raise ValueError(f"snapshot at iteration {schedule.iterations[-1]} is beyond the {budget}-iteration budget")
    return _run(model, dataset, config, budget, schedule.iterations, on_snapshot, progress)


def backbone_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bit-exact comparison of all non-head parameters and statistics."""
    keys = sorted(k for k in a.params if not k.startswith("head/"))
    if keys != sorted(k for k in b.params if not k.startswith("head/")):
        return False
    same = all(np.array_equal(a.params[k], b.params[k]) for k in keys)
    return same and all(np.array_equal(v, b.buffers[k]) for k, v in a.buffers.items())


__all__ = [
    "DivergenceError",
    "SnapshotSchedule",
    "TRANSFER_SCHEDULE",
    "TraceRow",
    "TrainConfig",
    "backbone_equal",
    "evaluate",
    "pretrain",
    "train_step",
    "transfer",
    "write_trace",
]
