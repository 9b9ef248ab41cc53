"""Loss, mini-batch SGD, validation callbacks and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import AugmentConfig, IndexRow, ImageLoader, batches
from .errors import DimensionError, ParameterError, StateError, TrainingDivergedError
from .model import SequentialModel, save_weights
from .tensor import Rng, Stream, derive_seed

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class ReduceLRConfig:
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6


@dataclass
class EarlyStopConfig:
    patience: int = 10
    min_delta: float = 1e-4


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    reduce_lr: ReduceLRConfig = field(default_factory=ReduceLRConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    checkpoint_path: str | None = None
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.reduce_lr.factor < 1:
            raise ParameterError(f"reduce-LR factor must be in (0, 1), got {self.reduce_lr.factor}")
        if self.reduce_lr.patience < 1 or self.early_stop.patience < 1:
            raise ParameterError("callback patiences must be >= 1")
        if not self.reduce_lr.min_lr > 0:
            raise ParameterError(f"min_lr must be > 0, got {self.reduce_lr.min_lr}")
        if self.early_stop.min_delta < 0:
            raise ParameterError(f"min_delta must be >= 0, got {self.early_stop.min_delta}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    wall_ms: int = field(default=0, compare=False)


@dataclass
class CallbackState:
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improve_lr: int = 0
    epochs_since_improve_stop: int = 0


@dataclass(frozen=True)
class CallbackDecision:
    save_checkpoint: bool
    new_lr: float | None
    stop: bool


def bce_loss(p: np.ndarray, y: np.ndarray, eps: float = BCE_EPS) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the sigmoid's input.

    ``p`` is clamped to [eps, 1 - eps] for the loss only; the gradient is the
    fused ``(p - y) / N``.
    """
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss: prediction shape {p.shape} != target shape {y.shape}")
    n = p.shape[0]
    pc = np.clip(p.astype(np.float64), eps, 1.0 - eps)
    yd = y.astype(np.float64)
    loss = -float(np.mean(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc)))
    grad = ((p - y) / n).astype(p.dtype)
    return loss, grad


def sgd_step(model: SequentialModel, lr: float) -> None:
    """``p <- p - lr * g`` for trainable parameters; clears the gradients."""
    stepped = False
    for layer in model.layers:
        if not (layer.trainable and layer.grads):
            continue
        for key, value in layer.params.items():
            np.subtract(value, value.dtype.type(lr) * layer.grads[key], out=value)
        layer.grads.clear()
        stepped = True
    if not stepped:
        raise StateError("sgd_step called with no gradients (run backward first)")


def apply_callbacks(state: CallbackState, val_loss: float, cfg: TrainConfig,
                    lr: float, epoch: int) -> CallbackDecision:
    """Checkpoint / reduce-LR / early-stop bookkeeping for one finished epoch.

    An epoch improves when ``val_loss < best - min_delta``; improvement
    resets both patience counters.
    """
    if val_loss < state.best_val_loss - cfg.early_stop.min_delta:
        state.best_val_loss = val_loss
        state.best_epoch = epoch
        state.epochs_since_improve_lr = 0
        state.epochs_since_improve_stop = 0
        return CallbackDecision(True, None, False)
    state.epochs_since_improve_lr += 1
    state.epochs_since_improve_stop += 1
    new_lr = None
    if state.epochs_since_improve_lr >= cfg.reduce_lr.patience:
        new_lr = max(lr * cfg.reduce_lr.factor, cfg.reduce_lr.min_lr)
        state.epochs_since_improve_lr = 0
    stop = state.epochs_since_improve_stop >= cfg.early_stop.patience
    return CallbackDecision(False, new_lr, stop)


def evaluate_loss_accuracy(model: SequentialModel, rows: Sequence[IndexRow], batch_size: int,
                           loader: ImageLoader) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Infer-mode pass in index order: ``(loss, accuracy, probabilities, targets)``."""
    probs, targets = [], []
    total = 0.0
    for batch in batches(rows, batch_size, loader, shuffle=False, class_names=model.class_names):
        p = model.forward(batch.inputs, mode="infer")
        loss, _ = bce_loss(p, batch.targets)
        total += loss * len(batch)
        probs.append(p[:, 0])
        targets.append(batch.targets[:, 0])
    if not probs:
        return math.nan, math.nan, np.zeros(0, np.float32), np.zeros(0, np.float32)
    p = np.concatenate(probs)
    y = np.concatenate(targets)
    acc = float(np.mean((p > 0.5) == (y > 0.5)))
    return total / len(p), acc, p, y


@dataclass
class TrainResult:
    model: SequentialModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    final_state: dict[str, np.ndarray]

    @property
    def restored(self) -> bool:
        return self.best_epoch != (self.history[-1].epoch if self.history else 0)


def run_training(model: SequentialModel, train_rows: Sequence[IndexRow], val_rows: Sequence[IndexRow],
                 cfg: TrainConfig, loader: ImageLoader, on_epoch=None) -> TrainResult:
    """Train with mini-batch SGD and return the best-validation-loss weights."""
    lr = cfg.learning_rate
    state = CallbackState()
    history: list[EpochRecord] = []
    best_state = None
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        dropout_rng = Rng(derive_seed(cfg.seed, epoch), Stream.DROPOUT)
        loss_sum, correct, seen = 0.0, 0, 0
        for step, batch in enumerate(batches(train_rows, cfg.batch_size, loader, shuffle=True,
                                             seed=cfg.seed, augment_cfg=cfg.augment, epoch=epoch,
                                             class_names=model.class_names), start=1):
            p = model.forward(batch.inputs, mode="train", rng=dropout_rng)
            loss, dz = bce_loss(p, batch.targets)
            if not math.isfinite(loss) or not np.all(np.isfinite(p)):
                raise TrainingDivergedError(epoch, step, loss)
            model.backward(dz, wrt="logits")
            sgd_step(model, lr)
            loss_sum += loss * len(batch)
            correct += int(np.sum((p[:, 0] > 0.5) == (batch.targets[:, 0] > 0.5)))
            seen += len(batch)
        val_loss, val_acc, _, _ = evaluate_loss_accuracy(model, val_rows, cfg.batch_size, loader)
        if not math.isfinite(val_loss) and len(val_rows):
            raise TrainingDivergedError(epoch, 0, val_loss)
        record = EpochRecord(epoch, loss_sum / max(seen, 1), correct / max(seen, 1),
                             val_loss, val_acc, lr, int((time.perf_counter() - t0) * 1000))
        history.append(record)
        decision = apply_callbacks(state, val_loss, cfg, lr, epoch)
        if decision.save_checkpoint:
            best_state = model.state_dict()
            if cfg.checkpoint_path:
                save_weights(model, cfg.checkpoint_path)
        log.info("epoch %d/%d  loss %.4f acc %.4f  val_loss %.4f val_acc %.4f  lr %.2e%s",
                 epoch, cfg.epochs, record.train_loss, record.train_acc, val_loss, val_acc, lr,
                 "  [checkpoint]" if decision.save_checkpoint else "")
        if on_epoch is not None:
            on_epoch(record, decision)
        if decision.new_lr is not None and decision.new_lr != lr:
            log.info("reducing learning rate to %.2e", decision.new_lr)
            lr = decision.new_lr
        if decision.stop:
            log.info("early stop after epoch %d (best epoch %d)", epoch, state.best_epoch)
            stopped = True
            break
    final_state = model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, state.best_epoch, state.best_val_loss, stopped, final_state)
