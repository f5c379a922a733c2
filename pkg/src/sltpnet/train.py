"""Mini-batch training with SGD-Nesterov and best-validation model selection."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from .nn import functional as F
from .nn.optim import OptimizerState, step_tensors
from .roi import ROIDataset, augment_reflections, stack
from .seeding import substream

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 350
    lr0: float = 1e-4
    momentum: float = 0.6
    decay: float = 1e-6
    seed: int = 0
    augment: bool = True
    report_every: int = 1
    eval_batch_size: int = 64
    time_budget_s: Optional[float] = None  # stop after the epoch that crosses it

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 < 0 or not 0 <= self.momentum < 1 or self.decay < 0:
            raise ValueError("need lr0 >= 0, momentum in [0, 1) and decay >= 0")


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.val_acc)

    def rows(self):
        for i in range(len(self)):
            yield [i + 1, self.train_loss[i], self.train_acc[i], self.val_loss[i], self.val_acc[i]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    predictions: np.ndarray
    probabilities: np.ndarray


def evaluate(weights: M.ModelWeights, samples: Sequence, batch_size: int = 64) -> EvalResult:
    """Infer-mode loss, top-1 accuracy and 1-based predictions over ``samples``."""
    if len(samples) == 0:
        raise TrainingError("nothing to evaluate")
    probs = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack(samples[i : i + batch_size])
        probs.append(M.forward(weights, x, "infer").astype(np.float64))
    p = np.concatenate(probs)
    y = np.array([s.label for s in samples])
    pred = np.argmax(p, axis=1) + 1
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y - 1], 1e-300))))
    return EvalResult(loss, float(np.mean(pred == y)), pred, p)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing batch of one merges into its predecessor
    because batch statistics need at least two samples."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


def train(
    dataset: ROIDataset,
    config: Optional[M.SECNNConfig] = None,
    train_config: Optional[TrainConfig] = None,
    weights: Optional[M.ModelWeights] = None,
    on_epoch: Optional[Callable[[int, TrainingHistory], None]] = None,
) -> tuple[M.ModelWeights, TrainingHistory]:
    """Train on the ``train`` split and keep the snapshot with the best ``val`` accuracy.

    Returns ``(best_weights, history)``; the earliest epoch wins ties.
    """
    tc = train_config or TrainConfig()
    tc.validate()
    config = config or M.SECNNConfig()
    train_set = dataset.subset("train")
    val_set = dataset.subset("val")
    if not train_set or not val_set:
        raise TrainingError("train and val splits must both be nonempty")
    fit_set = augment_reflections(train_set) if tc.augment else list(train_set)
    if len(fit_set) < 2:
        raise TrainingError("need at least two training samples for batch statistics")
    x_all, y_all = stack(fit_set)
    y_all = y_all - 1

    if weights is None:
        weights = M.build_model(config, tc.seed)
    opt = OptimizerState(lr0=tc.lr0, mu=tc.momentum, decay=tc.decay)
    params = weights.trainable()
    drop_rng = substream(tc.seed, "train.dropout")
    history = TrainingHistory()
    best, best_acc = weights.copy(), -1.0

    start = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = substream(tc.seed, "train.shuffle", epoch).permutation(len(fit_set))
        for sl in batch_slices(len(order), tc.batch_size):
            idx = order[sl]
            weights.zero_grad()
            loss, _ = M.loss_and_gradients(weights, x_all[idx], y_all[idx], drop_rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, update {opt.t}")
            step_tensors(params, opt)
        tr = evaluate(weights, train_set, tc.eval_batch_size)
        va = evaluate(weights, val_set, tc.eval_batch_size)
        history.train_loss.append(tr.loss)
        history.train_acc.append(tr.accuracy)
        history.val_loss.append(va.loss)
        history.val_acc.append(va.accuracy)
        history.seconds.append(time.perf_counter() - t0)
        if va.accuracy > best_acc:
            best_acc, best = va.accuracy, weights.copy()
            history.best_epoch = epoch
        if tc.report_every and epoch % tc.report_every == 0:
            log.info(
                "epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f | %.1fs",
                epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, history.seconds[-1],
            )
        if on_epoch is not None:
            on_epoch(epoch, history)
        if tc.time_budget_s is not None and time.perf_counter() - start >= tc.time_budget_s:
            log.info("time budget of %.0fs reached after epoch %d", tc.time_budget_s, epoch)
            break
    weights.zero_grad()
    return best, history
