"""AdamW fine-tuning loop with a step learning-rate schedule and
lowest-validation-loss checkpoint selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import kernels
from . import tensor as T
from .checkpoint import Checkpoint
from .data import AugmentationPolicy, DatasetBundle, Split, batches
from .vit import ViT

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 80
    lr_period: int = 25
    lr_factor: float = 0.5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    eval_batch_size: int = 64
    seed: int = 0
    precision: str = "float32"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.lr_period < 1:
            raise ValueError("epochs and lr_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr`` scaled by ``lr_factor`` every ``lr_period`` epochs."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.lr_factor ** (epoch // cfg.lr_period)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One in-place AdamW update with bias correction and decoupled decay."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        kernels.adamw_update(theta, np.ascontiguousarray(g, dtype=theta.dtype), state.m[name], state.v[name],
                             lr, beta1, beta2, eps, weight_decay, bc1, bc2)
    return params, state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    checkpoint: Checkpoint
    best_epoch: int
    best_val_loss: float
    log: List[LogRow]


def evaluate_loss(model: ViT, split: Split, batch_size: int = 64) -> float:
    total = 0.0
    with T.no_grad():
        for x, y, _ in batches(split, batch_size, None):
            total += float(T.cross_entropy(model(x), y).data) * len(y)
    return total / len(split)


def accuracy(model: ViT, split: Split, batch_size: int = 64) -> float:
    probs = model.predict_proba(split.images, batch_size)
    return float((probs.argmax(axis=1) == split.labels).mean())


def fit(model: ViT, bundle: DatasetBundle, cfg: TrainConfig,
        policy: Optional[AugmentationPolicy] = None) -> FitResult:
    """Train ``model`` in place and return the lowest-validation-loss snapshot.

    Ties keep the earlier epoch. Validation never sees augmentation.
    """
    train, val = bundle.splits["train"], bundle.splits["val"]
    state = OptimizerState()
    params = {k: t.data for k, t in model.params.items()}
    best = None
    rows: List[LogRow] = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        seen, running = 0, 0.0
        for b, (x, y, _) in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch, policy, cfg.seed)):
            loss = T.cross_entropy(model(x, train=True, rng=drop_rng), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            model.zero_grad()
            loss.backward()
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            if cfg.clip_norm is not None:
                clip_grad_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            running += value * len(y)
            seen += len(y)
        val_loss = evaluate_loss(model, val, cfg.eval_batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rows.append(LogRow(epoch, running / seen, val_loss, lr))
        log.debug("epoch %d train %.4f val %.4f lr %.2e", epoch, running / seen, val_loss, lr)
        if best is None or val_loss < best[1]:
            best = (epoch, val_loss, Checkpoint.from_model(model))
    model.zero_grad()
    return FitResult(best[2], best[0], best[1], rows)


def write_log_csv(rows: List[LogRow], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in rows:
            w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}", f"{r.lr:.6g}"])
