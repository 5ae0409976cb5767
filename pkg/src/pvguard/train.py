"""Minibatch training under cross-entropy with seeded shuffling and best-epoch selection."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .domain import Dataset, DayRecord
from .model import (
    ModelConfig,
    NormStats,
    Params,
    batch_arrays,
    bind,
    compute_norm_stats,
    copy_params,
    forward_nodes,
    loss_and_grads,
    predict_proba,
)
from .tensor import NumericError, Tape

log = logging.getLogger(__name__)

OPTIMIZERS = ("AdaptiveMoments", "SGD")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "AdaptiveMoments"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    early_stop_patience: int = 5
    grad_clip_norm: float = 5.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer {self.optimizer!r} not in {OPTIMIZERS}")
        for name in ("epochs", "batch_size", "early_stop_patience"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                out.append(f"{name} must be a positive integer")
        if self.learning_rate < 0:
            out.append("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            out.append("moment decay rates must lie in [0, 1) and adam_eps must be positive")
        if self.grad_clip_norm <= 0:
            out.append("grad_clip_norm must be positive")
        if self.seed < 0:
            out.append("seed must be non-negative")
        if isinstance(self.early_stop_patience, int) and isinstance(self.epochs, int) and self.early_stop_patience > self.epochs:
            out.append("early_stop_patience cannot exceed epochs")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingError(NumericError):
    pass


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


@dataclass
class Optimizer:
    cfg: TrainConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: Params, grads: Params) -> None:
        """Update ``params`` in place."""
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "SGD":
            for k, g in grads.items():
                params[k] -= lr * g
            return
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.adam_eps)


def mean_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Same clamped loss as :func:`tensor.cross_entropy`, without a tape."""
    p = np.clip(probs[:, 1], tn.PROB_CLAMP, 1.0 - tn.PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_batch(params: Params, batch: Sequence[DayRecord], norm: NormStats, cfg: ModelConfig) -> float:
    """Mean cross-entropy of the detector over ``batch``."""
    if not batch:
        raise ValueError("empty batch")
    X, Tf, y = batch_arrays(batch, norm)
    tape = Tape()
    return float(tn.cross_entropy(forward_nodes(tape, bind(tape, params), X, Tf, cfg), y).value)


def dataset_loss_acc(params: Params, X: np.ndarray, Tf: np.ndarray, y: np.ndarray, cfg: ModelConfig) -> tuple[float, float]:
    probs = predict_proba(params, X, Tf, cfg)
    return mean_cross_entropy(probs, y), float(np.mean((probs[:, 1] >= 0.5) == (y == 1)))


@dataclass
class FitResult:
    params: Params
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    norm: NormStats


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


def _step(params, opt, X, Tf, y, model_cfg, cfg, where: str) -> tuple[float, np.ndarray]:
    tape = Tape()
    p = bind(tape, params)
    try:
        probs = forward_nodes(tape, p, X, Tf, model_cfg)
        loss = tn.cross_entropy(probs, y)
    except NumericError as exc:
        raise TrainingError(f"{where}: {exc}") from exc
    if not math.isfinite(float(loss.value)):
        raise TrainingError(f"{where}: non-finite loss")
    tape.backward(loss)
    grads = {k: (np.zeros_like(params[k]) if n.grad is None else n.grad) for k, n in p.items()}
    grads, _ = clip_by_global_norm(grads, cfg.grad_clip_norm)
    opt.step(params, grads)
    return float(loss.value), probs.value


def train_steps(params: Params, X: np.ndarray, Tf: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                model_cfg: ModelConfig, steps: int) -> tuple[Params, list[float]]:
    """Full-batch optimization for a fixed number of steps; returns new params and per-step losses."""
    params = copy_params(params)
    opt = Optimizer(cfg)
    losses = []
    for s in range(steps):
        loss, _ = _step(params, opt, X, Tf, y, model_cfg, cfg, f"step {s}")
        losses.append(loss)
    return params, losses


def fit(params: Params, data: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
        norm: NormStats | None = None, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train on ``data``'s train split; keep the parameters of the lowest validation loss."""
    train_recs, val_recs = data.subset("train"), data.subset("val")
    if not train_recs or not val_recs:
        raise ValueError("dataset needs nonempty train and val splits")
    norm = norm or compute_norm_stats(train_recs)
    X, Tf, y = batch_arrays(train_recs, norm)
    Xv, Tfv, yv = batch_arrays(val_recs, norm)

    params = copy_params(params)
    opt = Optimizer(cfg)
    best = (math.inf, 0, copy_params(params))
    history = []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(y))
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, probs = _step(params, opt, X[idx], Tf[idx], y[idx], model_cfg, cfg, f"epoch {epoch} batch {b}")
            loss_sum += loss * len(idx)
            correct += int(np.sum((probs[:, 1] >= 0.5) == (y[idx] == 1)))
        val_loss, val_acc = dataset_loss_acc(params, Xv, Tfv, yv, model_cfg)
        if not math.isfinite(val_loss):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss")
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(y),
            "val_loss": val_loss,
            "train_acc": correct / len(y),
            "val_acc": val_acc,
        }
        history.append(row)
        log.info("epoch %d train_loss %.4f val_loss %.4f train_acc %.3f val_acc %.3f", *row.values())
        if on_epoch:
            on_epoch(row)
        if val_loss < best[0]:
            best = (val_loss, epoch, copy_params(params))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    return FitResult(params=best[2], history=history, best_epoch=best[1], best_val_loss=best[0], norm=norm)
