"""Accuracy, F1, AUC, confusion counts, and the repeated-seed protocol."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .domain import Dataset, DayRecord
from .model import ModelConfig, NormStats, Params, batch_arrays, init_params, predict_proba
from .train import TrainConfig, fit

THRESHOLD = 0.5
METRIC_NAMES = ("accuracy", "f1", "auc")


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    f1: float
    auc: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [
            f"{'samples':<10}{self.total:>10d}",
            f"{'accuracy':<10}{self.accuracy:>10.4f}",
            f"{'f1':<10}{self.f1:>10.4f}",
            f"{'auc':<10}{self.auc:>10.4f}",
            "",
            f"{'':<14}{'pred benign':>12}{'pred theft':>12}",
            f"{'true benign':<14}{self.tn:>12d}{self.fp:>12d}",
            f"{'true theft':<14}{self.fn:>12d}{self.tp:>12d}",
        ]
        return "\n".join(lines)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = THRESHOLD) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with a positive prediction wherever score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size < 1 or s.shape != y.shape:
        raise ValueError("need at least one score and one label per score")
    pred = s >= threshold
    pos = y == 1
    return (int(np.sum(pred & pos)), int(np.sum(pred & ~pos)), int(np.sum(~pred & ~pos)), int(np.sum(~pred & pos)))


def f1_score(tp: int, fp: int, fn: int) -> float:
    """F1 of the theft class; any zero denominator yields 0."""
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class UndefinedAUC(ValueError):
    pass


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties counting one half.

    Computed from average ranks (Mann-Whitney U), O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == 1
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # average 1-based rank within each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metrics_from_scores(scores: Sequence[float], labels: Sequence[int], threshold: float = THRESHOLD) -> Metrics:
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    return Metrics(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / (tp + fp + tn + fn),
        f1=f1_score(tp, fp, fn),
        auc=auc(scores, labels),
    )


def score_records(params: Params, records: Sequence[DayRecord], norm: NormStats, cfg: ModelConfig) -> np.ndarray:
    """Theft probability for each record."""
    X, Tf, _ = batch_arrays(records, norm)
    return predict_proba(params, X, Tf, cfg)[:, 1]


def evaluate(params: Params, records: Sequence[DayRecord], norm: NormStats, cfg: ModelConfig,
             threshold: float = THRESHOLD) -> tuple[Metrics, np.ndarray]:
    if not records:
        raise ValueError("cannot evaluate an empty split")
    scores = score_records(params, records, norm, cfg)
    labels = np.array([r.label for r in records])
    return metrics_from_scores(scores, labels, threshold), scores


@dataclass
class SeedReport:
    seeds: list[int]
    runs: list[Metrics]
    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "runs": [m.to_dict() for m in self.runs], "mean": self.mean, "std": self.std}


def summarize(runs: Sequence[Metrics], seeds: Sequence[int]) -> SeedReport:
    """Mean and population standard deviation of each metric over the runs."""
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(m, name) for m in runs], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())
    return SeedReport(seeds=list(seeds), runs=list(runs), mean=mean, std=std)


def multi_seed_report(data: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 5,
                      split: str = "test", seeds: Sequence[int] | None = None, on_run=None) -> SeedReport:
    """Train and evaluate ``k`` times on one dataset, seeding init and shuffling with ``seed + j``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if seeds is None:
        seeds = [train_cfg.seed + j for j in range(k)]
    runs = []
    for s in seeds:
        mc = replace(model_cfg, seed=s)
        tc = replace(train_cfg, seed=s)
        result = fit(init_params(mc), data, tc, mc)
        metrics, _ = evaluate(result.params, data.subset(split), result.norm, mc)
        runs.append(metrics)
        if on_run:
            on_run(s, metrics, result)
    return summarize(runs, seeds)
