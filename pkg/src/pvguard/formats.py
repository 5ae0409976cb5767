"""On-disk formats: run config, dataset CSV + metadata sidecar, checkpoints, logs, reports, plot exports.

Floats are written with ``repr`` (shortest string that parses back to the same double),
so every format here round-trips bitwise.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import (
    SERIES_FIELDS,
    AttackKind,
    Dataset,
    DayRecord,
    Season,
    TempStats,
    as_series,
    hour_columns,
)
from .evaluation import Metrics
from .model import ModelConfig, NormStats, Params, param_shapes
from .synth import GeneratorParams, SynthConfig
from .train import HISTORY_FIELDS, TrainConfig

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1

HEADER_FIELDS = ("prosumer_id", "day_index", "season", "label", "attack_kind",
                 "temp_high", "temp_low", "temp_median", "temp_std")
DETECT_SERIES = ("load", "reported_gen", "load_pattern", "reported_gen_pattern")


class DataError(ValueError):
    """Malformed or missing data file content."""


class ConfigError(ValueError):
    """Invalid run configuration."""


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f(x: float) -> str:
    return repr(float(x))


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# run config

@dataclass
class Paths:
    dataset: str = "dataset.csv"
    checkpoint: str = "checkpoint.json"
    history: str = "history.csv"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "paths": {f.name: getattr(self.paths, f.name) for f in fields(Paths)},
        }


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = dict(raw)
    if cls is SynthConfig and "generator" in kwargs:
        kwargs["generator"] = _section(GeneratorParams, kwargs["generator"], "synth.generator")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"synth", "model", "train", "paths"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    return RunConfig(
        synth=_section(SynthConfig, raw.get("synth"), "synth"),
        model=_section(ModelConfig, raw.get("model"), "model"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        paths=_section(Paths, raw.get("paths"), "paths"),
    )


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_run_config(raw)


# dataset

def dataset_columns() -> list[str]:
    cols = list(HEADER_FIELDS)
    for name in SERIES_FIELDS:
        cols += hour_columns(name)
    return cols


def meta_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".meta.json")


def dataset_csv_text(ds: Dataset) -> str:
    rows = []
    for r in ds.records:
        row = [str(r.prosumer_id), str(r.day_index), r.season.label, str(r.label), r.attack_kind.value,
               _f(r.temp.high), _f(r.temp.low), _f(r.temp.median), _f(r.temp.std_dev)]
        for name in SERIES_FIELDS:
            row += [_f(v) for v in getattr(r, name)]
        rows.append(row)
    return _csv_text(dataset_columns(), rows)


def dataset_meta(ds: Dataset) -> dict:
    meta = dict(ds.meta)
    meta.update({
        "format_version": DATASET_VERSION,
        "seed": ds.seed,
        "epsilon": ds.epsilon,
        "n_records": len(ds.records),
        "split": {k: list(v) for k, v in ds.split.items()},
    })
    return meta


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    write_atomic(path, dataset_csv_text(ds))
    write_atomic(meta_path(path), json.dumps(dataset_meta(ds), indent=1, sort_keys=True) + "\n")


def _num(row: dict, col: str, kind=float, where: str = ""):
    if col not in row or row[col] is None or row[col] == "":
        raise DataError(f"{where}missing column {col!r}")
    try:
        return kind(row[col])
    except ValueError:
        raise DataError(f"{where}column {col!r} has malformed value {row[col]!r}") from None


def _series(row: dict, name: str, where: str) -> np.ndarray:
    vals = [_num(row, c, float, where) for c in hour_columns(name)]
    arr = as_series(vals)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{where}series {name!r} has non-finite values")
    return arr


def _temp(row: dict, where: str) -> TempStats:
    try:
        season = Season.parse(_num(row, "season", str, where))
    except ValueError as exc:
        raise DataError(f"{where}column 'season': {exc}") from None
    return TempStats(
        high=_num(row, "temp_high", float, where),
        low=_num(row, "temp_low", float, where),
        median=_num(row, "temp_median", float, where),
        std_dev=_num(row, "temp_std", float, where),
        season=season,
    )


def _read_rows(path: str | os.PathLike) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def read_dataset(path: str | os.PathLike) -> Dataset:
    rows = _read_rows(path)
    records = []
    for i, row in enumerate(rows):
        where = f"{path} row {i + 1}: "
        try:
            kind = AttackKind.parse(_num(row, "attack_kind", str, where))
        except ValueError as exc:
            raise DataError(f"{where}column 'attack_kind': {exc}") from None
        records.append(DayRecord(
            prosumer_id=_num(row, "prosumer_id", int, where),
            day_index=_num(row, "day_index", int, where),
            temp=_temp(row, where),
            label=_num(row, "label", int, where),
            attack_kind=kind,
            **{name: _series(row, name, where) for name in SERIES_FIELDS},
        ))
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text(encoding="utf-8"))
        split = {k: [int(i) for i in v] for k, v in meta["split"].items()}
        seed, epsilon = int(meta["seed"]), float(meta["epsilon"])
        meta = {k: v for k, v in meta.items() if k not in ("split", "format_version", "n_records")}
    else:
        # external data without a sidecar: everything is test data
        split = {"train": [], "val": [], "test": list(range(len(records)))}
        seed, epsilon, meta = 0, 1.05, {}
    ds = Dataset(records=records, split=split, seed=seed, epsilon=epsilon, meta=meta)
    problems = ds.split_violations()
    if problems:
        raise DataError(f"{path}: {'; '.join(problems)}")
    return ds


def read_detect_rows(path: str | os.PathLike) -> list[tuple[dict[str, np.ndarray], TempStats]]:
    """Series and temperatures of each row of a detection input file (dataset schema, label columns optional)."""
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: no data rows")
    out = []
    for i, row in enumerate(rows):
        where = f"{path} row {i + 1}: "
        series = {name: _series(row, name, where) for name in DETECT_SERIES}
        out.append((series, _temp(row, where)))
    return out


# checkpoint

def checkpoint_dict(params: Params, model_cfg: ModelConfig, norm: NormStats, extra: dict | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model_cfg.to_dict(),
        "norm_stats": norm.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]} for k, v in params.items()},
        **(extra or {}),
    }


def save_checkpoint(path, params: Params, model_cfg: ModelConfig, norm: NormStats, extra: dict | None = None) -> None:
    write_atomic(path, json.dumps(checkpoint_dict(params, model_cfg, norm, extra), indent=1) + "\n")


@dataclass
class Checkpoint:
    params: Params
    model_config: ModelConfig
    norm: NormStats
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if raw.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path} has unsupported format version {raw.get('format_version')!r}")
    cfg = ModelConfig(**raw["model_config"])
    expected = param_shapes(cfg)
    params = {}
    for k, entry in raw["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if k not in expected or arr.shape != expected[k][0]:
            raise DataError(f"checkpoint parameter {k!r} does not fit the stored model config")
        params[k] = arr
    missing = sorted(set(expected) - set(params))
    if missing:
        raise DataError(f"checkpoint lacks parameters: {', '.join(missing)}")
    extra = {k: v for k, v in raw.items() if k not in ("format_version", "model_config", "norm_stats", "params")}
    return Checkpoint(params, cfg, NormStats.from_dict(raw["norm_stats"]), extra)


# logs and reports

def history_csv_text(history: Sequence[dict]) -> str:
    return _csv_text(HISTORY_FIELDS, ([str(h["epoch"])] + [_f(h[k]) for k in HISTORY_FIELDS[1:]] for h in history))


def read_history(path) -> list[dict]:
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}} for r in _read_rows(path)]


def report_dict(metrics: Metrics, split: str, threshold: float) -> dict:
    return {"split": split, "n": metrics.total, "threshold": threshold, **metrics.to_dict()}


def scores_csv_text(records: Sequence[DayRecord], indices: Sequence[int], scores: Sequence[float]) -> str:
    rows = ([str(i), str(r.prosumer_id), str(r.day_index), str(r.label), r.attack_kind.value, _f(s)]
            for i, r, s in zip(indices, records, scores))
    return _csv_text(("record_index", "prosumer_id", "day_index", "label", "attack_kind", "score"), rows)


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    rows = _read_rows(path)
    return np.array([float(r["score"]) for r in rows]), np.array([int(r["label"]) for r in rows])


def confusion_csv_text(m: Metrics) -> str:
    return _csv_text(("actual", "predicted_benign", "predicted_theft"),
                     [("benign", m.tn, m.fp), ("theft", m.fn, m.tp)])


def seasonal_csv_text(means: dict[Season, np.ndarray]) -> str:
    return _csv_text(["season"] + hour_columns("gen"), ([s.label] + [_f(v) for v in means[s]] for s in Season))


def theft_example_csv_text(prosumer_id: int, day_index: int, season: Season,
                           rows: Sequence[tuple[str, float | None, np.ndarray]]) -> str:
    """One row per variant: kind, the inflation draw summary, and the 24 hourly values."""
    header = ["kind", "prosumer_id", "day_index", "season", "inflation"] + hour_columns("gen")
    body = ([kind, str(prosumer_id), str(day_index), season.label, "" if infl is None else infl] + [_f(v) for v in vals]
            for kind, infl, vals in rows)
    return _csv_text(header, body)

