"""Synthetic prosumer fleet: honest PV/load days, the two inflation attacks, fleet patterns.

Randomness is split into independent streams keyed by ``(seed, purpose, ...)`` so a day's
records depend only on the seed and the day index, never on generation order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .domain import (
    HOURS,
    AttackKind,
    Dataset,
    DayRecord,
    Season,
    TempStats,
    as_series,
    hour_index,
    validate_record,
)

GENERATOR_VERSION = "pvguard-synth/1"

# stream tags for np.random.default_rng([seed, tag, ...])
_ASSIGN, _PROSUMER, _WEATHER, _RECORD, _SPLIT = range(5)

ABSOLUTE_FLOOR = 0.01  # kWh; night-hour reports at or below this are treated as meter noise


@dataclass(frozen=True)
class GeneratorParams:
    """Shape parameters of the honest-day generator.

    ``daylight`` holds the first and last 1-based hour with nonzero generation per season.
    ``peak_kwh`` is the clear-sky midday output of a nominal system. ``clearness`` holds
    Beta(a, b) parameters for the day's fleet-wide clear-sky index.
    """

    daylight: dict = field(default_factory=lambda: {
        Season.SPRING: (6, 19), Season.SUMMER: (5, 20), Season.AUTUMN: (7, 18), Season.WINTER: (8, 17),
    })
    peak_kwh: dict = field(default_factory=lambda: {
        Season.SPRING: 2.4, Season.SUMMER: 3.0, Season.AUTUMN: 1.6, Season.WINTER: 0.9,
    })
    clearness: dict = field(default_factory=lambda: {
        Season.SPRING: (5.0, 2.5), Season.SUMMER: (6.0, 2.0), Season.AUTUMN: (3.0, 3.0), Season.WINTER: (2.5, 3.5),
    })
    # daily mean temperature and diurnal half-range, degC
    temperature: dict = field(default_factory=lambda: {
        Season.SPRING: (11.0, 5.0), Season.SUMMER: (19.0, 6.0), Season.AUTUMN: (10.0, 4.0), Season.WINTER: (1.5, 3.0),
    })
    temp_day_sd: float = 3.0
    capacity_sigma: float = 0.1
    household_sigma: float = 0.25
    cloud_sigma: float = 0.08
    hour_noise: float = 0.03
    base_load_kwh: float = 0.35
    morning_peak_kwh: float = 0.6
    evening_peak_kwh: float = 1.0
    load_noise: float = 0.15

    def __post_init__(self):
        for name in ("daylight", "peak_kwh", "clearness", "temperature"):
            raw = getattr(self, name)
            fixed = {}
            for k, v in raw.items():
                key = Season.parse(k) if isinstance(k, str) else Season(k)
                fixed[key] = tuple(v) if isinstance(v, (list, tuple)) else float(v)
            if set(fixed) != set(Season):
                raise ValueError(f"generator.{name} needs an entry for every season")
            object.__setattr__(self, name, fixed)
        for s, (first, last) in self.daylight.items():
            hour_index(first), hour_index(last)
            if first > last:
                raise ValueError(f"daylight window for {s.label} is empty")

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("daylight", "peak_kwh", "clearness", "temperature"):
            out[name] = {s.label: (list(v) if isinstance(v, tuple) else v) for s, v in getattr(self, name).items()}
        return out

    def daylight_mask(self, season: Season) -> np.ndarray:
        first, last = self.daylight[season]
        mask = np.zeros(HOURS, dtype=bool)
        mask[hour_index(first): hour_index(last) + 1] = True
        return mask


@dataclass(frozen=True)
class SynthConfig:
    n_prosumers: int = 20
    n_days: int = 100
    mix: tuple = (0.50, 0.25, 0.25)
    alpha_range: tuple = (0.1, 0.8)
    beta_range: tuple = (0.1, 0.8)
    epsilon: float = 1.05
    seed: int = 0
    # one season name per day index; None spreads the days evenly over the four seasons
    season_calendar: tuple | None = None
    split: tuple = (0.70, 0.15, 0.15)
    generator: GeneratorParams = field(default_factory=GeneratorParams)

    def __post_init__(self):
        object.__setattr__(self, "mix", tuple(float(m) for m in self.mix))
        object.__setattr__(self, "alpha_range", tuple(float(a) for a in self.alpha_range))
        object.__setattr__(self, "beta_range", tuple(float(b) for b in self.beta_range))
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if isinstance(self.generator, dict):
            object.__setattr__(self, "generator", GeneratorParams(**self.generator))
        if self.season_calendar is not None:
            cal = tuple(Season.parse(s) if isinstance(s, str) else Season(s) for s in self.season_calendar)
            object.__setattr__(self, "season_calendar", cal)
        problems = self.violations()
        if problems:
            raise ValueError("invalid SynthConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.n_prosumers < 1 or self.n_days < 1:
            out.append("n_prosumers and n_days must be >= 1")
        if len(self.mix) != 3 or any(m < 0 for m in self.mix) or not math.isclose(sum(self.mix), 1.0, abs_tol=1e-9):
            out.append(f"mix {self.mix} must be three non-negative proportions summing to 1")
        for name in ("alpha_range", "beta_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                out.append(f"{name} {(lo, hi)} must satisfy 0 < lower < upper")
        if self.epsilon < 1:
            out.append(f"epsilon {self.epsilon} must be >= 1")
        if self.seed < 0:
            out.append("seed must be non-negative")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            out.append(f"split {self.split} must be three non-negative fractions summing to 1")
        if self.season_calendar is not None and len(self.season_calendar) != self.n_days:
            out.append(f"season_calendar has {len(self.season_calendar)} entries for {self.n_days} days")
        return out

    @property
    def n_records(self) -> int:
        return self.n_prosumers * self.n_days

    def season_of(self, day_index: int) -> Season:
        if self.season_calendar is not None:
            return self.season_calendar[day_index]
        return Season(min(3, 4 * day_index // self.n_days))

    def to_dict(self) -> dict:
        return {
            "n_prosumers": self.n_prosumers,
            "n_days": self.n_days,
            "mix": list(self.mix),
            "alpha_range": list(self.alpha_range),
            "beta_range": list(self.beta_range),
            "epsilon": self.epsilon,
            "seed": self.seed,
            "season_calendar": None if self.season_calendar is None else [s.label for s in self.season_calendar],
            "split": list(self.split),
            "generator": self.generator.to_dict(),
        }


@dataclass(frozen=True)
class DayWeather:
    """Fleet-wide conditions for one day (every prosumer sits under the same sky)."""

    clearness: float
    cloud: np.ndarray  # per-hour multiplicative cloud factor
    temp_mean: float


def draw_weather(season: Season, rng: np.random.Generator, params: GeneratorParams) -> DayWeather:
    a, b = params.clearness[season]
    clearness = float(rng.beta(a, b))
    cloud = np.exp(rng.normal(0.0, params.cloud_sigma * (1.5 - clearness), HOURS))
    mean, _ = params.temperature[season]
    # clear days run warm in summer and cold in winter
    shift = (clearness - 0.5) * (4.0 if season in (Season.SUMMER, Season.SPRING) else -3.0)
    temp_mean = mean + shift + float(rng.normal(0.0, params.temp_day_sd))
    return DayWeather(clearness, cloud, temp_mean)


def _bell(season: Season, params: GeneratorParams) -> np.ndarray:
    first, last = params.daylight[season]
    t = np.arange(1, HOURS + 1, dtype=np.float64)
    width = last - first + 2
    shape = np.sin(np.pi * (t - first + 1) / width)
    return np.where(params.daylight_mask(season), shape, 0.0)


def _load_curve(rng: np.random.Generator, params: GeneratorParams, household: float) -> np.ndarray:
    t = np.arange(1, HOURS + 1, dtype=np.float64)
    morning = params.morning_peak_kwh * np.exp(-0.5 * ((t - rng.normal(7.5, 0.7)) / 1.2) ** 2)
    evening = params.evening_peak_kwh * np.exp(-0.5 * ((t - rng.normal(19.0, 0.8)) / 1.8) ** 2)
    curve = params.base_load_kwh + morning + evening
    return household * curve * np.exp(rng.normal(0.0, params.load_noise, HOURS))


def _temp_stats(season: Season, weather: DayWeather, rng: np.random.Generator, params: GeneratorParams) -> TempStats:
    _, half_range = params.temperature[season]
    amp = half_range * (0.5 + weather.clearness)
    t = np.arange(1, HOURS + 1, dtype=np.float64)
    hourly = weather.temp_mean + rng.normal(0.0, 0.4) + amp * np.cos(2 * np.pi * (t - 15.0) / HOURS)
    hourly = hourly + rng.normal(0.0, 0.3, HOURS)
    return TempStats(
        high=float(hourly.max()),
        low=float(hourly.min()),
        median=float(np.median(hourly)),
        std_dev=float(hourly.std()),
        season=season,
    )


def gen_benign_day(
    season: Season,
    rng: np.random.Generator,
    *,
    params: GeneratorParams | None = None,
    capacity: float = 1.0,
    household: float = 1.0,
    weather: DayWeather | None = None,
) -> tuple[np.ndarray, np.ndarray, TempStats]:
    """Draw one honest day: ``(actual_gen, load, temp)``.

    Generation is a daylight bell scaled by system ``capacity`` and the day's clearness,
    with shared cloud dips and small per-meter noise; it is exactly zero outside the
    season's daylight window. Without ``weather`` a private sky is drawn from ``rng``.
    """
    params = params or GeneratorParams()
    season = Season(season)
    if weather is None:
        weather = draw_weather(season, rng, params)
    noise = np.exp(rng.normal(0.0, params.hour_noise, HOURS))
    gen = params.peak_kwh[season] * capacity * (0.25 + 0.75 * weather.clearness) * _bell(season, params)
    gen = gen * weather.cloud * noise
    load = _load_curve(rng, params, household)
    temp = _temp_stats(season, weather, rng, params)
    return as_series(gen), as_series(load), temp


def _check_range(name: str, values: np.ndarray, bounds: Sequence[float]) -> None:
    lo, hi = bounds
    if np.any(values < lo) or np.any(values > hi) or not np.all(np.isfinite(values)):
        raise ValueError(f"{name} outside [{lo}, {hi}]: {values}")


def theft1(gen: Sequence[float], alpha: float, alpha_range: Sequence[float] = (0.1, 0.8)) -> np.ndarray:
    """Inflate every hour by the same fraction ``alpha``."""
    _check_range("alpha", np.asarray([alpha], dtype=np.float64), alpha_range)
    return as_series((1.0 + alpha) * np.asarray(gen, dtype=np.float64))


def theft2(gen: Sequence[float], betas: Sequence[float], beta_range: Sequence[float] = (0.1, 0.8)) -> np.ndarray:
    """Inflate hour ``t`` by its own fraction ``betas[t]``."""
    betas = np.asarray(betas, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if betas.shape != gen.shape:
        raise ValueError(f"betas shape {betas.shape} does not match series shape {gen.shape}")
    _check_range("beta", betas, beta_range)
    return as_series((1.0 + betas) * gen)


def aggregate_pattern(series_per_prosumer: Sequence[Sequence[float]]) -> np.ndarray:
    """Per-hour fleet mean of one series type."""
    stack = np.asarray(series_per_prosumer, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ValueError("empty fleet")
    if stack.shape[1] != HOURS:
        raise ValueError(f"fleet series have length {stack.shape[1]}, expected {HOURS}")
    return as_series(stack.sum(axis=0) / stack.shape[0])


def label_oracle(reported: Sequence[float], actual: Sequence[float], epsilon: float,
                 absolute_floor: float = ABSOLUTE_FLOOR) -> int:
    """Ground-truth theft flag for a day: 1 if any hour's reported/actual ratio exceeds ``epsilon``.

    Hours with no true generation are skipped unless the report there exceeds
    ``absolute_floor``, in which case the day is flagged outright.
    """
    if epsilon < 1:
        raise ValueError(f"epsilon {epsilon} must be >= 1")
    reported = np.asarray(reported, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    dark = actual <= 0
    if np.any(reported[dark] > absolute_floor):
        return 1
    lit = ~dark
    if not np.any(lit):
        return 0
    return int(np.max(reported[lit] / actual[lit]) > epsilon)


def class_counts(mix: Sequence[float], total: int) -> tuple[int, int, int]:
    """(benign, theft1, theft2) counts; attack classes round half up, benign takes the remainder."""
    t1 = int(math.floor(mix[1] * total + 0.5))
    t2 = int(math.floor(mix[2] * total + 0.5))
    benign = total - t1 - t2
    counts = (benign, t1, t2)
    for share, n, kind in zip(mix, counts, AttackKind):
        if share > 0 and n <= 0:
            raise ValueError(f"mix {tuple(mix)} yields no {kind.value} records out of {total}")
    return counts


def _stratified_split(kinds: list[AttackKind], fractions: Sequence[float], rng: np.random.Generator) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for kind in AttackKind:
        idx = np.array([i for i, k in enumerate(kinds) if k is kind], dtype=np.int64)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(math.floor(fractions[0] * idx.size + 0.5))
        n_val = min(idx.size - n_train, int(math.floor(fractions[1] * idx.size + 0.5)))
        out["train"].extend(idx[:n_train].tolist())
        out["val"].extend(idx[n_train:n_train + n_val].tolist())
        out["test"].extend(idx[n_train + n_val:].tolist())
    return {k: sorted(v) for k, v in out.items()}


def build_dataset(cfg: SynthConfig) -> Dataset:
    """Synthesize a labelled fleet dataset, ordered day-major then prosumer."""
    params = cfg.generator
    total = cfg.n_records
    counts = class_counts(cfg.mix, total)

    order = np.random.default_rng([cfg.seed, _ASSIGN]).permutation(total)
    kinds = [AttackKind.NONE] * total
    for i in order[counts[0]:counts[0] + counts[1]]:
        kinds[i] = AttackKind.THEFT1
    for i in order[counts[0] + counts[1]:]:
        kinds[i] = AttackKind.THEFT2

    traits = []
    for p in range(cfg.n_prosumers):
        rng = np.random.default_rng([cfg.seed, _PROSUMER, p])
        capacity = float(np.exp(rng.normal(0.0, params.capacity_sigma)))
        household = float(np.exp(rng.normal(0.0, params.household_sigma)))
        traits.append((capacity, household))

    records: list[DayRecord] = []
    for d in range(cfg.n_days):
        records.extend(_build_day(cfg, d, traits, kinds[d * cfg.n_prosumers:(d + 1) * cfg.n_prosumers]))

    for r in records:
        problems = validate_record(r)
        if problems:
            raise RuntimeError(f"synthesized record {r.prosumer_id}/{r.day_index} invalid: {problems}")
        if label_oracle(r.reported_gen, r.actual_gen, cfg.epsilon) != r.label:
            raise RuntimeError(
                f"record {r.prosumer_id}/{r.day_index} label {r.label} disagrees with the ratio oracle "
                f"at epsilon={cfg.epsilon}"
            )

    split = _stratified_split(kinds, cfg.split, np.random.default_rng([cfg.seed, _SPLIT]))
    meta = {
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "mix": list(cfg.mix),
        "epsilon": cfg.epsilon,
        "class_counts": dict(zip((k.value for k in AttackKind), counts)),
        "synth_config": cfg.to_dict(),
    }
    return Dataset(records=records, split=split, seed=cfg.seed, epsilon=cfg.epsilon, meta=meta)


def _build_day(cfg: SynthConfig, d: int, traits, kinds: list[AttackKind]) -> list[DayRecord]:
    params = cfg.generator
    season = cfg.season_of(d)
    weather = draw_weather(season, np.random.default_rng([cfg.seed, _WEATHER, d]), params)

    rows = []
    for p, kind in enumerate(kinds):
        rng = np.random.default_rng([cfg.seed, _RECORD, d, p])
        capacity, household = traits[p]
        actual, load, temp = gen_benign_day(
            season, rng, params=params, capacity=capacity, household=household, weather=weather
        )
        # attack draws happen for every record so the stream layout is class-independent
        alpha = float(rng.uniform(*cfg.alpha_range))
        betas = rng.uniform(*cfg.beta_range, HOURS)
        if kind is AttackKind.THEFT1:
            reported = theft1(actual, alpha, cfg.alpha_range)
        elif kind is AttackKind.THEFT2:
            reported = theft2(actual, betas, cfg.beta_range)
        else:
            reported = actual
        rows.append((p, kind, actual, load, reported, temp))

    load_pattern = aggregate_pattern([r[3] for r in rows])
    actual_pattern = aggregate_pattern([r[2] for r in rows])
    reported_pattern = aggregate_pattern([r[4] for r in rows])
    return [
        DayRecord(
            prosumer_id=p,
            day_index=d,
            load=load,
            actual_gen=actual,
            reported_gen=reported,
            load_pattern=load_pattern,
            reported_gen_pattern=reported_pattern,
            actual_gen_pattern=actual_pattern,
            temp=temp,
            label=int(kind is not AttackKind.NONE),
            attack_kind=kind,
        )
        for p, kind, actual, load, reported, temp in rows
    ]


def seasonal_means(records: Sequence[DayRecord], field_name: str = "actual_gen") -> dict[Season, np.ndarray]:
    """Per-season hourly mean of one series over ``records``."""
    out = {}
    for s in Season:
        rows = [getattr(r, field_name) for r in records if r.season is s]
        out[s] = np.mean(rows, axis=0) if rows else np.full(HOURS, np.nan)
    return out
