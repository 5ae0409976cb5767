"""Core value types shared by the synthesizer, model and CLI.

Hours are 1..24 in file formats and user-facing text, 0..23 in arrays.
Use :func:`hour_index` / :func:`hour_label` rather than doing the shift inline.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HOURS = 24


def hour_index(t: int) -> int:
    """Storage index of the 1-based hour ``t``."""
    if not 1 <= t <= HOURS:
        raise ValueError(f"hour {t} outside 1..{HOURS}")
    return t - 1


def hour_label(i: int) -> int:
    """1-based hour of storage index ``i``."""
    if not 0 <= i < HOURS:
        raise ValueError(f"index {i} outside 0..{HOURS - 1}")
    return i + 1


def hour_columns(prefix: str) -> list[str]:
    return [f"{prefix}_h{hour_label(i):02d}" for i in range(HOURS)]


class Season(enum.IntEnum):
    SPRING = 0
    SUMMER = 1
    AUTUMN = 2
    WINTER = 3

    @classmethod
    def parse(cls, name: str) -> "Season":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown season {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.capitalize()


class AttackKind(enum.Enum):
    NONE = "none"
    THEFT1 = "theft1"
    THEFT2 = "theft2"

    @classmethod
    def parse(cls, name: str) -> "AttackKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown attack kind {name!r}") from None


def as_series(values: Sequence[float]) -> np.ndarray:
    """Freeze ``values`` into a read-only float64 array (length is not checked here)."""
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TempStats:
    high: float
    low: float
    median: float
    std_dev: float
    season: Season

    def violations(self) -> list[str]:
        out = []
        vals = (self.high, self.low, self.median, self.std_dev)
        if not all(np.isfinite(v) for v in vals):
            out.append("non-finite temperature statistic")
        elif not self.low <= self.median <= self.high:
            out.append(f"temperature order violated: low={self.low} median={self.median} high={self.high}")
        if self.std_dev < 0:
            out.append(f"negative temperature std {self.std_dev}")
        return out

    def as_vector(self) -> np.ndarray:
        return np.array([self.high, self.low, self.median, self.std_dev], dtype=np.float64)


SERIES_FIELDS = (
    "load",
    "actual_gen",
    "reported_gen",
    "load_pattern",
    "reported_gen_pattern",
    "actual_gen_pattern",
)
GENERATION_FIELDS = frozenset({"actual_gen", "reported_gen", "reported_gen_pattern", "actual_gen_pattern"})


@dataclass(frozen=True, eq=False)
class DayRecord:
    """One prosumer-day.

    ``actual_gen_pattern`` is the fleet mean of true generation. It is kept for
    completeness and for the synthesizer's own checks; the detector never reads it.
    """

    prosumer_id: int
    day_index: int
    load: np.ndarray
    actual_gen: np.ndarray
    reported_gen: np.ndarray
    load_pattern: np.ndarray
    reported_gen_pattern: np.ndarray
    actual_gen_pattern: np.ndarray
    temp: TempStats
    label: int
    attack_kind: AttackKind

    @property
    def season(self) -> Season:
        return self.temp.season

    @property
    def inflation(self) -> np.ndarray:
        """Per-hour inflated amount reported on top of the true generation."""
        return self.reported_gen - self.actual_gen

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DayRecord):
            return NotImplemented
        if (self.prosumer_id, self.day_index, self.temp, self.label, self.attack_kind) != (
            other.prosumer_id, other.day_index, other.temp, other.label, other.attack_kind
        ):
            return False
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in SERIES_FIELDS)

    __hash__ = None  # type: ignore[assignment]


def validate_record(r: DayRecord) -> list[str]:
    """Return a description of every invariant ``r`` breaks; empty when valid."""
    problems: list[str] = []
    for name in SERIES_FIELDS:
        s = np.asarray(getattr(r, name))
        if s.ndim != 1 or s.shape[0] != HOURS:
            problems.append(f"{name}: series length {s.size} ≠ {HOURS}")
            continue
        if not np.all(np.isfinite(s)):
            problems.append(f"{name}: non-finite value")
        elif name in GENERATION_FIELDS and np.any(s < 0):
            problems.append(f"{name}: negative generation")
    problems.extend(r.temp.violations())
    if r.label not in (0, 1):
        problems.append(f"label {r.label!r} not in {{0, 1}}")
    elif (r.label == 1) != (r.attack_kind is not AttackKind.NONE):
        problems.append("label/attack mismatch")
    if not problems and r.attack_kind is not AttackKind.NONE:
        if np.any(r.reported_gen < r.actual_gen):
            problems.append("attacked record reports less than actual generation")
    if not problems and r.attack_kind is AttackKind.NONE:
        if not np.array_equal(r.reported_gen, r.actual_gen):
            problems.append("benign record reports differ from actual generation")
    return problems


SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class Dataset:
    records: list[DayRecord]
    split: dict[str, list[int]]
    seed: int
    epsilon: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, name: str) -> list[DayRecord]:
        if name not in self.split:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [self.records[i] for i in self.split[name]]

    def labels(self, name: str | None = None) -> np.ndarray:
        recs = self.records if name is None else self.subset(name)
        return np.array([r.label for r in recs], dtype=np.int64)

    def split_violations(self) -> list[str]:
        seen: list[int] = []
        for name in SPLITS:
            seen.extend(self.split.get(name, []))
        problems = []
        if len(seen) != len(set(seen)):
            problems.append("split lists overlap")
        if sorted(set(seen)) != list(range(len(self.records))):
            problems.append("split lists do not cover all records")
        return problems

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.epsilon == other.epsilon
            and {k: list(v) for k, v in self.split.items()} == {k: list(v) for k, v in other.split.items()}
            and len(self.records) == len(other.records)
            and all(a == b for a, b in zip(self.records, other.records))
        )

    __hash__ = None  # type: ignore[assignment]
