import numpy as np
import pytest

from pvguard.domain import AttackKind, DayRecord, Season, TempStats, as_series
from pvguard.model import ModelConfig, compute_norm_stats, init_params
from pvguard.synth import SynthConfig, build_dataset


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(SynthConfig(n_prosumers=10, n_days=40, seed=3))


@pytest.fixture(scope="session")
def small_norm(small_dataset):
    return compute_norm_stats(small_dataset.subset("train"))


@pytest.fixture(scope="session")
def default_params():
    return init_params(ModelConfig())


def make_record(label=0, kind=AttackKind.NONE, length=24, **overrides):
    gen = np.zeros(length)
    gen[8:16] = np.linspace(0.5, 1.5, 8)
    fields = dict(
        prosumer_id=0,
        day_index=0,
        load=as_series(np.full(length, 0.4)),
        actual_gen=as_series(gen),
        reported_gen=as_series(gen),
        load_pattern=as_series(np.full(length, 0.5)),
        reported_gen_pattern=as_series(gen),
        actual_gen_pattern=as_series(gen),
        temp=TempStats(high=12.0, low=3.0, median=7.0, std_dev=2.5, season=Season.SPRING),
        label=label,
        attack_kind=kind,
    )
    fields.update(overrides)
    return DayRecord(**fields)


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
