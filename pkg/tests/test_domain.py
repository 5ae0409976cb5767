import numpy as np
import pytest

from pvguard.domain import AttackKind, Season, TempStats, as_series, hour_columns, hour_index, hour_label, validate_record

from .conftest import make_record


def test_well_formed_record_has_no_violations():
    assert validate_record(make_record()) == []


def test_label_attack_mismatch():
    assert validate_record(make_record(label=1, kind=AttackKind.NONE)) == ["label/attack mismatch"]


def test_short_series_reported():
    r = make_record(load=as_series(np.ones(23)))
    assert validate_record(r) == ["load: series length 23 ≠ 24"]


def test_negative_generation_and_nan():
    gen = np.ones(24)
    gen[3] = -0.1
    assert "actual_gen: negative generation" in validate_record(make_record(actual_gen=as_series(gen)))
    load = np.ones(24)
    load[0] = np.nan
    assert "load: non-finite value" in validate_record(make_record(load=as_series(load)))


def test_temperature_order_and_std():
    bad = TempStats(high=1.0, low=2.0, median=1.5, std_dev=-1.0, season=Season.WINTER)
    problems = validate_record(make_record(temp=bad))
    assert any("order" in p for p in problems)
    assert any("negative temperature std" in p for p in problems)


def test_attacked_record_may_not_underreport():
    r = make_record()
    lower = as_series(r.actual_gen * 0.9)
    assert validate_record(make_record(label=1, kind=AttackKind.THEFT1, reported_gen=lower))


def test_benign_record_must_report_truthfully():
    r = make_record()
    assert validate_record(make_record(reported_gen=as_series(r.actual_gen * 1.2)))


def test_hour_conversion_round_trip():
    assert [hour_label(hour_index(t)) for t in range(1, 25)] == list(range(1, 25))
    assert hour_columns("load")[0] == "load_h01" and hour_columns("load")[-1] == "load_h24"
    with pytest.raises(ValueError):
        hour_index(0)
    with pytest.raises(ValueError):
        hour_label(24)


def test_enum_parsing():
    assert Season.parse("summer") is Season.SUMMER
    assert AttackKind.parse("Theft2") is AttackKind.THEFT2
    with pytest.raises(ValueError):
        Season.parse("monsoon")


def test_records_are_immutable():
    r = make_record()
    with pytest.raises(ValueError):
        r.load[0] = 5.0
    with pytest.raises(AttributeError):
        r.label = 1
