import csv
import json

import numpy as np
import pytest

from pvguard.cli import main
from pvguard.evaluation import metrics_from_scores
from pvguard.formats import (
    ConfigError,
    load_checkpoint,
    parse_run_config,
    read_dataset,
    read_history,
    read_scores,
    save_checkpoint,
    write_dataset,
)
from pvguard.model import ModelConfig, init_params, params_equal
from pvguard.synth import SynthConfig, build_dataset

CONFIG = {
    "synth": {"n_prosumers": 10, "n_days": 40, "seed": 1},
    "model": {"lstm_hidden": 16, "tx_heads": 2, "tx_ffn": 16, "temp_hidden": 8, "temp_embed_dim": 8, "head_hidden": 8},
    "train": {"epochs": 2, "early_stop_patience": 2},
}


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "config.json").write_text(json.dumps(CONFIG))
    common = ["--config", str(d / "config.json"), "--out", str(d)]
    assert main(["synth", *common]) == 0
    assert main(["train", *common]) == 0
    return d, common


def test_dataset_round_trip_is_byte_identical(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path / "a.csv")
    back = read_dataset(tmp_path / "a.csv")
    assert back == small_dataset
    write_dataset(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_checkpoint_round_trip_is_bitwise(tmp_path, small_norm):
    cfg = ModelConfig(seed=9)
    params = init_params(cfg)
    save_checkpoint(tmp_path / "c.json", params, cfg, small_norm, {"best_epoch": 3})
    ck = load_checkpoint(tmp_path / "c.json")
    assert params_equal(ck.params, params)
    assert ck.model_config == cfg and ck.norm == small_norm and ck.extra["best_epoch"] == 3
    save_checkpoint(tmp_path / "d.json", ck.params, ck.model_config, ck.norm, {"best_epoch": 3})
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()


def test_synth_thousand_records(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"synth": {"n_prosumers": 20, "n_days": 50}}))
    assert main(["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "dataset.csv").read_text().splitlines()
    assert len(lines) == 1001
    kinds = [r["attack_kind"] for r in rows_of(tmp_path / "dataset.csv")]
    assert (kinds.count("none"), kinds.count("theft1"), kinds.count("theft2")) == (500, 250, 250)


def test_synth_seed_flag_changes_data(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"synth": {"n_prosumers": 4, "n_days": 8}}))
    base = ["synth", "--config", str(tmp_path / "cfg.json")]
    main([*base, "--out", str(tmp_path / "a"), "--seed", "5"])
    main([*base, "--out", str(tmp_path / "b"), "--seed", "5"])
    main([*base, "--out", str(tmp_path / "c"), "--seed", "6"])
    a, b, c = ((tmp_path / x / "dataset.csv").read_bytes() for x in "abc")
    assert a == b and a != c


def test_unknown_config_key_exits_1(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"train": {"epochz": 3}}))
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    assert "epochz" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        parse_run_config({"extra": {}})


def test_bad_usage_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--split", "holdout"])
    assert exc.value.code == 1


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "dataset.csv" in capsys.readouterr().err


def test_train_writes_history_and_checkpoint(run_dir):
    d, _ = run_dir
    hist = read_history(d / "history.csv")
    assert [h["epoch"] for h in hist] == [1, 2]
    ck = load_checkpoint(d / "checkpoint.json")
    assert ck.model_config.lstm_hidden == 16
    assert ck.extra["best_val_loss"] == min(h["val_loss"] for h in hist)


def test_eval_report_matches_printed_table(run_dir, capsys):
    d, common = run_dir
    capsys.readouterr()
    assert main(["eval", *common, "--split", "val"]) == 0
    out = capsys.readouterr().out
    report = json.loads((d / "reports" / "report_val.json").read_text())
    assert report["split"] == "val" and report["n"] == 60
    for name in ("accuracy", "f1", "auc"):
        assert f"{name:<10}{report[name]:>10.4f}" in out
    conf = rows_of(d / "reports" / "confusion_val.csv")
    assert int(conf[1]["predicted_theft"]) == report["tp"]
    scores = rows_of(d / "reports" / "scores_val.csv")
    assert len(scores) == 60


def test_metrics_recomputed_from_score_file(run_dir):
    d, common = run_dir
    assert main(["eval", *common, "--split", "test"]) == 0
    report = json.loads((d / "reports" / "report_test.json").read_text())
    s, y = read_scores(d / "reports" / "scores_test.csv")
    again = metrics_from_scores(s, y).to_dict()
    assert {k: report[k] for k in again} == again


def test_eval_single_class_split_exits_2(run_dir, tmp_path, capsys):
    d, common = run_dir
    src = (d / "dataset.csv").read_text().splitlines()
    benign = [src[0]] + [line for line in src[1:] if ",none," in line]
    (tmp_path / "benign.csv").write_text("\n".join(benign) + "\n")
    code = main(["eval", *common, "--dataset", str(tmp_path / "benign.csv")])
    assert code == 2
    assert "AUC undefined" in capsys.readouterr().err


def test_detect_is_deterministic(run_dir, capsys):
    d, common = run_dir
    capsys.readouterr()
    main(["detect", *common, "--input", str(d / "dataset.csv")])
    first = capsys.readouterr().out
    main(["detect", *common, "--input", str(d / "dataset.csv")])
    assert capsys.readouterr().out == first
    lines = first.splitlines()
    assert len(lines) == 400 and lines[0].startswith("row 1: p_theft=")


def test_detect_names_missing_hour_column(run_dir, tmp_path, capsys):
    d, common = run_dir
    rows = rows_of(d / "dataset.csv")[:3]
    cols = [c for c in rows[0] if c != "load_h24"]
    with open(tmp_path / "short.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    assert main(["detect", *common, "--input", str(tmp_path / "short.csv")]) == 2
    assert "load_h24" in capsys.readouterr().err


def test_export_patterns(run_dir):
    d, common = run_dir
    assert main(["export-patterns", *common]) == 0
    seasonal = rows_of(d / "reports" / "seasonal_patterns.csv")
    cells = [float(v) for r in seasonal for k, v in r.items() if k != "season"]
    assert len(cells) == 96
    by = {r["season"]: r for r in seasonal}
    assert float(by["Summer"]["gen_h13"]) > float(by["Winter"]["gen_h13"])
    example = rows_of(d / "reports" / "theft_example.csv")
    assert [r["kind"] for r in example] == ["none", "theft1", "theft2"]
    hours = [k for k in example[0] if k.startswith("gen_h")]
    benign = np.array([float(example[0][h]) for h in hours])
    for r in example[1:]:
        assert np.all(np.array([float(r[h]) for h in hours]) >= benign)


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "detector_loss" in out and "FAIL" not in out
