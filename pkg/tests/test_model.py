import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvguard import tensor as tn
from pvguard.domain import Season, TempStats
from pvguard.model import (
    INPUT_ROWS,
    ModelConfig,
    NormStats,
    assemble_input,
    bind,
    compute_norm_stats,
    denormalize_input,
    embed_temperature,
    expected_shape_chain,
    forward,
    forward_nodes,
    init_params,
    param_shapes,
    params_equal,
    predict_proba,
    temp_features,
)
from pvguard.tensor import NumericError, Tape
from pvguard.verify import CASES, STEPS, THRESHOLDS

TEMP = TempStats(high=25.0, low=10.0, median=18.0, std_dev=4.0, season=Season.SUMMER)


def trace_shapes(params, cfg, X, Tf):
    tape = Tape()
    trace = []
    probs = forward_nodes(tape, bind(tape, params), X, Tf, cfg, trace=trace)
    return trace, probs


def test_shape_chain_default(default_params):
    rng = np.random.default_rng(0)
    trace, probs = trace_shapes(default_params, ModelConfig(), rng.normal(size=(1, 1, 4, 24)), rng.normal(size=(1, 5)))
    assert trace == expected_shape_chain(ModelConfig())
    got = dict(trace)
    assert got["conv_a"] == (8, 4, 21) and got["conv_b"] == (8, 3, 21)
    assert got["pool_a"] == (8, 4, 7) and got["pool_b"] == (8, 3, 7)
    assert got["cnn_features"] == (7, 56)
    assert got["lstm"] == (7, 64) and got["pooled"] == (64,)
    assert got["fused"] == (80,) and got["probs"] == (2,)


@pytest.mark.parametrize("cfg", [
    ModelConfig(conv_channels=4, lstm_hidden=16, tx_heads=2, tx_ffn=8, temp_embed_dim=8),
    ModelConfig(pool_window=2, pool_stride=2, tx_layers=2, lstm_hidden=32),
])
def test_shape_chain_other_configs(cfg):
    rng = np.random.default_rng(1)
    trace, _ = trace_shapes(init_params(cfg), cfg, rng.normal(size=(3, 1, 4, 24)), rng.normal(size=(3, 5)))
    assert trace == expected_shape_chain(cfg)


def test_invalid_model_config():
    with pytest.raises(ValueError):
        ModelConfig(lstm_hidden=30, tx_heads=4)


def test_probabilities_sum_to_one(small_dataset, small_norm, default_params):
    from pvguard.model import batch_arrays

    X, Tf, _ = batch_arrays(small_dataset.records[:50], small_norm)
    probs = predict_proba(default_params, X, Tf, ModelConfig())
    assert probs.shape == (50, 2)
    assert np.all(probs >= 0)
    assert np.max(np.abs(probs.sum(axis=1) - 1)) < 1e-12


def test_batched_forward_matches_single_forward(small_dataset, small_norm, default_params):
    from pvguard.model import batch_arrays

    recs = small_dataset.records[:5]
    X, Tf, _ = batch_arrays(recs, small_norm)
    batched = predict_proba(default_params, X, Tf, ModelConfig())
    for i, r in enumerate(recs):
        single = forward(default_params, assemble_input(r, small_norm), r.temp, small_norm, ModelConfig())
        assert np.allclose(single, batched[i], atol=1e-12)


def test_zero_series_identity_norm_gives_zero_matrix():
    z = np.zeros(24)
    r = SimpleNamespace(**{name: z for name in INPUT_ROWS})
    x = assemble_input(r, NormStats.identity())
    assert x.shape == (1, 4, 24) and np.all(x == 0)


def test_input_rows_in_fixed_order():
    r = SimpleNamespace(**{name: np.full(24, float(i)) for i, name in enumerate(INPUT_ROWS)})
    x = assemble_input(r, NormStats.identity())
    assert [x[0, i, 0] for i in range(4)] == [0.0, 1.0, 2.0, 3.0]
    assert INPUT_ROWS == ("load_pattern", "load", "reported_gen", "reported_gen_pattern")


def test_normalize_round_trip(small_dataset, small_norm):
    for r in small_dataset.records[:20]:
        raw = denormalize_input(assemble_input(r, small_norm), small_norm)
        expected = np.stack([getattr(r, n) for n in INPUT_ROWS])
        assert np.max(np.abs(raw - expected)) < 1e-9


def test_missing_series_is_rejected():
    r = SimpleNamespace(load=np.zeros(24))
    with pytest.raises(ValueError, match="load_pattern"):
        assemble_input(r, NormStats.identity())


def test_norm_stats_match_loop_oracle(small_dataset):
    recs = small_dataset.subset("train")
    stats = compute_norm_stats(recs)
    for i, name in enumerate(INPUT_ROWS):
        vals = [v for r in recs for v in getattr(r, name)]
        m = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
        assert math.isclose(stats.series_mean[i], m, rel_tol=1e-9, abs_tol=1e-12)
        assert math.isclose(stats.series_std[i], sd, rel_tol=1e-9)
    highs = [r.temp.high for r in recs]
    assert math.isclose(stats.temp_mean[0], sum(highs) / len(highs), rel_tol=1e-9)


def test_norm_stats_dict_round_trip(small_norm):
    assert NormStats.from_dict(small_norm.to_dict()) == small_norm


def test_temp_features_layout():
    f = temp_features(TEMP, NormStats.identity())
    assert f.tolist() == [25.0, 10.0, 18.0, 4.0, 1 / 3]


def test_zero_temperature_params_give_zero_embedding(default_params):
    params = {k: (np.zeros_like(v) if k.startswith("temp.") else v) for k, v in default_params.items()}
    emb = embed_temperature(TEMP, params, NormStats.identity())
    assert emb.shape == (16,) and np.all(emb == 0)


def test_embedding_depends_on_temperature(default_params):
    a = embed_temperature(TEMP, default_params, NormStats.identity())
    b = embed_temperature(replace(TEMP, high=30.0), default_params, NormStats.identity())
    assert np.max(np.abs(a - b)) > 1e-6


def test_init_deterministic_per_seed():
    assert params_equal(init_params(ModelConfig(seed=4)), init_params(ModelConfig(seed=4)))
    assert not params_equal(init_params(ModelConfig(seed=4)), init_params(ModelConfig(seed=5)))


def test_init_scale_and_special_entries(default_params):
    cfg = ModelConfig()
    for path, (shape, fan_in) in param_shapes(cfg).items():
        arr = default_params[path]
        assert arr.shape == shape
        if arr.size >= 1000:
            target = 1 / math.sqrt(3 * fan_in)
            assert abs(arr.std() - target) < 0.2 * target, path
    h = cfg.lstm_hidden
    assert np.all(default_params["lstm.b"][h:2 * h] == 1.0)
    assert np.all(default_params["encoder0.ln1_gamma"] == 1.0)
    assert np.all(default_params["encoder0.ln2_beta"] == 0.0)


@given(st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=12, deadline=None)
def test_swapping_input_rows_changes_output(i, j):
    if i == j:
        return
    params = init_params(ModelConfig())
    rng = np.random.default_rng([i, j])
    x = rng.normal(size=(1, 4, 24))
    swapped = x.copy()
    swapped[0, [i, j]] = x[0, [j, i]]
    a = forward(params, x, TEMP, NormStats.identity(), ModelConfig())
    b = forward(params, swapped, TEMP, NormStats.identity(), ModelConfig())
    assert np.max(np.abs(a - b)) > 1e-6


def test_forward_rejects_wrong_shape(default_params):
    with pytest.raises(ValueError, match=r"\(1, 4, 23\)"):
        forward(default_params, np.zeros((1, 4, 23)), TEMP, NormStats.identity(), ModelConfig())


def test_non_finite_input_names_stage(default_params):
    # finite input whose convolution overflows
    x = np.full((1, 1, 4, 24), 1e300)
    params = dict(default_params, **{"conv_a.kernels": np.full((8, 1, 1, 4), 1e300)})
    tape = Tape()
    with pytest.raises(NumericError, match="cnn"):
        forward_nodes(tape, bind(tape, params), x, np.zeros((1, 5)), ModelConfig())


def test_end_to_end_gradient():
    rng = np.random.default_rng(2)
    f, inputs = CASES["detector_loss"](rng, True)
    err = tn.grad_check(f, inputs, step=STEPS["detector_loss"], n_coords=240, rng=rng)
    assert err < THRESHOLDS["detector_loss"]
