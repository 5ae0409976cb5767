import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvguard import tensor as tn
from pvguard.tensor import NumericError, Tape, grad_check
from pvguard.verify import CASES, STEPS, SUBSAMPLE, THRESHOLDS, check_op

finite = st.floats(-20, 20, allow_nan=False)


def run(op, *arrays, **kw):
    tape = Tape()
    return op(*[tape.leaf(a) for a in arrays], **kw)


# linear

def test_linear_identity_and_hand_sum():
    out = run(tn.linear, [[1.0, 0.0]], np.eye(2), np.zeros(2))
    assert out.value.tolist() == [[1.0, 0.0]]
    out = run(tn.linear, [[1.0, 2.0]], [[1.0], [1.0]], [0.5])
    assert out.value.tolist() == [[3.5]]


def test_linear_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"x\(1, 3\).*W\(2, 2\)"):
        run(tn.linear, np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


def test_linear_gradient_fixed_shape():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2))
    f = lambda t, v: tn.sum_all(tn.mul(tn.linear(*v), t.leaf(w)))
    assert grad_check(f, [rng.normal(size=(3, 5)), rng.normal(size=(5, 2)), rng.normal(size=2)], step=1e-5) < 1e-6


# convolution

def test_conv_zero_input_gives_bias():
    bias = np.array([0.5, -1.0])
    out = run(tn.conv2d_valid, np.zeros((1, 4, 24)), np.ones((2, 1, 2, 4)), bias)
    assert out.shape == (2, 3, 21)
    assert np.all(out.value[0] == 0.5) and np.all(out.value[1] == -1.0)


def test_conv_moving_average_of_constant():
    out = run(tn.conv2d_valid, np.full((1, 1, 24), 2.0), np.full((1, 1, 1, 4), 0.25), np.zeros(1))
    assert out.shape == (1, 1, 21)
    assert np.all(out.value == 2.0)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, k, b = rng.normal(size=(2, 4, 9)), rng.normal(size=(3, 2, 2, 4)), rng.normal(size=3)
    out = run(tn.conv2d_valid, x, k, b).value
    for o in range(3):
        for i in range(3):
            for j in range(6):
                assert math.isclose(out[o, i, j], float(np.sum(x[:, i:i + 2, j:j + 4] * k[o]) + b[o]), abs_tol=1e-12)


def test_conv_detector_shapes_and_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4, 24))
    for kh, expected in ((1, (8, 4, 21)), (2, (8, 3, 21))):
        k, b = rng.normal(size=(8, 1, kh, 4)), rng.normal(size=8)
        assert run(tn.conv2d_valid, x, k, b).shape == expected
        w = rng.normal(size=expected)
        f = lambda t, v: tn.sum_all(tn.mul(tn.conv2d_valid(*v), t.leaf(w)))
        assert grad_check(f, [x, k, b]) < 1e-6


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        run(tn.conv2d_valid, np.ones((1, 1, 3)), np.ones((1, 1, 2, 4)), np.zeros(1))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(4, 24), st.integers(1, 2), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_conv_output_shape(c_in, c_out, H, W, kh, kw):
    kh = min(kh, H)
    out = run(tn.conv2d_valid, np.ones((c_in, H, W)), np.ones((c_out, c_in, kh, kw)), np.zeros(c_out))
    assert out.shape == (c_out, H - kh + 1, W - kw + 1)


# pooling

def test_maxpool_hand_case():
    out, arg = run(tn.maxpool_time, np.array([[[1.0, 3.0, 2.0, 5.0]]]), window=2, stride=2)
    assert out.value.tolist() == [[[3.0, 5.0]]]
    assert arg.tolist() == [[[1, 3]]]


def test_maxpool_ties_route_to_first_index():
    tape = Tape()
    x = tape.leaf(np.full((1, 1, 6), 4.0))
    out, arg = tn.maxpool_time(x, 3, 3)
    assert np.all(out.value == 4.0)
    tape.backward(tn.sum_all(out))
    assert x.grad.tolist() == [[[1.0, 0, 0, 1.0, 0, 0]]]


def test_maxpool_overlapping_windows_accumulate():
    tape = Tape()
    x = tape.leaf(np.array([0.0, 9.0, 0.0, 0.0]))
    out, _ = tn.maxpool_time(x, 2, 1)
    tape.backward(tn.sum_all(out))
    # third window [0, 0] is a tie and routes to its first index
    assert x.grad.tolist() == [0.0, 2.0, 1.0, 0.0]


def test_maxpool_detector_shape_and_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 4, 21))
    out, _ = run(tn.maxpool_time, x, window=3, stride=3)
    assert out.shape == (8, 4, 7)
    w = rng.normal(size=(8, 4, 7))
    assert grad_check(lambda t, v: tn.sum_all(tn.mul(tn.maxpool_time(v[0], 3, 3)[0], t.leaf(w))), [x]) < 1e-6


def test_maxpool_rejects_empty_output():
    with pytest.raises(ValueError):
        run(tn.maxpool_time, np.ones((1, 2)), window=3, stride=1)


# LSTM

def test_lstm_zero_weights_give_zero_states():
    out = run(tn.lstm_forward, np.zeros((5, 3)), np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))
    assert out.shape == (5, 2)
    assert np.all(out.value == 0.0)


def test_lstm_single_step_matches_hand_cell():
    rng = np.random.default_rng(4)
    x, wx, wh, b = rng.normal(size=(1, 1)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=4)
    sig = lambda z: 1 / (1 + math.exp(-z))
    z = x[0, 0] * wx[0] + b
    c = sig(z[0]) * math.tanh(z[2])
    h = sig(z[3]) * math.tanh(c)
    assert math.isclose(run(tn.lstm_forward, x, wx, wh, b).value[0, 0], h, rel_tol=1e-12)


def test_lstm_two_steps_match_reference_recurrence():
    rng = np.random.default_rng(5)
    x, wx, wh, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
    sig = lambda z: 1 / (1 + np.exp(-z))
    h, c = np.zeros(2), np.zeros(2)
    ref = []
    for t in range(2):
        z = x[t] @ wx + h @ wh + b
        c = sig(z[2:4]) * c + sig(z[0:2]) * np.tanh(z[4:6])
        h = sig(z[6:8]) * np.tanh(c)
        ref.append(h)
    assert np.allclose(run(tn.lstm_forward, x, wx, wh, b).value, np.array(ref), atol=1e-12)


def test_lstm_detector_shape_and_gradient():
    rng = np.random.default_rng(6)
    f, inputs = CASES["lstm"](rng, True)
    assert run(tn.lstm_forward, *inputs).shape == (7, 64)
    assert grad_check(f, inputs, step=STEPS["lstm"], n_coords=SUBSAMPLE, rng=rng) < 1e-5


# attention

def _attn_params(rng, d):
    return {k: rng.normal(size=(d, d)) * 0.3 if k.startswith("W") else rng.normal(size=d) * 0.3
            for k in tn.ATTENTION_KEYS}


def test_attention_single_step_is_projected_value():
    rng = np.random.default_rng(7)
    H = rng.normal(size=(1, 8))
    p = _attn_params(rng, 8)
    tape = Tape()
    out, w = tn.multihead_self_attention(tape.leaf(H), 2, {k: tape.leaf(v) for k, v in p.items()})
    assert np.all(w.value == 1.0)
    expected = (H @ p["W_v"] + p["b_v"]) @ p["W_o"] + p["b_o"]
    assert np.allclose(out.value, expected, atol=1e-12)


def test_attention_identical_rows_give_identical_attention():
    rng = np.random.default_rng(8)
    H = np.tile(rng.normal(size=(1, 8)), (5, 1))
    tape = Tape()
    out, w = tn.multihead_self_attention(tape.leaf(H), 4, {k: tape.leaf(v) for k, v in _attn_params(rng, 8).items()})
    assert np.allclose(w.value, w.value[:, :1, :], atol=0)
    assert np.allclose(out.value, out.value[:1], atol=1e-12)


def test_attention_rows_sum_to_one_and_gradient():
    rng = np.random.default_rng(9)
    tape = Tape()
    H = rng.normal(size=(7, 64))
    _, w = tn.multihead_self_attention(tape.leaf(H), 4, {k: tape.leaf(v) for k, v in _attn_params(rng, 64).items()})
    assert w.shape == (4, 7, 7)
    assert np.max(np.abs(w.value.sum(axis=-1) - 1.0)) < 1e-9
    f, inputs = CASES["attention"](rng, True)
    assert grad_check(f, inputs, step=STEPS["attention"], n_coords=SUBSAMPLE, rng=rng) < 1e-5


def test_attention_head_divisibility():
    tape = Tape()
    with pytest.raises(ValueError):
        tn.multihead_self_attention(tape.leaf(np.ones((3, 6))), 4, {})


# softmax / cross-entropy

def test_softmax_examples():
    assert run(tn.softmax, [0.0, 0.0]).value.tolist() == [0.5, 0.5]
    big = run(tn.softmax, [1000.0, 0.0]).value
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)


@given(arrays(np.float64, 5, elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant_and_normalized(z, c):
    a = tn.softmax_array(z)
    assert abs(a.sum() - 1.0) < 1e-9
    assert np.max(np.abs(a - tn.softmax_array(z + c))) < 1e-12


def test_cross_entropy_examples():
    perfect = run(tn.cross_entropy, [[0.0, 1.0]], labels=[1]).value
    assert 0 <= perfect < 1e-11
    half = run(tn.cross_entropy, np.full((4, 2), 0.5), labels=[0, 1, 1, 0]).value
    assert half == pytest.approx(math.log(2), abs=1e-12)
    assert math.isclose(half, 0.6931, abs_tol=5e-5)


def test_cross_entropy_clamps_zero_probability():
    loss = run(tn.cross_entropy, [[1.0, 0.0]], labels=[1]).value
    assert loss == pytest.approx(-math.log(1e-12))


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(10)
    labels = rng.integers(0, 2, 16)
    f = lambda t, v: tn.cross_entropy(tn.softmax(v[0]), labels)
    assert grad_check(f, [rng.normal(size=(16, 2))]) < 1e-6


def test_cross_entropy_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        run(tn.cross_entropy, [[0.3, 0.3]], labels=[1])


# layer norm

def test_layer_norm_statistics():
    rng = np.random.default_rng(11)
    out = run(tn.layer_norm, rng.normal(3, 5, size=(4, 16)), np.ones(16), np.zeros(16)).value
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(out.var(axis=-1), 1, atol=1e-5)


# engine behaviour and grad_check itself

def test_grad_check_sum_of_squares():
    rng = np.random.default_rng(12)
    f = lambda t, v: tn.sum_all(tn.mul(v[0], v[0]))
    assert grad_check(f, [rng.normal(size=(4, 3))]) < 1e-9


def test_grad_check_steps_off_a_kink():
    # at x = 1e-6 a 1e-5 step crosses the ReLU corner, and the plain central difference reads 0.55
    f = lambda t, v: tn.sum_all(tn.relu(v[0]))
    rows = tn.grad_check_details(f, [np.array([1e-6])], step=1e-5)
    assert rows[0][5] < 1e-6
    assert rows[0][3] == pytest.approx(1.0) and rows[0][4] < 1e-9
    rows = tn.grad_check_details(f, [np.array([1e-6])], step=1e-5, max_shrink=0)
    assert rows[0][3] == pytest.approx(0.55)


def test_grad_check_catches_broken_backward(monkeypatch):
    def bad_tanh(a):
        y = np.tanh(a.value)
        return a.tape._record(y, (a,), lambda g: (g * (1.0 - y),), "tanh")

    monkeypatch.setattr(tn, "tanh", bad_tanh)
    rng = np.random.default_rng(13)
    f = lambda t, v: tn.sum_all(tn.tanh(v[0]))
    assert grad_check(f, [rng.normal(size=6)]) > 1e-2


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError):
        grad_check(lambda t, v: tn.sum_all(v[0]), [np.array([1.0, np.nan])])
    with pytest.raises(ValueError):
        grad_check(lambda t, v: tn.sum_all(v[0]), [np.ones(2)], step=0)


def test_forward_nan_is_an_error():
    tape = Tape()
    x = tape.leaf([1.0, -1.0])
    with pytest.raises(NumericError, match="scale"):
        tn.scale(x, np.inf)


def test_backward_gradients_match_value_shapes():
    rng = np.random.default_rng(14)
    f, inputs = CASES["encoder_layer"](rng, False)
    tape = Tape()
    leaves = [tape.leaf(a) for a in inputs]
    tape.backward(f(tape, leaves))
    for node in tape.nodes:
        assert node.grad is not None and node.grad.shape == node.value.shape
    ids = {id(n): i for i, n in enumerate(tape.nodes)}
    assert all(ids[id(p)] < ids[id(n)] for n in tape.nodes for p in n.parents)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(15)
    f, inputs = CASES["encoder_layer"](rng, True)
    a = f(Tape(), [Tape().leaf(x) for x in inputs])
    t = Tape()
    b = f(t, [t.leaf(x) for x in inputs])
    assert a.value.tobytes() == b.value.tobytes()


@pytest.mark.parametrize("op", sorted(set(CASES) - {"detector_loss"}))
def test_op_gradients_over_twenty_seeds(op):
    result = check_op(op, seeds=20)
    assert result.max_error < THRESHOLDS[op], result
