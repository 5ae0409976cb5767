"""Finite-difference verification of every tensor op and of the end-to-end detector loss.

Each op is checked on a fixed case with the detector's own shapes (seed 0) and on random
shapes for the remaining seeds. Ops are reduced to a scalar through a random weighting
``sum(op(...) * R)`` so that every output coordinate contributes to the gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import ModelConfig, forward_nodes, init_params
from .tensor import grad_check

# op -> maximum allowed relative error
THRESHOLDS = {
    "linear": 1e-6,
    "conv2d_valid": 1e-6,
    "maxpool_time": 1e-6,
    "layer_norm": 1e-6,
    "softmax_cross_entropy": 1e-6,
    "lstm": 1e-5,
    "attention": 1e-5,
    "encoder_layer": 1e-5,
    "detector_loss": 1e-4,
}

# central-difference step per op. At 1e-5 roundoff (~1e-11 absolute) swamps coordinates whose gradient is
# ~1e-7, so the deep graphs use 1e-4; differences that straddle a ReLU/max kink are retried at smaller steps
STEPS = {op: 1e-5 for op in THRESHOLDS} | {"lstm": 1e-4, "attention": 1e-4, "encoder_layer": 1e-4,
                                           "detector_loss": 1e-4}

SUBSAMPLE = 240


def _weighted(node: tn.Node, w: np.ndarray) -> tn.Node:
    return tn.sum_all(tn.mul(node, node.tape.leaf(w)))


def _case_linear(rng, fixed):
    n, d_in, d_out = (3, 5, 2) if fixed else rng.integers(1, 6, size=3)
    w = rng.normal(size=(n, d_out))
    return (lambda t, v: _weighted(tn.linear(*v), w),
            [rng.normal(size=(n, d_in)), rng.normal(size=(d_in, d_out)), rng.normal(size=d_out)])


def _case_conv(rng, fixed):
    if fixed:
        c_in, H, W, c_out, kh, kw = 1, 4, 24, 8, int(rng.integers(1, 3)), 4
    else:
        c_in, c_out = rng.integers(1, 3), rng.integers(1, 5)
        H, W = rng.integers(2, 6), rng.integers(4, 25)
        kh, kw = rng.integers(1, H + 1), rng.integers(1, 5)
    batch = () if fixed or rng.random() < 0.5 else (int(rng.integers(1, 4)),)
    x = rng.normal(size=batch + (c_in, H, W))
    w = rng.normal(size=batch + (c_out, H - kh + 1, W - kw + 1))
    return (lambda t, v: _weighted(tn.conv2d_valid(*v), w),
            [x, rng.normal(size=(c_out, c_in, kh, kw)), rng.normal(size=c_out)])


def _case_pool(rng, fixed):
    if fixed:
        shape, window, stride = (8, 4, 21), 3, 3
    else:
        window, stride = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(window, 22)))
    x = rng.normal(size=shape)
    n_out = (shape[-1] - window) // stride + 1
    w = rng.normal(size=shape[:-1] + (n_out,))
    return (lambda t, v: _weighted(tn.maxpool_time(v[0], window, stride)[0], w), [x])


def _case_layer_norm(rng, fixed):
    # width >= 4: with two features the normalized output is +-1 whatever the input, so gradients vanish
    shape = (7, 64) if fixed else tuple(int(s) for s in rng.integers(1, 9, size=int(rng.integers(0, 3)))) + (
        int(rng.integers(4, 17)),)
    w = rng.normal(size=shape)
    d = shape[-1]
    return (lambda t, v: _weighted(tn.layer_norm(*v), w),
            [rng.normal(size=shape), rng.normal(size=d), rng.normal(size=d)])


def _case_ce(rng, fixed):
    n = 16 if fixed else int(rng.integers(1, 17))
    labels = rng.integers(0, 2, size=n)
    return (lambda t, v: tn.cross_entropy(tn.softmax(v[0], axis=-1), labels), [rng.normal(size=(n, 2))])


def _case_lstm(rng, fixed):
    T, d_in, h = (7, 56, 64) if fixed else (int(rng.integers(1, 8)), int(rng.integers(1, 9)), int(rng.integers(1, 7)))
    batch = () if fixed or rng.random() < 0.5 else (int(rng.integers(1, 4)),)
    w = rng.normal(size=batch + (T, h))
    b_in, b_h = 1 / np.sqrt(d_in), 1 / np.sqrt(h)
    inputs = [rng.normal(size=batch + (T, d_in)), rng.uniform(-b_in, b_in, (d_in, 4 * h)),
              rng.uniform(-b_h, b_h, (h, 4 * h)), rng.uniform(-b_h, b_h, 4 * h)]
    return (lambda t, v: _weighted(tn.lstm_forward(*v), w), inputs)


def _attention_inputs(rng, d, with_encoder, ffn):
    shapes = {"W_q": (d, d), "b_q": (d,), "W_k": (d, d), "W_v": (d, d), "b_v": (d,), "W_o": (d, d), "b_o": (d,)}
    if with_encoder:
        shapes.update({"ln1_gamma": (d,), "ln1_beta": (d,), "W_ff1": (d, ffn), "b_ff1": (ffn,),
                       "W_ff2": (ffn, d), "b_ff2": (d,), "ln2_gamma": (d,), "ln2_beta": (d,)})
    keys = tn.ENCODER_KEYS if with_encoder else tn.ATTENTION_KEYS
    return keys, [rng.uniform(-1, 1, shapes[k]) / np.sqrt(shapes[k][0]) if len(shapes[k]) == 2
                  else rng.normal(size=shapes[k]) * 0.5 for k in keys]


def _case_attention(rng, fixed, with_encoder=False):
    if fixed:
        T, heads, d = 7, 4, 64
    else:
        T, heads = int(rng.integers(1, 8)), int(rng.integers(1, 5))
        d = heads * int(rng.integers(max(1, -(-4 // heads)), 5))
    ffn = 128 if fixed else int(rng.integers(1, 9))
    keys, params = _attention_inputs(rng, d, with_encoder, ffn)
    batch = () if fixed or rng.random() < 0.5 else (int(rng.integers(1, 3)),)
    w = rng.normal(size=batch + (T, d))

    def f(t, v):
        p = dict(zip(keys, v[1:]))
        out = tn.encoder_layer(v[0], heads, p) if with_encoder else tn.multihead_self_attention(v[0], heads, p)[0]
        return _weighted(out, w)

    return f, [rng.normal(size=batch + (T, d))] + params


def _case_detector(rng, fixed, cfg: ModelConfig | None = None):
    cfg = cfg or ModelConfig()
    cfg = replace(cfg, seed=int(rng.integers(0, 2**31)))
    params = init_params(cfg)
    keys = list(params)
    x = rng.normal(size=(1, 1, 4, 24))
    tf = np.append(rng.normal(size=4), rng.integers(0, 4) / 3.0)[None]
    y = [int(rng.integers(0, 2))]

    def f(t, v):
        probs = forward_nodes(t, dict(zip(keys, v)), x, tf, cfg)
        return tn.cross_entropy(probs, y)

    return f, [params[k] for k in keys]


CASES: dict[str, Callable] = {
    "linear": _case_linear,
    "conv2d_valid": _case_conv,
    "maxpool_time": _case_pool,
    "layer_norm": _case_layer_norm,
    "softmax_cross_entropy": _case_ce,
    "lstm": _case_lstm,
    "attention": _case_attention,
    "encoder_layer": lambda rng, fixed: _case_attention(rng, fixed, with_encoder=True),
    "detector_loss": _case_detector,
}


@dataclass
class OpResult:
    op: str
    max_error: float
    threshold: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


def check_op(op: str, seeds: int = 20, step: float | None = None) -> OpResult:
    step = step or STEPS[op]
    start = time.perf_counter()
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 0x6C4])
        f, inputs = CASES[op](rng, seed == 0)
        err = grad_check(f, inputs, step=step, n_coords=SUBSAMPLE, rng=rng)
        worst = max(worst, err)
    return OpResult(op, worst, THRESHOLDS[op], seeds, time.perf_counter() - start)


def run_suite(seeds: int = 20, ops=None) -> list[OpResult]:
    return [check_op(op, seeds) for op in (ops or CASES)]
