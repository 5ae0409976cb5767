"""Hybrid theft detector: multi-scale CNN -> LSTM -> Transformer encoder, fused with a temperature embedding.

Data flow for one day (default config, batch axis omitted)::

    (1,4,24) --conv 1x4--> (8,4,21) --pool--> (8,4,7) \
             --conv 2x4--> (8,3,21) --pool--> (8,3,7)  > (7,56) --LSTM--> (7,64)
    --encoder--> (7,64) --mean over time--> (64) ++ temp embedding (16) -> (80) -> 32 -> 2 -> softmax
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tn
from .domain import DayRecord, Season, TempStats
from .tensor import Node, NumericError, Tape

# rows of the input matrix; adjacent pairs are what the 2x4 kernel compares
INPUT_ROWS = ("load_pattern", "load", "reported_gen", "reported_gen_pattern")
KERNEL_SIZES = ((1, 4), (2, 4))
N_TEMP_FEATURES = 5
LSTM_FORGET_BIAS = 1.0

Params = dict  # parameter path -> float64 array


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: int = 8
    pool_window: int = 3
    pool_stride: int = 3
    lstm_hidden: int = 64
    tx_layers: int = 1
    tx_heads: int = 4
    tx_ffn: int = 128
    temp_hidden: int = 16
    temp_embed_dim: int = 16
    head_hidden: int = 32
    positional_encoding: bool = True
    seed: int = 0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        ints = {k: v for k, v in asdict(self).items() if k not in ("positional_encoding", "seed")}
        out += [f"{k} must be a positive integer" for k, v in ints.items() if not isinstance(v, int) or v < 1]
        if isinstance(self.tx_heads, int) and self.tx_heads > 0 and self.lstm_hidden % self.tx_heads:
            out.append(f"lstm_hidden {self.lstm_hidden} is not divisible by tx_heads {self.tx_heads}")
        if self.seed < 0:
            out.append("seed must be non-negative")
        return out

    @property
    def conv_length(self) -> int:
        return 24 - KERNEL_SIZES[0][1] + 1

    @property
    def pooled_length(self) -> int:
        return (self.conv_length - self.pool_window) // self.pool_stride + 1

    @property
    def cnn_features(self) -> int:
        rows = sum(len(INPUT_ROWS) - kh + 1 for kh, _ in KERNEL_SIZES)
        return self.conv_channels * rows

    def to_dict(self) -> dict:
        return asdict(self)


def expected_shape_chain(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample shapes that :func:`forward_nodes` must produce, stage by stage."""
    c, T = cfg.conv_channels, cfg.pooled_length
    n_rows = len(INPUT_ROWS)
    return [
        ("input", (1, n_rows, 24)),
        ("conv_a", (c, n_rows, cfg.conv_length)),
        ("conv_b", (c, n_rows - 1, cfg.conv_length)),
        ("pool_a", (c, n_rows, T)),
        ("pool_b", (c, n_rows - 1, T)),
        ("cnn_features", (T, cfg.cnn_features)),
        ("lstm", (T, cfg.lstm_hidden)),
        ("encoder", (T, cfg.lstm_hidden)),
        ("pooled", (cfg.lstm_hidden,)),
        ("temp_embed", (cfg.temp_embed_dim,)),
        ("fused", (cfg.lstm_hidden + cfg.temp_embed_dim,)),
        ("probs", (2,)),
    ]


@dataclass(frozen=True)
class NormStats:
    """Training-split z-score statistics for the four input rows and the four temperatures."""

    series_mean: tuple
    series_std: tuple
    temp_mean: tuple
    temp_std: tuple

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: tuple(float(x) for x in d[k]) for k in ("series_mean", "series_std", "temp_mean", "temp_std")})

    @classmethod
    def identity(cls) -> "NormStats":
        return cls((0.0,) * 4, (1.0,) * 4, (0.0,) * 4, (1.0,) * 4)


def _safe_std(x: np.ndarray, axis=None) -> np.ndarray:
    s = x.std(axis=axis)
    return np.where(s > 0, s, 1.0)


def compute_norm_stats(records: Sequence[DayRecord]) -> NormStats:
    """Mean/std of each input row type over all hours of ``records`` (the training split)."""
    if not records:
        raise ValueError("cannot compute normalization statistics from no records")
    series = np.array([[getattr(r, name) for name in INPUT_ROWS] for r in records])  # (n, 4, 24)
    flat = series.transpose(1, 0, 2).reshape(len(INPUT_ROWS), -1)
    temps = np.array([r.temp.as_vector() for r in records])
    return NormStats(
        series_mean=tuple(float(v) for v in flat.mean(axis=1)),
        series_std=tuple(float(v) for v in _safe_std(flat, axis=1)),
        temp_mean=tuple(float(v) for v in temps.mean(axis=0)),
        temp_std=tuple(float(v) for v in _safe_std(temps, axis=0)),
    )


def assemble_input(r: DayRecord, norm: NormStats) -> np.ndarray:
    """Normalized (1, 4, 24) input matrix with rows in :data:`INPUT_ROWS` order."""
    rows = []
    for name in INPUT_ROWS:
        s = getattr(r, name, None)
        if s is None:
            raise ValueError(f"record is missing series {name!r}")
        rows.append(np.asarray(s, dtype=np.float64))
    x = np.stack(rows)
    mean = np.asarray(norm.series_mean)[:, None]
    std = np.asarray(norm.series_std)[:, None]
    return ((x - mean) / std)[None]


def denormalize_input(x: np.ndarray, norm: NormStats) -> np.ndarray:
    """Inverse of :func:`assemble_input`: raw (4, 24) series from a (1, 4, 24) matrix."""
    return x[0] * np.asarray(norm.series_std)[:, None] + np.asarray(norm.series_mean)[:, None]


def temp_features(t: TempStats, norm: NormStats) -> np.ndarray:
    """[high, low, median, std] z-scored, then the season index scaled to [0, 1]."""
    z = (t.as_vector() - np.asarray(norm.temp_mean)) / np.asarray(norm.temp_std)
    return np.append(z, Season(t.season).value / 3.0)


def batch_arrays(records: Iterable[DayRecord], norm: NormStats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    recs = list(records)
    X = np.stack([assemble_input(r, norm) for r in recs])
    Tf = np.stack([temp_features(r.temp, norm) for r in recs])
    y = np.array([r.label for r in recs], dtype=np.int64)
    return X, Tf, y


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter path -> (shape, fan_in)."""
    c, h = cfg.conv_channels, cfg.lstm_hidden
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    for tag, (kh, kw) in zip("ab", KERNEL_SIZES):
        shapes[f"conv_{tag}.kernels"] = ((c, 1, kh, kw), kh * kw)
        shapes[f"conv_{tag}.bias"] = ((c,), kh * kw)
    f = cfg.cnn_features
    shapes["lstm.W_x"] = ((f, 4 * h), f)
    shapes["lstm.W_h"] = ((h, 4 * h), h)
    shapes["lstm.b"] = ((4 * h,), h)
    for layer in range(cfg.tx_layers):
        p = f"encoder{layer}."
        for name in ("W_q", "W_k", "W_v", "W_o"):
            shapes[p + name] = ((h, h), h)
        for name in ("b_q", "b_v", "b_o"):
            shapes[p + name] = ((h,), h)
        shapes[p + "ln1_gamma"] = ((h,), 0)
        shapes[p + "ln1_beta"] = ((h,), 0)
        shapes[p + "W_ff1"] = ((h, cfg.tx_ffn), h)
        shapes[p + "b_ff1"] = ((cfg.tx_ffn,), h)
        shapes[p + "W_ff2"] = ((cfg.tx_ffn, h), cfg.tx_ffn)
        shapes[p + "b_ff2"] = ((h,), cfg.tx_ffn)
        shapes[p + "ln2_gamma"] = ((h,), 0)
        shapes[p + "ln2_beta"] = ((h,), 0)
    shapes["temp.W1"] = ((N_TEMP_FEATURES, cfg.temp_hidden), N_TEMP_FEATURES)
    shapes["temp.b1"] = ((cfg.temp_hidden,), N_TEMP_FEATURES)
    shapes["temp.W2"] = ((cfg.temp_hidden, cfg.temp_embed_dim), cfg.temp_hidden)
    shapes["temp.b2"] = ((cfg.temp_embed_dim,), cfg.temp_hidden)
    fused = h + cfg.temp_embed_dim
    shapes["head.W1"] = ((fused, cfg.head_hidden), fused)
    shapes["head.b1"] = ((cfg.head_hidden,), fused)
    shapes["head.W2"] = ((cfg.head_hidden, 2), cfg.head_hidden)
    shapes["head.b2"] = ((2,), cfg.head_hidden)
    return shapes


def init_params(cfg: ModelConfig) -> Params:
    """Uniform(+-1/sqrt(fan_in)) everywhere, except LayerNorm (gamma 1, beta 0) and the LSTM forget bias (1.0)."""
    rng = np.random.default_rng([cfg.seed, 0x1A17])
    params: Params = {}
    for path, (shape, fan_in) in param_shapes(cfg).items():
        if path.endswith("_gamma"):
            params[path] = np.ones(shape)
        elif path.endswith("_beta"):
            params[path] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            params[path] = rng.uniform(-bound, bound, size=shape)
    h = cfg.lstm_hidden
    params["lstm.b"][h:2 * h] = LSTM_FORGET_BIAS
    return params


def bind(tape: Tape, params: Params) -> dict[str, Node]:
    return {path: tape.leaf(arr) for path, arr in params.items()}


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except NumericError as exc:
        raise NumericError(f"non-finite values in stage '{name}': {exc}") from exc


def embed_temperature_nodes(tf: Node, p: dict[str, Node]) -> Node:
    return tn.linear(tn.tanh(tn.linear(tf, p["temp.W1"], p["temp.b1"])), p["temp.W2"], p["temp.b2"])


def forward_nodes(tape: Tape, p: dict[str, Node], X: np.ndarray | Node, Tf: np.ndarray | Node, cfg: ModelConfig,
                  trace: list | None = None) -> Node:
    """Class probabilities (B, 2) for a batch X (B, 1, 4, 24) with temperature features Tf (B, 5).

    When ``trace`` is a list, (stage, per-sample shape) pairs are appended to it.
    """
    x = X if isinstance(X, Node) else tape.leaf(X)
    tf = Tf if isinstance(Tf, Node) else tape.leaf(Tf)
    B = x.shape[0]

    def mark(name: str, node: Node) -> Node:
        if trace is not None:
            trace.append((name, tuple(node.shape[1:])))
        return node

    mark("input", x)
    with _stage("cnn"):
        a = mark("conv_a", tn.relu(tn.conv2d_valid(x, p["conv_a.kernels"], p["conv_a.bias"])))
        b = mark("conv_b", tn.relu(tn.conv2d_valid(x, p["conv_b.kernels"], p["conv_b.bias"])))
        a, _ = tn.maxpool_time(a, cfg.pool_window, cfg.pool_stride)
        b, _ = tn.maxpool_time(b, cfg.pool_window, cfg.pool_stride)
        mark("pool_a", a)
        mark("pool_b", b)
        T = a.shape[-1]
        # (B, C, R, T) -> (B, T, C*R): one feature vector per pooled time step
        fa = tn.reshape(tn.transpose(a, (0, 3, 1, 2)), (B, T, -1))
        fb = tn.reshape(tn.transpose(b, (0, 3, 1, 2)), (B, T, -1))
        feats = mark("cnn_features", tn.concat([fa, fb], axis=-1))
    with _stage("lstm"):
        h = mark("lstm", tn.lstm_forward(feats, p["lstm.W_x"], p["lstm.W_h"], p["lstm.b"]))
    with _stage("transformer"):
        if cfg.positional_encoding:
            h = tn.add_const(h, tn.sinusoidal_positions(T, h.shape[-1]))
        for layer in range(cfg.tx_layers):
            prefix = f"encoder{layer}."
            layer_params = {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}
            h = tn.encoder_layer(h, cfg.tx_heads, layer_params)
        mark("encoder", h)
        pooled = mark("pooled", tn.mean(h, axis=1))
    with _stage("temperature_embedding"):
        emb = mark("temp_embed", embed_temperature_nodes(tf, p))
    with _stage("head"):
        fused = mark("fused", tn.concat([pooled, emb], axis=-1))
        hidden = tn.relu(tn.linear(fused, p["head.W1"], p["head.b1"]))
        probs = mark("probs", tn.softmax(tn.linear(hidden, p["head.W2"], p["head.b2"]), axis=-1))
    return probs


def predict_proba(params: Params, X: np.ndarray, Tf: np.ndarray, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Class probabilities (n, 2), computed in fixed-size chunks."""
    out = []
    for start in range(0, X.shape[0], batch_size):
        tape = Tape()
        out.append(forward_nodes(tape, bind(tape, params), X[start:start + batch_size],
                                 Tf[start:start + batch_size], cfg).value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


def forward(params: Params, x: np.ndarray, temp: TempStats, norm: NormStats, cfg: ModelConfig) -> np.ndarray:
    """Class probabilities [benign, theft] for one assembled (1, 4, 24) input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (1, len(INPUT_ROWS), 24):
        raise ValueError(f"input matrix has shape {x.shape}, expected (1, 4, 24)")
    return predict_proba(params, x[None], temp_features(temp, norm)[None], cfg)[0]


def embed_temperature(t: TempStats, params: Params, norm: NormStats) -> np.ndarray:
    """Temperature embedding vector for one day."""
    tape = Tape()
    tf = tape.leaf(temp_features(t, norm)[None])
    return embed_temperature_nodes(tf, bind(tape, params)).value[0]


def loss_and_grads(params: Params, X: np.ndarray, Tf: np.ndarray, y: np.ndarray, cfg: ModelConfig) -> tuple[float, Params]:
    """Mean cross-entropy over the batch and its gradient for every parameter path."""
    tape = Tape()
    p = bind(tape, params)
    loss = tn.cross_entropy(forward_nodes(tape, p, X, Tf, cfg), y)
    tape.backward(loss)
    grads = {k: (np.zeros_like(params[k]) if n.grad is None else n.grad) for k, n in p.items()}
    return float(loss.value), grads


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def params_equal(a: Params, b: Params) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)
