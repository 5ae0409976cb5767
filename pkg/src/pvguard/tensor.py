"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the kernels the detector needs are provided, each with a hand-written backward
rule. Every op accepts an optional leading batch axis.

Usage::

    tape = Tape()
    x = tape.leaf(np.ones((2, 3)))
    W = tape.leaf(np.eye(3, 1))
    loss = sum_all(relu(linear(x, W, tape.leaf(np.zeros(1)))))
    tape.backward(loss)
    W.grad
"""
from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]

PROB_CLAMP = 1e-12
LAYER_NORM_EPS = 1e-5


class NumericError(FloatingPointError):
    """A forward value became NaN or infinite."""


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "op", "tape", "aux")

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple = (), backward_rule: Backward | None = None,
                 op: str = "leaf"):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_rule = backward_rule
        self.op = op
        self.grad: np.ndarray | None = None
        self.aux = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"


class Tape:
    """Append-only record of a computation; nodes are stored in creation (topological) order."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def leaf(self, value) -> Node:
        arr = np.array(value, dtype=np.float64)
        return self._record(arr, (), None, "leaf")

    def _record(self, value: np.ndarray, parents: tuple, rule: Backward | None, op: str) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output from op '{op}'")
        node = Node(self, value, parents, rule, op)
        self.nodes.append(node)
        return node

    def backward(self, out: Node, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(node) into ``node.grad`` for every node ``out`` depends on."""
        if seed is None:
            if out.value.size != 1:
                raise ValueError(f"backward from a non-scalar of shape {out.shape} needs a seed gradient")
            seed = np.ones_like(out.value)
        for node in self.nodes:
            node.grad = None
        out.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_rule is None:
                continue
            grads = node.backward_rule(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _tape_of(*nodes: Node) -> Tape:
    for n in nodes:
        if isinstance(n, Node):
            return n.tape
    raise TypeError("op needs at least one Node input")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise

def add(a: Node, b: Node) -> Node:
    out = a.value + b.value
    sa, sb = a.shape, b.shape
    return a.tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return a.tape._record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul"
    )


def scale(a: Node, c: float) -> Node:
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_const(a: Node, c: np.ndarray) -> Node:
    return a.tape._record(a.value + c, (a,), lambda g: (g,), "add_const")


def relu(a: Node) -> Node:
    mask = a.value > 0
    node = a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")
    node.aux = mask
    return node


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.value)
    return a.tape._record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# shape

def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    old = a.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Node, axes: tuple[int, ...]) -> Node:
    inv = tuple(np.argsort(axes))
    return a.tape._record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(nodes: Sequence[Node], axis: int) -> Node:
    tape = _tape_of(*nodes)
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return tape._record(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def mean(a: Node, axis: int) -> Node:
    n = a.shape[axis]
    shape = a.shape
    return a.tape._record(
        a.value.mean(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),),
        "mean",
    )


def sum_all(a: Node) -> Node:
    shape = a.shape
    return a.tape._record(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


# linear algebra

def matmul(a: Node, b: Node) -> Node:
    """Batched ``a @ b`` with numpy broadcasting over leading axes (both at least 2-D)."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def rule(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return a.tape._record(av @ bv, (a, b), rule, "matmul")


def linear(x: Node, W: Node, b: Node) -> Node:
    """``x @ W + b`` over the last axis of ``x``; leading axes are batch."""
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[0] or bv.shape != (Wv.shape[1],):
        raise ValueError(f"linear shape mismatch: x{xv.shape} W{Wv.shape} b{bv.shape}")
    d_in, d_out = Wv.shape

    def rule(g):
        g2 = g.reshape(-1, d_out)
        x2 = xv.reshape(-1, d_in)
        return (g @ Wv.T, x2.T @ g2, g2.sum(axis=0))

    return x.tape._record(xv @ Wv + bv, (x, W, b), rule, "linear")


# convolution and pooling

def conv2d_valid(x: Node, kernels: Node, bias: Node) -> Node:
    """Stride-1, unpadded cross-correlation.

    x: (C_in, H, W) or (B, C_in, H, W); kernels: (C_out, C_in, kh, kw); bias: (C_out,).
    """
    xv, kv, bv = x.value, kernels.value, bias.value
    batched = xv.ndim == 4
    xb = xv if batched else xv[None]
    if xb.ndim != 4 or kv.ndim != 4 or xb.shape[1] != kv.shape[1] or bv.shape != (kv.shape[0],):
        raise ValueError(f"conv2d shape mismatch: x{xv.shape} kernels{kv.shape} bias{bv.shape}")
    _, c_in, H, W = xb.shape
    c_out, _, kh, kw = kv.shape
    if kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    Ho, Wo = H - kh + 1, W - kw + 1
    # (B, C_in, Ho, Wo, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xb, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, kv, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, C_out)
    out = np.moveaxis(out, 3, 1) + bv[None, :, None, None]

    def rule(g):
        gb = g if batched else g[None]
        gk = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, kh, kw)
        gx = np.zeros_like(xb)
        for i in range(kh):
            for j in range(kw):
                # (B, C_out, Ho, Wo) x (C_out, C_in) -> (B, Ho, Wo, C_in)
                part = np.tensordot(gb, kv[:, :, i, j], axes=([1], [0]))
                gx[:, :, i:i + Ho, j:j + Wo] += np.moveaxis(part, 3, 1)
        return (gx if batched else gx[0], gk, gb.sum(axis=(0, 2, 3)))

    return x.tape._record(out if batched else out[0], (x, kernels, bias), rule, "conv2d_valid")


def maxpool_time(x: Node, window: int, stride: int) -> tuple[Node, np.ndarray]:
    """Max over sliding windows of the last axis.

    Returns the pooled node and, for each output cell, the input position that won
    (ties go to the lowest index).
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    xv = x.value
    T = xv.shape[-1]
    n_out = (T - window) // stride + 1 if T >= window else 0
    if n_out < 1:
        raise ValueError(f"pooling window {window} with stride {stride} leaves no output from length {T}")
    idx = np.arange(n_out)[:, None] * stride + np.arange(window)[None, :]
    windows = xv[..., idx]  # (..., n_out, window)
    arg = np.argmax(windows, axis=-1)
    pos = np.arange(n_out) * stride + arg
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    lead = xv.shape[:-1]

    def rule(g):
        gx = np.zeros((int(np.prod(lead, dtype=np.int64)), T))
        rows = np.repeat(np.arange(gx.shape[0]), n_out)
        np.add.at(gx, (rows, pos.reshape(-1)), g.reshape(-1))
        return (gx.reshape(xv.shape),)

    node = x.tape._record(out, (x,), rule, "maxpool_time")
    node.aux = pos
    return node, pos


# normalization and probabilities

def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = LAYER_NORM_EPS) -> Node:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    n = xv.shape[-1]
    gv = gamma.value

    def rule(g):
        dxhat = g * gv
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        return dx, (lead * xhat.reshape(-1, n)).sum(axis=0), lead.sum(axis=0)

    return x.tape._record(xhat * gv + beta.value, (x, gamma, beta), rule, "layer_norm")


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(z: Node, axis: int = -1) -> Node:
    s = softmax_array(z.value, axis)
    return z.tape._record(s, (z,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def cross_entropy(probs: Node, labels: Sequence[int]) -> Node:
    """Mean binary cross-entropy of the class-1 column of ``probs`` (shape (n, 2))."""
    pv = probs.value
    y = np.asarray(labels, dtype=np.float64)
    if pv.ndim != 2 or pv.shape[1] != 2 or y.shape != (pv.shape[0],):
        raise ValueError(f"cross_entropy expects probs (n, 2) and n labels, got {pv.shape} and {y.shape}")
    if np.any(np.abs(pv.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    n = pv.shape[0]
    raw = pv[:, 1]
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP)

    def rule(g):
        gp = np.zeros_like(pv)
        gp[:, 1] = float(g) * -(y / p - (1.0 - y) / (1.0 - p)) / n * inside
        return (gp,)

    return probs.tape._record(np.array(loss), (probs,), rule, "cross_entropy")


# recurrent

def lstm_forward(x_seq: Node, W_x: Node, W_h: Node, b: Node,
                 h0: np.ndarray | None = None, c0: np.ndarray | None = None) -> Node:
    """Full hidden sequence of a single-layer LSTM.

    x_seq: (T, d_in) or (B, T, d_in). Gate blocks in W_x (d_in, 4h), W_h (h, 4h) and
    b (4h,) are ordered input, forget, candidate, output.
    """
    xv = x_seq.value
    batched = xv.ndim == 3
    xb = xv if batched else xv[None]
    Wx, Wh, bv = W_x.value, W_h.value, b.value
    if Wx.ndim != 2 or Wh.ndim != 2 or Wx.shape[1] % 4 or xb.ndim != 3 or xb.shape[2] != Wx.shape[0]:
        raise ValueError(f"lstm shape mismatch: x{xv.shape} W_x{Wx.shape} W_h{Wh.shape}")
    hd = Wx.shape[1] // 4
    if Wh.shape != (hd, 4 * hd) or bv.shape != (4 * hd,):
        raise ValueError(f"lstm shape mismatch: W_h{Wh.shape} b{bv.shape} for hidden size {hd}")
    B, T, _ = xb.shape
    h = np.zeros((B, hd)) if h0 is None else np.broadcast_to(h0, (B, hd)).astype(np.float64)
    c = np.zeros((B, hd)) if c0 is None else np.broadcast_to(c0, (B, hd)).astype(np.float64)

    hs, cs, gates = [h], [c], []
    xproj = xb @ Wx + bv  # (B, T, 4h)
    for t in range(T):
        z = xproj[:, t] + h @ Wh
        i = _sigmoid(z[:, :hd])
        f = _sigmoid(z[:, hd:2 * hd])
        gc = np.tanh(z[:, 2 * hd:3 * hd])
        o = _sigmoid(z[:, 3 * hd:])
        c = f * c + i * gc
        h = o * np.tanh(c)
        gates.append((i, f, gc, o))
        hs.append(h)
        cs.append(c)
    H = np.stack(hs[1:], axis=1)

    def rule(G):
        Gb = G if batched else G[None]
        dWx = np.zeros_like(Wx)
        dWh = np.zeros_like(Wh)
        db = np.zeros_like(bv)
        dx = np.zeros_like(xb)
        dh_next = np.zeros((B, hd))
        dc_next = np.zeros((B, hd))
        for t in reversed(range(T)):
            i, f, gc, o = gates[t]
            tc = np.tanh(cs[t + 1])
            dh = Gb[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate(
                [dc * gc * i * (1.0 - i), dc * cs[t] * f * (1.0 - f), dc * i * (1.0 - gc * gc), do * o * (1.0 - o)],
                axis=1,
            )
            dWx += xb[:, t].T @ dz
            dWh += hs[t].T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ Wx.T
            dh_next = dz @ Wh.T
            dc_next = dc * f
        return (dx if batched else dx[0], dWx, dWh, db)

    return x_seq.tape._record(H if batched else H[0], (x_seq, W_x, W_h, b), rule, "lstm")


# attention

# no key bias: it shifts every score of a query equally, so softmax cancels it and its gradient is zero
ATTENTION_KEYS = ("W_q", "b_q", "W_k", "W_v", "b_v", "W_o", "b_o")
ENCODER_KEYS = ATTENTION_KEYS + ("ln1_gamma", "ln1_beta", "W_ff1", "b_ff1", "W_ff2", "b_ff2", "ln2_gamma", "ln2_beta")


def multihead_self_attention(H: Node, n_heads: int, params: Mapping[str, Node]) -> tuple[Node, Node]:
    """Scaled dot-product self-attention over the time axis.

    H: (T, d) or (B, T, d). Returns the output-projected result and the attention
    weights of shape (B, n_heads, T, T) (batch axis dropped for unbatched input).
    """
    d = H.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
    batched = len(H.shape) == 3
    Hb = H if batched else reshape(H, (1,) + H.shape)
    B, T, _ = Hb.shape
    dh = d // n_heads

    def heads(proj):
        return transpose(reshape(proj, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(Hb, params["W_q"], params["b_q"]))
    k = heads(matmul(Hb, params["W_k"]))
    v = heads(linear(Hb, params["W_v"], params["b_v"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = linear(reshape(ctx, (B, T, d)), params["W_o"], params["b_o"])
    if not batched:
        out = reshape(out, (T, d))
        weights = reshape(weights, weights.shape[1:])
    return out, weights


def encoder_layer(x: Node, n_heads: int, params: Mapping[str, Node]) -> Node:
    """Post-norm Transformer encoder block: attention and a ReLU feed-forward, each with residual + LayerNorm."""
    attn, _ = multihead_self_attention(x, n_heads, params)
    x = layer_norm(add(x, attn), params["ln1_gamma"], params["ln1_beta"])
    ff = linear(relu(linear(x, params["W_ff1"], params["b_ff1"])), params["W_ff2"], params["b_ff2"])
    return layer_norm(add(x, ff), params["ln2_gamma"], params["ln2_beta"])


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# verification

def grad_check(f: Callable[[Tape, list[Node]], Node], inputs: Sequence[np.ndarray], step: float = 1e-5,
               n_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences (see :func:`grad_check_details`)."""
    rows = grad_check_details(f, inputs, step, n_coords, rng)
    return max((r[4] for r in rows), default=0.0)


KINK_OPS = ("relu", "maxpool_time")


def kink_signature(tape: Tape) -> list[np.ndarray]:
    """Active ReLU masks and max-pool winners: the piece of a piecewise-smooth graph being evaluated."""
    return [n.aux for n in tape.nodes if n.op in KINK_OPS]


def _same_piece(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_details(f: Callable[[Tape, list[Node]], Node], inputs: Sequence[np.ndarray], step: float = 1e-5,
                       n_coords: int | None = None, rng: np.random.Generator | None = None,
                       max_shrink: int = 3) -> list[tuple]:
    """Per-coordinate comparison of backprop against central differences.

    Returns ``(input index, flat coordinate, analytic, numeric, relative error, step used)`` rows.
    ``f`` builds a scalar on a fresh tape from leaves wrapping ``inputs``. With
    ``n_coords`` set, only a random subsample of about that many coordinates is probed,
    spread over all inputs in proportion to their size (at least 3 each).
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.

    A difference whose two evaluations change a ReLU mask or a max-pool winner straddles a
    kink, where the derivative does not exist; such coordinates are retried with the step cut
    tenfold, up to ``max_shrink`` times.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("grad_check inputs contain non-finite values")

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(tape, leaves)
    if out.value.size != 1:
        raise ValueError("grad_check needs a scalar function")
    tape.backward(out)
    analytic = [np.zeros_like(a) if leaf.grad is None else leaf.grad for a, leaf in zip(arrays, leaves)]
    for g in analytic:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite analytic gradient")
    base_piece = kink_signature(tape)

    def evaluate(vals) -> tuple[float, list]:
        t = Tape()
        v = float(f(t, [t.leaf(a) for a in vals]).value)
        if not math.isfinite(v):
            raise NumericError("non-finite function value during finite differencing")
        return v, kink_signature(t)

    rng = rng or np.random.default_rng(0)
    total = sum(a.size for a in arrays)
    rows = []
    for k, a in enumerate(arrays):
        if n_coords is None or total <= n_coords:
            coords = np.arange(a.size)
        else:
            want = min(a.size, max(3, int(round(n_coords * a.size / total))))
            coords = rng.choice(a.size, size=want, replace=False)
        flat = a.reshape(-1)
        for c in coords:
            orig = flat[c]
            h = step
            for attempt in range(max_shrink + 1):
                flat[c] = orig + h
                up, piece_up = evaluate(arrays)
                flat[c] = orig - h
                down, piece_down = evaluate(arrays)
                flat[c] = orig
                if (_same_piece(piece_up, base_piece) and _same_piece(piece_down, base_piece)) or attempt == max_shrink:
                    break
                h /= 10.0
            numeric = (up - down) / (2 * h)
            exact = analytic[k].reshape(-1)[c]
            err = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
            rows.append((k, int(c), float(exact), float(numeric), float(err), h))
    return rows
