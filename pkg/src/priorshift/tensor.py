"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Float64 everywhere. Graphs are define-by-run: every op immediately computes
its value and records a backward closure, and ``backward`` on a scalar loss
walks the recorded graph once in reverse topological order. Leaf gradients
accumulate into ``.grad``; callers zero them (``zero_grad``) between steps.

Broadcasting is deliberately narrow: elementwise ops accept identical shapes
or a scalar on either side, nothing else.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericsError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph recording (inference passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """A dense float64 array plus the autodiff bookkeeping for one graph node."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # Operator sugar; the module-level functions are the real implementation.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        """Backpropagate from this scalar; see module docstring for semantics."""
        backward(self)

    def zero_grad(self):
        self.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(values: np.ndarray, op: str) -> None:
    # A finite sum implies finite entries unless magnitudes are near the
    # float64 ceiling, where flagging is the right call anyway.
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(values.sum()):
            raise NumericsError(f"{op} produced non-finite values")


def _node(values: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape else np.float64(np.sum(g))


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape == b.values.shape:
        return
    if a.values.size == 1 or b.values.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.values.shape} and {b.values.shape} "
                         "are neither equal nor scalar-broadcastable")


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out_values = a.values + b.values

    def backward_fn(out):
        _accumulate(a, _reduce_to(out.grad, a.values.shape))
        _accumulate(b, _reduce_to(out.grad, b.values.shape))

    return _node(out_values, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out_values = a.values - b.values

    def backward_fn(out):
        _accumulate(a, _reduce_to(out.grad, a.values.shape))
        _accumulate(b, _reduce_to(-out.grad, b.values.shape))

    return _node(out_values, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_values = a.values * b.values

    def backward_fn(out):
        _accumulate(a, _reduce_to(out.grad * b.values, a.values.shape))
        _accumulate(b, _reduce_to(out.grad * a.values, b.values.shape))

    return _node(out_values, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out_values = a.values / b.values

    def backward_fn(out):
        _accumulate(a, _reduce_to(out.grad / b.values, a.values.shape))
        _accumulate(b, _reduce_to(-out.grad * a.values / (b.values ** 2), b.values.shape))

    return _node(out_values, (a, b), backward_fn, "div")


def add_bias(a, b) -> Tensor:
    """[B, d] plus a [d] bias row; the bias gradient sums over the batch.

    Kept separate from ``add`` so elementwise ops stay strictly same-shape
    or scalar.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.shape != (a.values.shape[1],):
        raise DimensionError(f"add_bias expects [B, d] + [d], got "
                             f"{a.values.shape} + {b.values.shape}")
    out_values = a.values + b.values

    def backward_fn(out):
        _accumulate(a, out.grad)
        _accumulate(b, out.grad.sum(axis=0))

    return _node(out_values, (a, b), backward_fn, "add_bias")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(out):
        _accumulate(a, -out.grad)

    return _node(-a.values, (a,), backward_fn, "neg")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.values)

    def backward_fn(out):
        _accumulate(a, out.grad * (1.0 - t * t))

    return _node(t, (a,), backward_fn, "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Split by sign so exp never overflows.
    x = a.values
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_fn(out):
        _accumulate(a, out.grad * s * (1.0 - s))

    return _node(s, (a,), backward_fn, "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0

    def backward_fn(out):
        _accumulate(a, out.grad * mask)

    return _node(np.where(mask, a.values, 0.0), (a,), backward_fn, "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.values)

    def backward_fn(out):
        _accumulate(a, out.grad * e)

    return _node(e, (a,), backward_fn, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(out):
        _accumulate(a, out.grad / a.values)

    return _node(np.log(a.values), (a,), backward_fn, "log")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "maximum")
    take_a = a.values >= b.values

    def backward_fn(out):
        _accumulate(a, _reduce_to(out.grad * take_a, a.values.shape))
        _accumulate(b, _reduce_to(out.grad * ~take_a, b.values.shape))

    return _node(np.where(take_a, a.values, b.values), (a, b), backward_fn, "maximum")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.values.ndim != 2 or a.values.ndim not in (1, 2):
        raise DimensionError(f"matmul expects (m,k)@(k,n) or (k,)@(k,n), "
                             f"got {a.values.shape} @ {b.values.shape}")
    if a.values.shape[-1] != b.values.shape[0]:
        raise DimensionError(f"matmul inner extents differ: "
                             f"{a.values.shape} @ {b.values.shape}")
    out_values = a.values @ b.values

    def backward_fn(out):
        g = out.grad
        if a.values.ndim == 1:
            _accumulate(a, b.values @ g)
            _accumulate(b, np.outer(a.values, g))
        else:
            _accumulate(a, g @ b.values.T)
            _accumulate(b, a.values.T @ g)

    return _node(out_values, (a, b), backward_fn, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    out_values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, out.grad[tuple(idx)])

    return _node(out_values, tensors, backward_fn, "concat")


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Columns [start:stop) of a 2-D tensor."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise DimensionError(f"slice_cols expects a 2-D tensor, got {a.values.shape}")

    def backward_fn(out):
        g = np.zeros_like(a.values)
        g[:, start:stop] = out.grad
        _accumulate(a, g)

    return _node(a.values[:, start:stop], (a,), backward_fn, "slice_cols")


def take_rows(a, indices) -> Tensor:
    """Rows of a 2-D tensor selected by an integer index array."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D tensor, got {a.values.shape}")
    indices = np.asarray(indices, dtype=np.int64)
    # Strictly increasing indices cannot repeat, so the backward scatter can
    # use plain fancy assignment instead of the much slower np.add.at.
    distinct = indices.size < 2 or bool(np.all(np.diff(indices) > 0))

    def backward_fn(out):
        g = np.zeros_like(a.values)
        if distinct:
            g[indices] = out.grad
        else:
            np.add.at(g, indices, out.grad)
        _accumulate(a, g)

    return _node(a.values[indices], (a,), backward_fn, "take_rows")


def tsum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)

    def backward_fn(out):
        _accumulate(a, np.full_like(a.values, out.grad))

    return _node(np.float64(np.sum(a.values)), (a,), backward_fn, "tsum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size

    def backward_fn(out):
        _accumulate(a, np.full_like(a.values, out.grad / n))

    return _node(np.float64(np.mean(a.values)), (a,), backward_fn, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows sum to one."""
    a = _as_tensor(a)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(out):
        g = out.grad
        _accumulate(a, (g - np.sum(g * s, axis=axis, keepdims=True)) * s)

    return _node(s, (a,), backward_fn, "softmax")


def max_pool_time(a) -> Tensor:
    """Max over the time axis of a [T, d] tensor, returning [d]."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise DimensionError(f"max_pool_time expects [T, d], got {a.values.shape}")
    winners = np.argmax(a.values, axis=0)

    def backward_fn(out):
        g = np.zeros_like(a.values)
        g[winners, np.arange(a.values.shape[1])] = out.grad
        _accumulate(a, g)

    return _node(a.values[winners, np.arange(a.values.shape[1])], (a,), backward_fn,
                 "max_pool_time")


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``; output shape ids.shape + (d,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.values.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")

    def backward_fn(out):
        if table.requires_grad:
            g = np.zeros_like(table.values)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.values.shape[1]))
            _accumulate(table, g)

    return _node(table.values[ids], (table,), backward_fn, "embedding_lookup")


def dropout(a, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p); identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout with training=True needs an rng")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(a.values.shape) >= p) * scale

    def backward_fn(out):
        _accumulate(a, out.grad * mask)

    return _node(a.values * mask, (a,), backward_fn, "dropout")


def char_conv_max(table, ids, filters, bias, width: int) -> Tensor:
    """Width-``w`` 1-D convolution over character embeddings, max-pooled over time.

    ``ids`` is an [N, L] int array of character ids per word (L >= width),
    ``filters`` is [(width * d_char), maps] and ``bias`` is [maps]. Returns
    [N, maps]: for each word the max over all window positions of
    window @ filters + bias.
    """
    table, filters, bias = _as_tensor(table), _as_tensor(filters), _as_tensor(bias)
    ids = np.asarray(ids, dtype=np.int64)
    n, length = ids.shape
    d_char = table.values.shape[1]
    if length < width:
        raise DimensionError(f"char sequence length {length} < filter width {width}")
    if filters.values.shape[0] != width * d_char:
        raise DimensionError(f"filters expect first extent {width * d_char}, "
                             f"got {filters.values.shape[0]}")
    emb = table.values[ids]                                   # [N, L, d]
    n_pos = length - width + 1
    windows = np.stack([emb[:, i:i + width, :].reshape(n, width * d_char)
                        for i in range(n_pos)], axis=1)       # [N, P, w*d]
    scores = windows @ filters.values + bias.values           # [N, P, m]
    winners = np.argmax(scores, axis=1)                       # [N, m]
    out_values = np.take_along_axis(scores, winners[:, None, :], axis=1)[:, 0, :]

    def backward_fn(out):
        g = out.grad                                          # [N, m]
        g_scores = np.zeros_like(scores)
        np.put_along_axis(g_scores, winners[:, None, :], g[:, None, :], axis=1)
        _accumulate(bias, g_scores.sum(axis=(0, 1)))
        _accumulate(filters, np.einsum("npk,npm->km", windows, g_scores))
        if table.requires_grad:
            g_windows = g_scores @ filters.values.T           # [N, P, w*d]
            g_emb = np.zeros_like(emb)
            for i in range(n_pos):
                g_emb[:, i:i + width, :] += g_windows[:, i, :].reshape(n, width, d_char)
            g_table = np.zeros_like(table.values)
            np.add.at(g_table, ids.reshape(-1), g_emb.reshape(-1, d_char))
            _accumulate(table, g_table)

    return _node(out_values, (table, filters, bias), backward_fn, "char_conv_max")


def lstm_cell(x, h, c, wx, wh, b) -> Tensor:
    """One LSTM step, fused: returns [B, 2*hidden] holding [h' | c'].

    Gate pre-activations are x @ wx + h @ wh + b with the gate order
    (input, forget, output, cell), putting the three sigmoids in one
    contiguous block. Fusing the cell keeps the graph small; recurrences
    chain thousands of these per batch.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    wx, wh, b = _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    hidden = h.values.shape[1]
    if wx.values.shape[1] != 4 * hidden or b.values.shape != (4 * hidden,):
        raise DimensionError(f"lstm_cell weight extents disagree with hidden={hidden}")
    a = x.values @ wx.values + h.values @ wh.values + b.values
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-a[:, :3 * hidden]))
    gi = sig[:, :hidden]
    gf = sig[:, hidden:2 * hidden]
    go = sig[:, 2 * hidden:]
    gg = np.tanh(a[:, 3 * hidden:])
    c2 = gf * c.values + gi * gg
    tc = np.tanh(c2)
    h2 = go * tc

    def backward_fn(out):
        grad_h = out.grad[:, :hidden]
        grad_c = out.grad[:, hidden:] + grad_h * go * (1.0 - tc * tc)
        d_gates = np.empty_like(a)
        d_gates[:, :hidden] = grad_c * gg * gi * (1.0 - gi)
        d_gates[:, hidden:2 * hidden] = grad_c * c.values * gf * (1.0 - gf)
        d_gates[:, 2 * hidden:3 * hidden] = grad_h * tc * go * (1.0 - go)
        d_gates[:, 3 * hidden:] = grad_c * gi * (1.0 - gg * gg)
        _accumulate(x, d_gates @ wx.values.T)
        _accumulate(h, d_gates @ wh.values.T)
        _accumulate(c, grad_c * gf)
        _accumulate(wx, x.values.T @ d_gates)
        _accumulate(wh, h.values.T @ d_gates)
        _accumulate(b, d_gates.sum(axis=0))

    return _node(np.concatenate([h2, c2], axis=1), (x, h, c, wx, wh, b),
                 backward_fn, "lstm_cell")


def lstm_scan(x, wx, wh, b, t_len, reverse=False) -> Tensor:
    """Full one-direction LSTM pass over a time-major stack of steps.

    ``x`` is [t_len * B, d_in] with rows t*B..t*B+B-1 holding step t; the
    result is [t_len * B, hidden] of hidden states in the same layout.
    Initial states are zero. Step arithmetic follows lstm_cell (gate order
    input, forget, output, cell; sigmoids in one block), so a scan is
    interchangeable with a chain of cells up to float rounding in the
    batched input projection; it collapses the whole recurrence into a
    single graph node.
    """
    x, wx, wh, b = _as_tensor(x), _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    if x.values.ndim != 2:
        raise DimensionError(f"lstm_scan expects [T*B, d] input, got {x.values.shape}")
    rows, d_in = x.values.shape
    if t_len <= 0 or rows % t_len:
        raise DimensionError(f"lstm_scan: {rows} rows do not split into {t_len} steps")
    hidden = wh.values.shape[0]
    if wx.values.shape != (d_in, 4 * hidden) or b.values.shape != (4 * hidden,):
        raise DimensionError(f"lstm_scan weight extents disagree with hidden={hidden}")
    batch = rows // t_len
    # The input projection has no recurrence, so it runs as one matmul over
    # every step at once; only the hidden-to-hidden product stays per step.
    xw = (x.values @ wx.values).reshape(t_len, batch, 4 * hidden)
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    # Saved activations are reference lists, not copies: every loop iteration
    # rebinds its arrays, so keeping the old objects is safe and free.
    sig_all: list = [None] * t_len
    gg_all: list = [None] * t_len
    cp_all: list = [None] * t_len
    tc_all: list = [None] * t_len
    out = np.empty((t_len, batch, hidden))
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    for t in order:
        a = xw[t] + h @ wh.values + b.values
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-a[:, :3 * hidden]))
        gg = np.tanh(a[:, 3 * hidden:])
        cp_all[t] = c
        c = sig[:, hidden:2 * hidden] * c + sig[:, :hidden] * gg
        tc = np.tanh(c)
        h = sig[:, 2 * hidden:] * tc
        sig_all[t], gg_all[t], tc_all[t], out[t] = sig, gg, tc, h

    def backward_fn(node):
        g = node.grad.reshape(t_len, batch, hidden)
        d_gates = np.empty((t_len, batch, 4 * hidden))
        dh_next = np.zeros((batch, hidden))
        dc_next = np.zeros((batch, hidden))
        for t in (range(t_len) if reverse else range(t_len - 1, -1, -1)):
            sig, gg, tc = sig_all[t], gg_all[t], tc_all[t]
            gi, gf, go = sig[:, :hidden], sig[:, hidden:2 * hidden], sig[:, 2 * hidden:]
            grad_h = g[t] + dh_next
            grad_c = dc_next + grad_h * go * (1.0 - tc * tc)
            dg = d_gates[t]
            dg[:, :hidden] = grad_c * gg * gi * (1.0 - gi)
            dg[:, hidden:2 * hidden] = grad_c * cp_all[t] * gf * (1.0 - gf)
            dg[:, 2 * hidden:3 * hidden] = grad_h * tc * go * (1.0 - go)
            dg[:, 3 * hidden:] = grad_c * gi * (1.0 - gg * gg)
            dh_next = dg @ wh.values.T
            dc_next = grad_c * gf
        dg_flat = d_gates.reshape(rows, 4 * hidden)
        if x.requires_grad:
            _accumulate(x, dg_flat @ wx.values.T)
        # h_prev per step is the scan output shifted one step along the scan
        # direction, zero at the first consumed step.
        h_prev = np.zeros_like(out)
        if reverse:
            h_prev[:-1] = out[1:]
        else:
            h_prev[1:] = out[:-1]
        _accumulate(wx, x.values.T @ dg_flat)
        _accumulate(wh, h_prev.reshape(rows, hidden).T @ dg_flat)
        _accumulate(b, dg_flat.sum(axis=0))

    return _node(out.reshape(rows, hidden), (x, wx, wh, b), backward_fn, "lstm_scan")


def bilstm_scan(x, wx_f, wh_f, b_f, wx_b, wh_b, b_b, t_len) -> Tensor:
    """Both LSTM directions over one time-major stack, in a single pass.

    ``x`` is [t_len * B, d_in] laid out exactly as for lstm_scan; the result
    is [t_len * B, 2 * hidden] with rows [h_fwd | h_bwd] per step. The two
    recurrences are independent, so each loop iteration advances both at
    once (forward over step k, backward over step t_len-1-k) through one
    direction-stacked matmul instead of two scalar ones; at these widths the
    call count, not the flop count, is what the loop pays for. Matches a
    pair of one-direction scans up to float rounding.
    """
    x = _as_tensor(x)
    weights = [_as_tensor(w) for w in (wx_f, wh_f, b_f, wx_b, wh_b, b_b)]
    wx_f, wh_f, b_f, wx_b, wh_b, b_b = weights
    if x.values.ndim != 2:
        raise DimensionError(f"bilstm_scan expects [T*B, d] input, got {x.values.shape}")
    rows, d_in = x.values.shape
    if t_len <= 0 or rows % t_len:
        raise DimensionError(f"bilstm_scan: {rows} rows do not split into {t_len} steps")
    hidden = wh_f.values.shape[0]
    for wx, wh, b in ((wx_f, wh_f, b_f), (wx_b, wh_b, b_b)):
        if wh.values.shape != (hidden, 4 * hidden) or \
                wx.values.shape != (d_in, 4 * hidden) or \
                b.values.shape != (4 * hidden,):
            raise DimensionError("bilstm_scan weight extents disagree "
                                 f"with hidden={hidden}, d_in={d_in}")
    batch = rows // t_len
    wxs = np.stack([wx_f.values, wx_b.values])
    whs = np.stack([wh_f.values, wh_b.values])
    bs = np.stack([b_f.values, b_b.values])
    # Hoisted input projection with the bias folded in; the backward
    # direction's steps are flipped here so index k always means "the k-th
    # step each chain consumes".
    xw = np.matmul(x.values, wxs) + bs[:, None, :]
    xw = xw.reshape(2, t_len, batch, 4 * hidden)
    xw = np.stack([xw[0], xw[1, ::-1]], axis=1)
    # Reference lists, not slab copies; each iteration rebinds its arrays.
    sig_all: list = [None] * t_len
    gg_all: list = [None] * t_len
    cp_all: list = [None] * t_len
    tc_all: list = [None] * t_len
    out = np.empty((t_len, 2, batch, hidden))
    h = np.zeros((2, batch, hidden))
    c = np.zeros((2, batch, hidden))
    for k in range(t_len):
        a = xw[k] + np.matmul(h, whs)
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-a[:, :, :3 * hidden]))
        gg = np.tanh(a[:, :, 3 * hidden:])
        cp_all[k] = c
        c = sig[:, :, hidden:2 * hidden] * c + sig[:, :, :hidden] * gg
        tc = np.tanh(c)
        h = sig[:, :, 2 * hidden:] * tc
        sig_all[k], gg_all[k], tc_all[k], out[k] = sig, gg, tc, h
    joined = np.concatenate([out[:, 0], out[::-1, 1]], axis=2).reshape(rows, 2 * hidden)

    def backward_fn(node):
        g = node.grad.reshape(t_len, batch, 2 * hidden)
        g_loop = np.stack([g[:, :, :hidden], g[::-1, :, hidden:]], axis=1)
        whs_t = whs.transpose(0, 2, 1)
        d_gates = np.empty((t_len, 2, batch, 4 * hidden))
        dh_next = np.zeros((2, batch, hidden))
        dc_next = np.zeros((2, batch, hidden))
        for k in range(t_len - 1, -1, -1):
            sig, gg, tc = sig_all[k], gg_all[k], tc_all[k]
            gi = sig[:, :, :hidden]
            gf = sig[:, :, hidden:2 * hidden]
            go = sig[:, :, 2 * hidden:]
            grad_h = g_loop[k] + dh_next
            grad_c = dc_next + grad_h * go * (1.0 - tc * tc)
            dg = d_gates[k]
            dg[:, :, :hidden] = grad_c * gg * gi * (1.0 - gi)
            dg[:, :, hidden:2 * hidden] = grad_c * cp_all[k] * gf * (1.0 - gf)
            dg[:, :, 2 * hidden:3 * hidden] = grad_h * tc * go * (1.0 - go)
            dg[:, :, 3 * hidden:] = grad_c * gi * (1.0 - gg * gg)
            dh_next = np.matmul(dg, whs_t)
            dc_next = grad_c * gf
        # Per-direction flats in loop order; the forward direction's loop
        # order is already step order, the backward one flips back when the
        # input gradient needs step-ordered rows.
        dg_dir = d_gates.transpose(1, 0, 2, 3)
        dg_step = np.stack([dg_dir[0], dg_dir[1, ::-1]])
        dg_step_flat = dg_step.reshape(2, rows, 4 * hidden)
        if x.requires_grad:
            _accumulate(x, np.matmul(dg_step_flat, wxs.transpose(0, 2, 1)).sum(axis=0))
        h_prev = np.zeros_like(out)
        h_prev[1:] = out[:-1]
        h_prev_flat = h_prev.transpose(1, 0, 2, 3).reshape(2, rows, hidden)
        dg_flat = dg_dir.reshape(2, rows, 4 * hidden)
        dwx = np.matmul(x.values.T[None], dg_step_flat)
        dwh = np.matmul(h_prev_flat.transpose(0, 2, 1), dg_flat)
        db = dg_flat.sum(axis=1)
        for i, (wx, wh, b) in enumerate(((wx_f, wh_f, b_f), (wx_b, wh_b, b_b))):
            _accumulate(wx, dwx[i])
            _accumulate(wh, dwh[i])
            _accumulate(b, db[i])

    return _node(joined, (x, *weights), backward_fn, "bilstm_scan")


def weighted_cross_entropy_logits(logits, labels, weights) -> Tensor:
    """Class-weighted cross entropy straight from logits.

    loss = -(1/N) * sum_i w[y_i] * log softmax(logits_i)[y_i], computed via
    log-sum-exp so large logits never overflow. The gradient w.r.t. logits is
    w[y] * (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.values.ndim != 2:
        raise DimensionError(f"expected [N, K] logits, got {logits.values.shape}")
    n, k = logits.values.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    z = logits.values
    z_max = z.max(axis=1, keepdims=True)
    log_z = z_max[:, 0] + np.log(np.sum(np.exp(z - z_max), axis=1))
    w_y = weights[labels]
    loss = np.sum(w_y * (log_z - z[np.arange(n), labels])) / n

    def backward_fn(out):
        p = np.exp(z - z_max)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, out.grad * w_y[:, None] * p / n)

    return _node(np.float64(loss), (logits,), backward_fn, "weighted_cross_entropy")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS; graphs can be thousands of nodes deep."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar. A graph may be walked once; a second call on
    the same root raises GraphError (re-run the forward pass instead).
    """
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")
    loss._consumed = True
    loss.grad = np.ones_like(loss.values)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None:
            node._backward(node)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Parameter checkpoint format
# ---------------------------------------------------------------------------

PARAMS_FORMAT = "priorshift-params"
PARAMS_VERSION = 1


def params_to_dict(params: dict[str, Tensor]) -> dict:
    """Checkpoint payload: flat map of name -> shape + row-major float64 values.

    json round-trips Python floats through repr, so 64-bit values survive
    save/load bit-exact.
    """
    return {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "params": {
            name: {"shape": list(t.values.shape),
                   "values": t.values.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }


def params_from_dict(payload: dict) -> dict[str, np.ndarray]:
    if payload.get("format") != PARAMS_FORMAT:
        raise ValueError(f"not a {PARAMS_FORMAT} payload")
    if payload.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    out = {}
    for name, entry in payload["params"].items():
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        out[name] = arr
    return out


def save_params(params: dict[str, Tensor], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
