"""Dense float64 tensors with recorded reverse-mode differentiation.

Only the handful of operations the encoder, projection head and losses need
are provided.  Every op checks its output for NaN/Inf and, when any input
requires a gradient, records a :class:`TapeNode` holding the backward rule.

Broadcasting is limited to row-broadcast: the second operand of ``add``,
``sub`` and ``mul`` may be a ``(1, d)`` row applied to every row of an
``(n, d)`` operand.  Everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "botscl_grad_enabled", default=True
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording anything on the tape."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@dataclass
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite output from {op}")
    return out


def _result(out: np.ndarray, op: str, inputs: tuple[Tensor, ...], bw) -> Tensor:
    _finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.node = None
    track = _grad_enabled.get() and any(
        i.requires_grad or i.node is not None for i in inputs
    )
    t.requires_grad = False
    if track:
        t.node = TapeNode(op, inputs, bw)
    return t


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen and _needs(inp):
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + 1.0
            return
        raise BackwardError("nothing recorded: tape is empty or already consumed")
    if loss.node.backward is None:
        raise BackwardError("backward called twice on the same tape")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if t.node is None:
            if t.requires_grad and g is not None:
                t.grad += g
            continue
        if g is None:
            t.node.backward = None
            continue
        fn = t.node.backward
        if fn is None:
            raise BackwardError("backward called twice on the same tape")
        in_grads = fn(g)
        t.node.backward = None
        for inp, gi in zip(t.node.inputs, in_grads):
            if gi is None or not _needs(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi


# ---------------------------------------------------------------- helpers


class SegmentIndex:
    """Integer ids (one per row) mapped to ``n`` segments, with a cached
    sparse scatter matrix so segment sums and gather-backward are one
    sparse product."""

    def __init__(self, ids, n: int):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"segment id out of range [0, {n})")
        self.ids = ids
        self.n = int(n)
        self.counts = np.bincount(ids, minlength=n).astype(np.float64)
        self._sum = None

    @property
    def sum_matrix(self) -> sp.csr_matrix:
        if self._sum is None:
            m = self.ids.size
            self._sum = sp.csr_matrix(
                (np.ones(m), (self.ids, np.arange(m))), shape=(self.n, m)
            )
        return self._sum

    def scatter_sum(self, x: np.ndarray) -> np.ndarray:
        if self.ids.size == 0:
            return np.zeros((self.n,) + x.shape[1:])
        return np.asarray(self.sum_matrix @ x)


def as_index(ids, n: int) -> SegmentIndex:
    return ids if isinstance(ids, SegmentIndex) else SegmentIndex(ids, n)


def _check_rowcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (1, a.shape[1]):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unrow(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if _needs(a) else None, A.T @ g if _needs(b) else None)

    return _result(A @ B, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose needs a matrix")
    return _result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_rowcast(a, b, "add")
    sb = b.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, _unrow(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_rowcast(a, b, "sub")
    sb = b.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -_unrow(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (``b`` may be a broadcast row)."""
    _check_rowcast(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        return (
            g * B if _needs(a) else None,
            _unrow(g * A, B.shape) if _needs(b) else None,
        )

    return _result(A * B, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    # arithmetic on the bool mask avoids a branchy select over the array
    d = slope + (1.0 - slope) * (a.data > 0)
    return _result(a.data * d, "leaky_relu", (a,), lambda g: (g * d,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _result(out, "log", (a,), lambda g: (g / x,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=True)
    return _result(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    k = a.data.size if axis is None else shape[axis]
    out = a.data.mean(axis=axis, keepdims=True)
    return _result(
        out, "mean", (a,), lambda g: (np.broadcast_to(g / k, shape).copy(),)
    )


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of nothing")
    rows = {p.shape[:-1] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat: leading shapes differ {rows}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=-1), "concat", parts, bw)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop].copy(), "columns", (a,), bw)


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if int(np.sum(sizes)) != a.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover width {a.shape[-1]}")
    out, start = [], 0
    for s in sizes:
        out.append(columns(a, start, start + s))
        start += s
    return out


def gather_rows(a: Tensor, index) -> Tensor:
    idx = as_index(index, a.shape[0])
    return _result(a.data[idx.ids], "gather_rows", (a,), lambda g: (idx.scatter_sum(g),))


def segment_sum(a: Tensor, segments, n: int | None = None) -> Tensor:
    idx = segments if isinstance(segments, SegmentIndex) else SegmentIndex(segments, n)
    if idx.ids.size != a.shape[0]:
        raise ShapeError("segment_sum: one segment id per row required")
    ids = idx.ids
    return _result(idx.scatter_sum(a.data), "segment_sum", (a,), lambda g: (g[ids],))


def segment_mean(a: Tensor, segments, n: int | None = None) -> Tensor:
    """Mean of the rows sharing a segment id; empty segments give zero rows."""
    idx = segments if isinstance(segments, SegmentIndex) else SegmentIndex(segments, n)
    if idx.ids.size != a.shape[0]:
        raise ShapeError("segment_mean: one segment id per row required")
    inv = np.divide(1.0, idx.counts, out=np.zeros_like(idx.counts), where=idx.counts > 0)
    inv = inv[:, None]
    ids = idx.ids
    out = idx.scatter_sum(a.data) * inv
    return _result(out, "segment_mean", (a,), lambda g: ((g * inv)[ids],))


def segment_softmax(scores: Tensor, segments, n: int | None = None) -> Tensor:
    """Softmax of an (E, 1) score column within each segment."""
    idx = segments if isinstance(segments, SegmentIndex) else SegmentIndex(segments, n)
    if scores.data.ndim != 2 or scores.shape[1] != 1 or scores.shape[0] != idx.ids.size:
        raise ShapeError("segment_softmax needs an (E, 1) column with E segment ids")
    s = scores.data[:, 0]
    ids = idx.ids
    seg_max = np.full(idx.n, -np.inf)
    np.maximum.at(seg_max, ids, s)
    e = np.exp(s - seg_max[ids])
    denom = np.bincount(ids, weights=e, minlength=idx.n)
    w = (e / denom[ids])[:, None]

    def bw(g):
        dot = np.bincount(ids, weights=(w * g)[:, 0], minlength=idx.n)
        return (w * (g - dot[ids][:, None]),)

    return _result(w, "segment_softmax", (scores,), bw)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _result(y, "l2_normalize_rows", (a,), bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosine similarities between the rows of ``a`` and ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: widths {a.shape[1]} vs {b.shape[1]}")
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def dropout(a: Tensor, mask: np.ndarray, p: float) -> Tensor:
    """Inverted dropout with an externally sampled keep-mask."""
    mask = np.asarray(mask)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} vs input {a.shape}")
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    m = mask.astype(np.float64) / (1.0 - p)
    return _result(a.data * m, "dropout", (a,), lambda g: (g * m,))


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, "softmax_rows", (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(out, "log_softmax_rows", (a,), bw)


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise each row to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, "layer_norm_rows", (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape).copy()
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def group_attention(q: Tensor, k: Tensor, v: Tensor, group: int) -> Tensor:
    """Scaled dot-product attention inside consecutive blocks of ``group`` rows.

    Rows ``[b*group, (b+1)*group)`` attend only to each other, which is how the
    feature-type tokens of one node are laid out."""
    if not (q.shape == k.shape == v.shape) or q.shape[0] % group:
        raise ShapeError(f"group_attention: shapes {q.shape}, {k.shape}, {v.shape}, group {group}")
    m, d = q.shape
    n = m // group
    Q = q.data.reshape(n, group, d)
    K = k.data.reshape(n, group, d)
    V = v.data.reshape(n, group, d)
    c = 1.0 / np.sqrt(d)
    s = np.matmul(Q, K.transpose(0, 2, 1)) * c
    s -= s.max(axis=2, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=2, keepdims=True)
    out = np.matmul(w, V).reshape(m, d)

    def bw(g):
        G = g.reshape(n, group, d)
        dV = np.matmul(w.transpose(0, 2, 1), G)
        dw = np.matmul(G, V.transpose(0, 2, 1))
        ds = w * (dw - (dw * w).sum(axis=2, keepdims=True)) * c
        dQ = np.matmul(ds, K)
        dK = np.matmul(ds.transpose(0, 2, 1), Q)
        return dQ.reshape(m, d), dK.reshape(m, d), dV.reshape(m, d)

    return _result(out, "group_attention", (q, k, v), bw)


_NO_MASK = np.zeros((0, 0), dtype=bool)


def channel_attention_mean(
    q: Tensor,
    k: Tensor,
    h: Tensor,
    targets,
    neighbours,
    mask: np.ndarray | None = None,
    p: float = 0.0,
) -> Tensor:
    """Fused ``segment_mean(dropout(tanh((q_t*k_n + q_n*k_t)/2)) * h_n, t)``.

    The tanh values are one vectorised pass; the scatter in each direction
    is a single loop over the edges.  Equals the composite op chain to
    rounding."""
    from . import _kernels

    n, d = h.shape
    if q.shape != (n, d) or k.shape != (n, d):
        raise ShapeError("channel_attention_mean: q, k, h must share shape")
    tgt = as_index(targets, n)
    nbr = as_index(neighbours, n)
    if tgt.ids.size != nbr.ids.size:
        raise ShapeError("one neighbour per target entry required")
    inv = np.divide(1.0, tgt.counts, out=np.zeros_like(tgt.counts), where=tgt.counts > 0)
    if mask is None:
        m, keep = _NO_MASK, 1.0
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (tgt.ids.size, d):
            raise ShapeError(f"dropout mask {m.shape} vs ({tgt.ids.size}, {d})")
        keep = 1.0 / (1.0 - p)
    Q, K, H = q.data, k.data, h.data
    ti, ni = tgt.ids, nbr.ids
    t = np.empty((ti.size, d))
    _kernels.attn_logits(Q, K, ti, ni, t)
    np.tanh(t, out=t)
    out = np.zeros((n, d))
    _kernels.attn_mean_forward(t, H, ti, ni, inv, m, keep, out)

    def bw(g):
        dq, dk, dh = np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d))
        _kernels.attn_mean_backward(
            t, Q, K, H, ti, ni, inv, m, keep, np.ascontiguousarray(g), dq, dk, dh
        )
        return dq, dk, dh

    return _result(out, "channel_attention_mean", (q, k, h), bw)


# ---------------------------------------------------------------- checking


def gradient_pair(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5
) -> tuple[np.ndarray, np.ndarray]:
    """Tape gradients and central-difference gradients of a scalar ``fn``,
    flattened and concatenated over the inputs that require grad."""
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise BackwardError("grad_check needs a scalar-valued function")
    if out.node is not None or out.requires_grad:
        backward(out)
    analytic, numeric = [], []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic.append(t.grad.reshape(-1).copy())
        flat = t.data.reshape(-1)
        est = np.zeros_like(flat)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = fn(*inputs).item()
                flat[k] = orig - step
                fm = fn(*inputs).item()
                flat[k] = orig
                est[k] = (fp - fm) / (2.0 * step)
        numeric.append(est)
    if not analytic:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(analytic), np.concatenate(numeric)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    Relative error per entry is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    a, b = gradient_pair(fn, inputs, step)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
