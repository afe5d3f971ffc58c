"""Dense float64 matrix kernel with reverse-mode gradients.

Every value is a 2-D row-major float64 array wrapped in a :class:`Tensor`
node.  Operations validate shapes, compute their forward value eagerly and
register a vector-Jacobian closure, so ``Tensor.backward`` can push gradients
to every input of the graph.  Analytic gradients are certified against
central finite differences via :func:`finite_difference_check`.

The kernel is deliberately small: it supports exactly the operations the
encoder, tree regressor and losses need, nothing more.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# deterministic index-plan builders keyed by segment-length tuples
_cache = lru_cache(maxsize=4096)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_matrix(value) -> np.ndarray:
    if type(value) is np.ndarray and value.ndim == 2 and value.dtype == np.float64:
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Tensor:
    """A rows x cols float64 matrix node in the computation graph.

    ``backward`` accumulates into ``grad`` (initialising it on first use);
    call each graph's backward at most once.  Plain tensors are leaves or
    intermediates; learnable weights use :class:`Parameter`, whose ``grad``
    persists across graphs until ``zero_grad``.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = _as_matrix(value)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def backward(self, seed=None) -> None:
        """Propagate vector-Jacobian products from this node to all inputs."""
        if seed is None:
            seed = np.ones_like(self.value)
        seed = np.asarray(seed, dtype=np.float64).reshape(self.shape)

        # the toposort list keeps every node alive, so id() keys are stable
        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Parameter(Tensor):
    """Learnable matrix whose gradient accumulates across graphs."""

    def __init__(self, value):
        super().__init__(np.array(value, dtype=np.float64))

    def zero_grad(self) -> None:
        self.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def constant(value) -> Tensor:
    return Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a (1 x cols) bias, as a single graph node."""
    if x.cols != w.rows:
        raise DimensionError(f"affine shape mismatch: {x.shape} x {w.shape}")
    if b.shape != (1, w.cols):
        raise DimensionError(f"affine bias shape {b.shape}, expected (1, {w.cols})")
    xv, wv = x.value, w.value

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

    return Tensor(xv @ wv + b.value, (x, w, b), vjp)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by index (repeats allowed); the gradient scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise DimensionError(f"row index out of range for {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(x.value[idx], (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (1 x cols) bias broadcast over rows."""
    if a.shape == b.shape:
        return Tensor(a.value + b.value, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return Tensor(
            a.value + b.value,
            (a, b),
            lambda g: (g, g.sum(axis=0, keepdims=True)),
        )
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor(x.value * c, (x,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b), lambda g: (g * bv, g * av))


def one_minus(x: Tensor) -> Tensor:
    return Tensor(1.0 - x.value, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax_row(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    v = x.value
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    return Tensor(x.value.T.copy(), (x,), lambda g: (g.T,))


def concat_rows(*xs: Tensor) -> Tensor:
    cols = xs[0].cols
    for x in xs[1:]:
        if x.cols != cols:
            raise DimensionError(
                f"concat_rows column mismatch: {xs[0].shape} vs {x.shape}"
            )
    splits = np.cumsum([x.rows for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return Tensor(np.concatenate([x.value for x in xs], axis=0), xs, vjp)


def concat_cols(*xs: Tensor) -> Tensor:
    rows = xs[0].rows
    for x in xs[1:]:
        if x.rows != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {xs[0].shape} vs {x.shape}"
            )
    splits = np.cumsum([x.cols for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor(np.concatenate([x.value for x in xs], axis=1), xs, vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.cols):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor(x.value[:, start:stop].copy(), (x,), vjp)


def permute_cols(x: Tensor, perm) -> Tensor:
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (x.cols,):
        raise DimensionError(f"permutation of length {perm.size} on {x.shape}")

    def vjp(g):
        full = np.empty(x.shape)
        full[:, perm] = g
        return (full,)

    return Tensor(x.value[:, perm].copy(), (x,), vjp)


def mean_pool_rows(x: Tensor) -> Tensor:
    """Column-wise arithmetic mean, returned as a single row."""
    if x.rows < 1:
        raise DimensionError("mean_pool_rows on empty input")
    n = x.rows
    out = x.value.mean(axis=0, keepdims=True)
    return Tensor(out, (x,), lambda g: (np.repeat(g / n, n, axis=0),))


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise maximum (first-max tie break), returned as a single row."""
    if x.rows < 1:
        raise DimensionError("max_pool_rows on empty input")
    idx = x.value.argmax(axis=0)
    out = x.value[idx, np.arange(x.cols)].reshape(1, -1)

    def vjp(g):
        full = np.zeros(x.shape)
        full[idx, np.arange(x.cols)] = g[0]
        return (full,)

    return Tensor(out, (x,), vjp)


def segment_mean(x: Tensor, lengths) -> Tensor:
    """Mean over consecutive row segments; output has one row per segment."""
    lengths = np.asarray(lengths, dtype=np.intp)
    if lengths.min(initial=1) < 1 or lengths.sum() != x.rows:
        raise DimensionError(
            f"segment lengths {lengths.tolist()} do not tile {x.rows} rows"
        )
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    sums = np.add.reduceat(x.value, starts, axis=0)
    out = sums / lengths[:, None]

    def vjp(g):
        return (np.repeat(g / lengths[:, None], lengths, axis=0),)

    return Tensor(out, (x,), vjp)


def sum_cols(x: Tensor) -> Tensor:
    """Row sums as an (n x 1) column."""
    out = x.value.sum(axis=1, keepdims=True)
    return Tensor(out, (x,), lambda g: (np.repeat(g, x.cols, axis=1),))


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.value.sum()]])
    return Tensor(out, (x,), lambda g: (np.full(x.shape, g[0, 0]),))


@_cache
def _conv_window_index(lengths: tuple[int, ...], kernel: int) -> np.ndarray:
    """(rows x kernel) gather index; out-of-segment slots hit the zero row."""
    pad = (kernel - 1) // 2
    total = sum(lengths)
    idx = np.full((total, kernel), total, dtype=np.intp)
    start = 0
    for length in lengths:
        local = np.arange(length)[:, None] + np.arange(kernel)[None, :] - pad
        valid = (local >= 0) & (local < length)
        block = np.where(valid, local + start, total)
        idx[start:start + length] = block
        start += length
    return idx


def conv1d(
    x: Tensor, filters: Tensor, bias: Tensor, kernel: int, lengths=None
) -> Tensor:
    """Same-length 1-D convolution over the row sequence of ``x``.

    ``filters`` is (kernel * in_cols) x out_cols; zero padding of
    (kernel - 1) / 2 rows applies at sequence boundaries, so output length
    equals input length.  The kernel width must be odd.  With ``lengths``
    the rows are treated as that many independent consecutive sequences
    (padding applies per segment, never leaking across boundaries).
    """
    if kernel < 1 or kernel % 2 == 0:
        raise DimensionError(f"conv1d kernel must be odd and >= 1, got {kernel}")
    if x.rows < 1:
        raise DimensionError("conv1d on empty sequence")
    total, cin = x.shape
    if filters.shape != (kernel * cin, filters.cols):
        raise DimensionError(
            f"conv1d filter shape {filters.shape} incompatible with "
            f"kernel {kernel} and input {x.shape}"
        )
    wv, bv = filters.value, bias.value
    if bv.shape != (1, filters.cols):
        raise DimensionError(f"conv1d bias shape {bias.shape}")
    if lengths is None:
        lengths = (total,)
    lengths = tuple(int(length) for length in lengths)
    if min(lengths) < 1 or sum(lengths) != total:
        raise DimensionError(
            f"segment lengths {list(lengths)} do not tile {total} rows"
        )
    idx = _conv_window_index(lengths, kernel)
    with_zero = np.concatenate([x.value, np.zeros((1, cin))], axis=0)
    windows = with_zero[idx].reshape(total, kernel * cin)
    out = windows @ wv + bv

    def vjp(g):
        dwin = (g @ wv.T).reshape(total, kernel, cin)
        dxz = np.zeros((total + 1, cin))
        np.add.at(dxz, idx, dwin)
        return dxz[:total], windows.T @ g, g.sum(axis=0, keepdims=True)

    return Tensor(out, (x, filters, bias), vjp)


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Query/key/value projections of a single-head attention stage."""

    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter

    @classmethod
    def create(cls, rng: "Rng", d_in: int, d_out: int) -> "AttentionParams":
        ws = [init_weight(rng, d_in, d_out) for _ in range(3)]
        bs = [Parameter(np.zeros((1, d_out))) for _ in range(3)]
        return cls(ws[0], bs[0], ws[1], bs[1], ws[2], bs[2])

    @property
    def d_in(self) -> int:
        return self.wq.rows

    @property
    def d_out(self) -> int:
        return self.wq.cols

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv]


MASK_OFF = -1e30  # additive logit mask; exp underflows to exactly 0


def attention_weights(x: Tensor, params: AttentionParams) -> Tensor:
    """The softmax attention matrix: rows are convex weights over positions."""
    if x.cols != params.d_in:
        raise DimensionError(
            f"attention input width {x.cols} != projection fan-in {params.d_in}"
        )
    q = add(matmul(x, params.wq), params.bq)
    k = add(matmul(x, params.wk), params.bk)
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(params.d_out))
    return softmax_row(logits)


@_cache
def _pack_plan(lengths: tuple[int, ...]):
    """Padding plan for batching uneven segments into an (n, L, .) block."""
    n = len(lengths)
    cap = max(lengths)
    total = sum(lengths)
    pack = np.full((n, cap), total, dtype=np.intp)  # `total` = the zero row
    seg_ids = np.empty(total, dtype=np.intp)
    pos_ids = np.empty(total, dtype=np.intp)
    valid = np.zeros((n, cap), dtype=bool)
    start = 0
    for i, length in enumerate(lengths):
        pack[i, :length] = np.arange(start, start + length)
        seg_ids[start:start + length] = i
        pos_ids[start:start + length] = np.arange(length)
        valid[i, :length] = True
        start += length
    key_mask = np.where(valid, 0.0, MASK_OFF)[:, None, :]  # (n, 1, cap)
    return pack, seg_ids, pos_ids, key_mask


def self_attention(x: Tensor, params: AttentionParams, lengths=None) -> Tensor:
    """Single-head scaled dot-product attention, no residual or norm layer.

    Implemented as one fused graph node with a hand-derived backward pass
    (the compositional form costs an order of magnitude more graph nodes on
    the short sequences this kernel targets).  With ``lengths`` the rows
    are treated as that many independent consecutive sequences, attended in
    one packed batch; the result matches per-sequence calls.
    """
    if x.cols != params.d_in:
        raise DimensionError(
            f"attention input width {x.cols} != projection fan-in {params.d_in}"
        )
    xv = x.value
    wq, bq = params.wq.value, params.bq.value
    wk, bk = params.wk.value, params.bk.value
    wv, bv = params.wv.value, params.bv.value
    c = 1.0 / math.sqrt(params.d_out)
    parents = (x, params.wq, params.bq, params.wk, params.bk,
               params.wv, params.bv)

    q = xv @ wq + bq
    k = xv @ wk + bk
    v = xv @ wv + bv

    if lengths is None:
        logits = c * (q @ k.T)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        weights = e / e.sum(axis=1, keepdims=True)
        out = weights @ v

        def vjp(g):
            dv = weights.T @ g
            dw = g @ v.T
            ds = weights * (dw - (dw * weights).sum(axis=1, keepdims=True))
            dq = c * (ds @ k)
            dk = c * (ds.T @ q)
            dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
            return (
                dx,
                xv.T @ dq, dq.sum(axis=0, keepdims=True),
                xv.T @ dk, dk.sum(axis=0, keepdims=True),
                xv.T @ dv, dv.sum(axis=0, keepdims=True),
            )

        return Tensor(out, parents, vjp)

    lengths = tuple(int(length) for length in lengths)
    if min(lengths) < 1 or sum(lengths) != x.rows:
        raise DimensionError(
            f"segment lengths {list(lengths)} do not tile {x.rows} rows"
        )
    pack, seg_ids, pos_ids, key_mask = _pack_plan(lengths)
    zero = np.zeros((1, q.shape[1]))
    q3 = np.concatenate([q, zero])[pack]
    k3 = np.concatenate([k, zero])[pack]
    v3 = np.concatenate([v, zero])[pack]
    logits = c * (q3 @ k3.swapaxes(1, 2)) + key_mask
    shifted = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=2, keepdims=True)
    out = (weights @ v3)[seg_ids, pos_ids]

    def vjp(g):
        g3 = np.zeros_like(q3)
        g3[seg_ids, pos_ids] = g
        dv3 = weights.swapaxes(1, 2) @ g3
        dw3 = g3 @ v3.swapaxes(1, 2)
        ds3 = weights * (dw3 - (dw3 * weights).sum(axis=2, keepdims=True))
        dq = (c * (ds3 @ k3))[seg_ids, pos_ids]
        dk = (c * (ds3.swapaxes(1, 2) @ q3))[seg_ids, pos_ids]
        dv = dv3[seg_ids, pos_ids]
        dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
        return (
            dx,
            xv.T @ dq, dq.sum(axis=0, keepdims=True),
            xv.T @ dk, dk.sum(axis=0, keepdims=True),
            xv.T @ dv, dv.sum(axis=0, keepdims=True),
        )

    return Tensor(out, parents, vjp)


def init_weight(rng: "Rng", fan_in: int, fan_out: int) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


# ---------------------------------------------------------------------------
# deterministic random streams
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic random stream; ``split`` yields independent children.

    The same seed and call sequence always reproduce the same draws, and
    ``split(child_id)`` streams are independent of the parent's position.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key))
        )

    def split(self, child_id: int) -> "Rng":
        return Rng(self.seed, self._key + (int(child_id),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        """Draw integers from [low, high), matching numpy's convention."""
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# finite-difference certification
# ---------------------------------------------------------------------------

@dataclass
class FdReport:
    """Outcome of one finite-difference gradient check."""

    max_rel_error: float
    tol: float
    passed: bool


def finite_difference_check(fn, wrt, tol: float, step: float = 1e-5) -> FdReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` rebuilds its graph on every call and returns a Tensor, which is
    scalarised by summing all entries.  ``wrt`` lists the leaf tensors to
    perturb.  The reported error is the worst elementwise relative error,
    with denominator max(1, |analytic|, |numeric|).
    """
    for t in wrt:
        t.grad = None
    out = fn()
    out.backward(np.ones_like(out.value))
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in wrt
    ]

    max_rel = 0.0
    for t, a in zip(wrt, analytic):
        flat = t.value.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().value.sum()
            flat[i] = orig - step
            f_minus = fn().value.sum()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        a_flat = a.reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a_flat), np.abs(numeric)))
        rel = np.abs(a_flat - numeric) / denom
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))
    return FdReport(max_rel_error=max_rel, tol=tol, passed=max_rel < tol)
