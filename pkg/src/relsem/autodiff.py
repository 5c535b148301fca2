"""Minimal reverse-mode automatic differentiation over dense and sparse operands.

Values are numpy arrays of rank <= 2. Sparse matrices (scipy CSR) only enter
as constant operands of :func:`spmm`. Every differentiable primitive computes
its forward value eagerly and, when a :class:`Tape` is active and some input
requires a gradient, records a vector-Jacobian closure on that tape.

    >>> W = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_mean(W)
    >>> tape.backward(loss, [W])[0]
    array([[0.25, 0.25],
           [0.25, 0.25]])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Tape", "BatchNormState", "apply", "backward", "gradient_check",
    "GradCheckResult", "OPS", "as_tensor",
    "matmul", "spmm", "add", "sub", "mul", "concat", "relu", "elu", "tanh",
    "sigmoid", "leaky_relu", "row_l2_normalize", "batch_norm", "dropout",
    "segment_softmax", "segment_sum", "segment_mean", "gather_rows",
    "scatter_rows", "top_k", "bce_with_logits", "reduce_mean", "reduce_sum",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense value with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ValueError(f"rank {value.ndim} tensors are not supported")
        self.value = value
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Append-only record of executed primitives.

    Use as a context manager; primitives executed inside the ``with`` block
    are recorded on this tape. Tapes nest and are thread-confined.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # sign patterns of piecewise primitives, consumed by gradient_check
        self.kinks: list[bytes] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        return backward(self, loss, wrt)


def _record(op: str, value: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tensors = tuple(t for t in inputs if isinstance(t, Tensor))
    needs = any(t.requires_grad for t in tensors)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, inputs, vjp, op))
    return out


def _note_kink(pattern: np.ndarray) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.kinks.append(np.packbits(np.asarray(pattern, dtype=bool).ravel()).tobytes())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(A, x) -> Tensor:
    """Sparse (constant) times dense."""
    if not sp.issparse(A):
        raise TypeError("spmm expects a scipy sparse matrix as first operand")
    x = as_tensor(x)
    if x.value.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {A.shape} @ {x.shape}")
    At = A.T.tocsr()
    return _record("spmm", np.asarray(A @ x.value), (x,), lambda g: (np.asarray(At @ g),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError as exc:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _record("concat", out, tensors, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    _note_kink(mask)
    return _record("relu", x.value * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    _note_kink(mask)
    scale = np.where(mask, 1.0, slope)
    return _record("leaky_relu", x.value * scale, (x,), lambda g: (g * scale,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    em1 = np.expm1(np.minimum(x.value, 0.0))
    out = np.where(mask, x.value, alpha * em1)
    slope = np.where(mask, 1.0, alpha * (em1 + 1.0))
    _note_kink(mask)
    return _record("elu", out, (x,), lambda g: (g * slope,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(np.atleast_1d(x.value)).reshape(x.shape)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def row_l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """x / max(||x_row||, eps), row by row."""
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise ValueError("row_l2_normalize expects a matrix")
    norm = np.linalg.norm(x.value, axis=1, keepdims=True)
    clamped = norm <= eps
    _note_kink(clamped)
    denom = np.where(clamped, eps, norm)
    y = x.value / denom

    def vjp(g):
        proj = np.where(clamped, 0.0, np.sum(g * y, axis=1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _record("row_l2_normalize", y, (x,), vjp)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim), momentum, eps)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-feature batch normalization.

    In training mode normalizes with batch statistics and updates the running
    estimates (``running = momentum * running + (1 - momentum) * batch``); in
    eval mode uses the running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xv, gv = x.value, gamma.value
    n = xv.shape[0]
    if training:
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xv - mu) * inv
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased

        def vjp(g):
            dxhat = g * gv
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean) * inv

        def vjp(g):
            return g * gv * inv, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _record("batch_norm", xhat * gv + beta.value, (x, gamma, beta), vjp)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record("dropout", x.value * scale, (x,), lambda g: (g * scale,))


def _as_segments(segment_ids, num_segments: int) -> np.ndarray:
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.ndim != 1:
        raise ValueError("segment ids must be one-dimensional")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError("segment id out of range")
    return seg


def segment_softmax(scores, segment_ids, num_segments: int) -> Tensor:
    """Softmax of rows of ``scores`` within each segment, column by column."""
    scores = as_tensor(scores)
    seg = _as_segments(segment_ids, num_segments)
    v = scores.value
    if v.shape[0] != seg.size:
        raise ValueError("scores and segment ids disagree in length")
    shape = (num_segments,) + v.shape[1:]
    smax = np.full(shape, -np.inf)
    np.maximum.at(smax, seg, v)
    e = np.exp(v - smax[seg])
    denom = np.zeros(shape)
    np.add.at(denom, seg, e)
    y = e / denom[seg]

    def vjp(g):
        s = np.zeros(shape)
        np.add.at(s, seg, g * y)
        return (y * (g - s[seg]),)

    return _record("segment_softmax", y, (scores,), vjp)


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    values = as_tensor(values)
    seg = _as_segments(segment_ids, num_segments)
    if values.shape[0] != seg.size:
        raise ValueError("values and segment ids disagree in length")
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, seg, values.value)
    return _record("segment_sum", out, (values,), lambda g: (g[seg],))


def segment_mean(values, segment_ids, num_segments: int) -> Tensor:
    """Mean within each segment; empty segments give zeros."""
    values = as_tensor(values)
    seg = _as_segments(segment_ids, num_segments)
    if values.shape[0] != seg.size:
        raise ValueError("values and segment ids disagree in length")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    inv = inv.reshape((-1,) + (1,) * (values.value.ndim - 1))
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, seg, values.value)
    return _record("segment_mean", out * inv, (values,), lambda g: ((g * inv)[seg],))


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise IndexError("row index out of range")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather_rows", x.value[idx], (x,), vjp)


def scatter_rows(x, index, num_rows: int) -> Tensor:
    """Place rows of ``x`` at distinct ``index`` positions of a zero matrix."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if len(np.unique(idx)) != idx.size:
        raise ValueError("scatter_rows needs distinct indices")
    out = np.zeros((num_rows,) + x.shape[1:])
    out[idx] = x.value
    return _record("scatter_rows", out, (x,), lambda g: (g[idx],))


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties by lower index."""
    v = np.asarray(scores.value if isinstance(scores, Tensor) else scores).ravel()
    k = max(1, min(int(k), v.size))
    order = np.argsort(-v, kind="stable")[:k]
    _note_kink(np.isin(np.arange(v.size), order))
    return order


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits."""
    logits = as_tensor(logits)
    x = logits.value
    y = np.asarray(targets.value if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != x.shape:
        raise ValueError(f"bce shape mismatch: {x.shape} vs {y.shape}")
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    return _record("bce_with_logits", out, (logits,), lambda g: (g * (p - y),))


def reduce_mean(x) -> Tensor:
    x = as_tensor(x)
    size = x.value.size
    if size == 0:
        raise ValueError("mean of an empty tensor")
    shape = x.shape
    return _record(
        "reduce_mean", np.asarray(x.value.mean()), (x,),
        lambda g: (np.full(shape, float(g) / size),),
    )


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _record("reduce_sum", np.asarray(x.value.sum()), (x,),
                       lambda g: (np.full(shape, float(g)),))
    return _record("reduce_sum", x.value.sum(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "sparse_dense_matmul": spmm,
    "spmm": spmm,
    "add": add,
    "sub": sub,
    "mul": mul,
    "elementwise_mul": mul,
    "concat": concat,
    "concat_columns": concat,
    "relu": relu,
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "row_l2_normalize": row_l2_normalize,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "segment_softmax": segment_softmax,
    "segment_sum": segment_sum,
    "segment_mean": segment_mean,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
    "top_k": top_k,
    "bce_with_logits": bce_with_logits,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
}


def apply(op: str, *inputs, **kwargs):
    """Run a catalog primitive by name."""
    try:
        fn = OPS[op.replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    """Accumulate gradients of scalar ``loss`` by reverse tape traversal.

    Sets ``.grad`` on every gradient-requiring leaf reached. If ``wrt`` is
    given, returns their gradients in order (zeros for unreachable ones).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = np.reshape(gi, t.shape)
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            leaves.setdefault(key, t)
    for key, t in leaves.items():
        if key in grads and key not in produced:
            t.grad = grads[key]
    if wrt is None:
        return {leaves[k]: g for k, g in grads.items() if k in leaves}
    return [grads.get(id(t), np.zeros_like(t.value)) for t in wrt]


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def gradient_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients with central finite differences.

    ``f`` builds a scalar from ``params`` and must be deterministic. A
    coordinate whose +/-eps perturbations land on different sides of a
    piecewise primitive's kink is skipped and reported.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
    analytic = backward(tape, loss, params)

    def evaluate():
        with Tape() as t:
            val = float(f(params).value)
        return val, t.kinks

    worst = 0.0
    checked = 0
    skipped = []
    for pi, p in enumerate(params):
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            gen = rng or np.random.default_rng(0)
            pick = gen.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for c in coords:
            orig = p.value[c]
            p.value[c] = orig + eps
            fp, kp = evaluate()
            p.value[c] = orig - eps
            fm, km = evaluate()
            p.value[c] = orig
            if kp != km:
                skipped.append((pi, c))
                continue
            fd = (fp - fm) / (2 * eps)
            ad = analytic[pi][c]
            err = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)
