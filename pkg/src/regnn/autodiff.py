"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient and recording is enabled, appends a vector-Jacobian
closure to the active :class:`Tape`. :func:`backward` replays the tape in
reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray
VJP = Callable[[Array], Sequence["Array | None"]]


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> Array:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.value.reshape(-1)[0])

    # operator sugar for composite expressions in tests and layers
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


@dataclass
class Tape:
    """Ordered record of executed primitives, in execution order."""

    records: list[_Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    """Disable recording; used for inference so no tape is built."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(value: Array, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``value`` as the output of a primitive with the given VJP.

    ``vjp(g)`` maps the upstream gradient to one gradient per input (``None``
    for inputs that need none). Public so custom primitives can be defined.
    """
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        _state.tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor on the tape, then clear it.

    Tensors recorded on the tape but disconnected from ``loss`` receive a zero
    gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    seen: dict[int, Tensor] = {id(loss): loss}
    try:
        for rec in reversed(tape.records):
            for t in rec.inputs:
                if t.requires_grad:
                    seen.setdefault(id(t), t)
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    finally:
        tape.clear()
    for key, t in seen.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.value) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return record_op(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record_op(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return record_op(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


elementwise_mul = mul


def scale(a: Tensor, c: float) -> Tensor:
    return record_op(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return record_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return record_op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return record_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return record_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    av = a.value
    return record_op(np.log(av), (a,), lambda g: (g / av,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return record_op(av * av, (a,), lambda g: (2.0 * g * av,))


def abs_(a: Tensor) -> Tensor:
    av = a.value
    return record_op(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.value > lo
    return record_op(np.where(keep, a.value, lo), (a,), lambda g: (g * keep,))


def softmax_row(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return record_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return record_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return record_op(a.value.T, (a,), lambda g: (g.T,))


def _concat(tensors: Sequence[Tensor], axis: int, opname: str) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError(f"{opname}: nothing to concatenate")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"{opname}: shape mismatch ({exc})") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(value, tensors, lambda g: np.split(g, splits, axis=axis))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, 0, "concat_rows")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, 1, "concat_cols")


def _check_index(idx: Array, bound: int, opname: str) -> Array:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"{opname}: index out of range [0, {bound})")
    return idx


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = _check_index(idx, a.shape[0], "gather_rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record_op(a.value[idx], (a,), vjp)


def scatter_sum(messages: Tensor, targets, num_rows: int) -> Tensor:
    """Row ``r`` of the result is the sum of message rows whose target is ``r``."""
    targets = _check_index(targets, num_rows, "scatter_sum")
    if targets.shape[0] != messages.shape[0]:
        raise ValueError("scatter_sum: one target per message row required")
    out = np.zeros((num_rows,) + messages.shape[1:])
    np.add.at(out, targets, messages.value)
    return record_op(out, (messages,), lambda g: (g[targets],))


def segment_mean(x: Tensor, segments, num_segments: int) -> Tensor:
    segments = _check_index(segments, num_segments, "segment_mean")
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    inv = (1.0 / counts).reshape((-1,) + (1,) * (x.value.ndim - 1))
    return mul(scatter_sum(x, segments, num_segments), Tensor(inv))


def pick(a: Tensor, cols) -> Tensor:
    """``out[i] = a[i, cols[i]]`` for a 2-d tensor."""
    cols = _check_index(cols, a.shape[1], "pick")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return record_op(a.value[rows, cols], (a,), vjp)


def batch_norm_op(x: Tensor, gamma: Tensor, beta: Tensor, mu: Array, var: Array,
                  eps: float, batch_stats: bool) -> Tensor:
    """Normalize columns of ``x`` by (mu, var), then scale and shift.

    With ``batch_stats`` the statistics are functions of ``x`` and the VJP
    accounts for that; otherwise they are constants.
    """
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    gv = gamma.value

    def vjp(g):
        dxhat = g * gv
        if batch_stats:
            n = x.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record_op(xhat * gv + beta.value, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_input: list[float]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e}"


# Gradient norms below GRAD_FLOOR * max(1, |f|) are compared absolutely: central
# differences of a flat direction are pure round-off and would divide noise by noise.
GRAD_FLOOR = 1e-4


def _rel_err(a: Array, b: Array, floor: float = 0.0) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def grad_check(f: Callable[..., Tensor], point, tol: float = 1e-6, step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``point`` is a Tensor or a sequence of Tensors; ``f`` is called with them
    as positional arguments and must return a scalar. The error for each input
    is the norm-wise relative error ``|a - n| / max(|a|, |n|, GRAD_FLOOR * max(1, |f|))``.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    try:
        current_tape().clear()
        loss = f(*points)
        floor = GRAD_FLOOR * max(1.0, abs(loss.item()))
        backward(loss)
        analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in points]
        errs = []
        with no_grad():
            for p, a in zip(points, analytic):
                numeric = np.zeros_like(p.value)
                flat = p.value.reshape(-1)
                nflat = numeric.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = f(*points).item()
                    flat[i] = orig - step
                    fm = f(*points).item()
                    flat[i] = orig
                    nflat[i] = (fp - fm) / (2.0 * step)
                errs.append(_rel_err(a, numeric, floor))
    finally:
        for p, s in zip(points, saved):
            p.requires_grad = s
    worst = max(errs) if errs else 0.0
    return GradCheckReport(passed=worst < tol, max_rel_err=worst, per_input=errs)
