"""Minimal reverse-mode autodiff over dense float64 tensors.

Define-by-run: every differentiable operation appends a node to the active
tape, and ``backward`` replays the tape once in reverse. Tapes are meant to
be rebuilt per optimization step (graph topology changes with dynamic kNN),
so there is no retain-graph machinery: a tape can be consumed exactly once.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeMismatchError(AutodiffError):
    pass


class IndexOutOfRangeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


class Tape:
    """Ordered record of operations; append order is topological order."""

    __slots__ = ("nodes", "consumed", "__weakref__")

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


_ACTIVE_TAPE = Tape()


def active_tape() -> Tape:
    return _ACTIVE_TAPE


def new_tape() -> Tape:
    """Install and return a fresh active tape, dropping the old one."""
    global _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    return _ACTIVE_TAPE


@contextmanager
def fresh_tape():
    """Run a block on its own tape, restoring the previous one afterwards."""
    global _ACTIVE_TAPE
    saved = _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = saved


class Tensor:
    """Dense float64 array with optional gradient buffer.

    Values are treated as immutable once the tensor has been recorded on a
    tape; gradients accumulate in place across backward passes until
    ``zero_grads`` resets them. Gradient buffers materialize lazily (an
    untouched gradient reads as zeros). The tape reference is weak so a
    dropped tape frees its whole step immediately.
    """

    __slots__ = ("values", "requires_grad", "_grad", "node_id", "_tape_ref",
                 "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self.node_id = None
        self._tape_ref = None

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def tape(self):
        return self._tape_ref() if self._tape_ref is not None else None

    @property
    def shape(self):
        return tuple(self.values.shape)

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; heavy lifting stays in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scalar_multiply(self, other)

    def __rmul__(self, other):
        return scalar_multiply(self, other)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Parameter:
    """Named trainable tensor; names are unique within a model bundle."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        if not self.tensor.requires_grad:
            raise AutodiffError(f"parameter '{self.name}' must require grad")


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs, values: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        tape = _ACTIVE_TAPE
        out._tape_ref = weakref.ref(tape)
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shape {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.values + b.values, lambda g: (g, g))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("subtract", a, b)
    return _record("subtract", (a, b), a.values - b.values, lambda g: (g, -g))


def scalar_multiply(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record("scalar_multiply", (a,), a.values * s, lambda g: (g * s,))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("multiply", a, b)
    av, bv = a.values, b.values
    return _record("multiply", (a, b), av * bv, lambda g: (g * bv, g * av))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatchError(
            f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shape {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return (ga, gb)

    return _record("matmul", (a, b), av @ bv, bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return _record("relu", (x,), np.where(mask, x.values, 0.0),
                   lambda g: (np.where(mask, g, 0.0),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    slope = float(slope)
    factor = np.where(x.values > 0, 1.0, slope)
    return _record("leaky_relu", (x,), x.values * factor,
                   lambda g: (g * factor,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.values)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError("exp: non-finite input")
    out = np.exp(x.values)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError("log: non-finite input")
    if np.any(x.values <= 0):
        raise NonFiniteError("log: input must be strictly positive")
    xv = x.values
    return _record("log", (x,), np.log(xv), lambda g: (g / xv,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: empty input list")
    rank = tensors[0].values.ndim
    axis = _check_axis(axis, rank, "concat")
    for t in tensors[1:]:
        if t.values.ndim != rank:
            raise ShapeMismatchError(
                f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for d in range(rank):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeMismatchError(
                    f"concat: shape {tensors[0].shape} vs {t.shape} on axis {d}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors),
                   np.concatenate([t.values for t in tensors], axis=axis), bwd)


def index_select(x, axis: int, indices) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(axis, x.values.ndim, "index_select")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise IndexOutOfRangeError("index_select: indices must be 1-D")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRangeError(
            f"index_select: index out of range for axis of length {n}")
    in_shape = x.shape

    def bwd(g):
        buf = np.zeros(in_shape)
        _scatter_add(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return _record("index_select", (x,), np.take(x.values, idx, axis=axis), bwd)


def _scatter_add(buf: np.ndarray, idx: np.ndarray, updates: np.ndarray):
    """buf[idx[i]] += updates[i] with duplicate indices; sort + reduceat is
    far faster than np.add.at for the gather-heavy graph layers."""
    if idx.size == 0:
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_updates = updates[order]
    starts = np.flatnonzero(np.concatenate(([True], np.diff(sorted_idx) > 0)))
    buf[sorted_idx[starts]] += np.add.reduceat(sorted_updates, starts, axis=0)


def max_reduce(x, axis: int, keepdims: bool = False) -> Tensor:
    """Channel-wise max; ties resolve to the lowest index (argmax is saved
    and backward routes gradient only there)."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.values.ndim, "max_reduce")
    argmax = np.argmax(x.values, axis=axis)
    kept = np.take_along_axis(x.values, np.expand_dims(argmax, axis), axis=axis)
    vals = kept if keepdims else np.squeeze(kept, axis=axis)
    in_shape = x.shape

    def bwd(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros(in_shape)
        np.put_along_axis(buf, np.expand_dims(argmax, axis), ge, axis=axis)
        return (buf,)

    return _record("max_reduce", (x,), vals, bwd)


def sum_reduce(x, axis: int, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(axis, x.values.ndim, "sum_reduce")
    in_shape = x.shape

    def bwd(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, in_shape),)

    return _record("sum_reduce", (x,),
                   x.values.sum(axis=axis, keepdims=keepdims), bwd)


def mean_reduce(x, axis: int, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(axis, x.values.ndim, "mean_reduce")
    in_shape = x.shape
    n = in_shape[axis]

    def bwd(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, in_shape),)

    return _record("mean_reduce", (x,),
                   x.values.mean(axis=axis, keepdims=keepdims), bwd)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        vals = np.broadcast_to(x.values, shape)
    except ValueError:
        raise ShapeMismatchError(
            f"broadcast_to: cannot broadcast {x.shape} to {shape}")
    in_shape = x.shape

    def bwd(g):
        return (_unbroadcast(g, in_shape),)

    # the read-only broadcast view is kept as-is; downstream ufuncs and
    # gemms consume strided views at full speed, and values are never
    # mutated once recorded
    return _record("broadcast_to", (x,), vals, bwd)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeMismatchError(f"transpose: needs a 2-D tensor, got {x.shape}")
    return _record("transpose", (x,), x.values.T.copy(),
                   lambda g: (g.T.copy(),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    in_shape = x.shape
    try:
        vals = x.values.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {in_shape} as {shape}")
    return _record("reshape", (x,), vals, lambda g: (g.reshape(in_shape),))


def _check_axis(axis: int, rank: int, op: str) -> int:
    if not -rank <= axis < rank:
        raise ShapeMismatchError(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every requires-grad tensor reachable
    from ``root``. The root must be scalar; a tape can only be consumed once.
    """
    if root.values.size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root.tape is None:
        root.grad += 1.0
        return
    tape = root.tape
    if tape.consumed:
        raise TapeError("backward: tape already consumed")
    tape.consumed = True

    root.grad += 1.0
    touched = {id(root)}
    for node in reversed(tape.nodes):
        out = node.output
        if id(out) not in touched:
            continue
        out_grad = out.grad
        gins = node.backward_fn(out_grad)
        taken = set()
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if t._grad is None:
                # adopt freshly-allocated gradient arrays instead of copying;
                # anything aliased (views, the output grad itself, an array
                # already adopted by a sibling input) still gets copied
                if (g is not out_grad and g.base is None
                        and g.flags.owndata and id(g) not in taken):
                    t._grad = g
                    taken.add(id(g))
                else:
                    t._grad = np.array(g)
            else:
                t._grad += g
            touched.add(id(t))


def zero_grads(params):
    """Reset gradient buffers of the given parameters to zero."""
    for p in params:
        p.tensor.grad = None


def finite_difference_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central differences; returns max over coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise AutodiffError("finite_difference_check: step must be positive")
    if not x.requires_grad:
        raise AutodiffError("finite_difference_check: x must require grad")

    x.grad[...] = 0.0
    with fresh_tape():
        out = f(x)
        if not np.all(np.isfinite(out.values)):
            raise NonFiniteError("finite_difference_check: non-finite forward value")
        backward(out)
    analytic = x.grad.copy()
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("finite_difference_check: non-finite gradient")

    base = x.values
    numeric = np.zeros_like(base)
    flat_num = numeric.reshape(-1)
    for i in range(base.size):
        hi_pt = base.copy()
        hi_pt.flat[i] += step
        lo_pt = base.copy()
        lo_pt.flat[i] -= step
        with fresh_tape():
            hi = f(Tensor(hi_pt)).values.reshape(())
            lo = f(Tensor(lo_pt)).values.reshape(())
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError("finite_difference_check: non-finite probe value")
        flat_num[i] = (hi - lo) / (2.0 * step)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
