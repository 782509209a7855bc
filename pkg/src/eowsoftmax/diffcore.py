"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to its :class:`Node` values.
Calling :func:`backward` on a scalar node walks the tape in reverse and
returns the gradient of that scalar with respect to every recorded node,
intermediate values included. The latter is what lets the Langevin sampler
differentiate an energy with respect to a latent activation instead of the
parameters.

Broadcasting is deliberately limited to scalar-vs-array and equal shapes.
Row-vector bias addition has its own op (:func:`add_bias`).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "DomainError",
    "NonFiniteError",
    "matmul",
    "add",
    "sub",
    "mul",
    "negate",
    "relu",
    "exp",
    "log",
    "elementwise",
    "add_bias",
    "sum",
    "mean",
    "logsumexp",
    "log_softmax",
    "take_rows",
    "column",
    "slice_cols",
    "backward",
    "grad",
    "finite_diff_check",
]


class DomainError(ValueError):
    """An op was applied outside its mathematical domain (e.g. log of x <= 0)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Node:
    __slots__ = ("tape", "id", "value", "parents", "vjp", "op")

    def __init__(self, tape, value, parents=(), vjp=None, op="leaf"):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations. Single-threaded; use one tape per thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Node:
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, "leaf")
        return Node(self, arr)

    def constant(self, value) -> Node:
        # identical to a leaf; gradients reaching it are simply never read
        return self.leaf(value)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a Node")


def _lift(tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("nodes belong to different tapes")
        return x
    return tape.constant(x)


def _record(tape, value, parents, vjp, op) -> Node:
    _check_finite(value, op)
    return Node(tape, value, parents, vjp, op)


def _unbroadcast(g, shape):
    # only scalar-vs-array broadcasting is allowed, so reducing is a full sum
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a, b, op):
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and a.value.size != 1 and b.value.size != 1:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record(tape, av @ bv, (a, b), vjp, "matmul")


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "add")
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(tape, a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(tape, a.value - b.value, (a, b), vjp, "sub")


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shapes(a, b, "mul")
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(tape, av * bv, (a, b), vjp, "mul")


def negate(a: Node) -> Node:
    return _record(a.tape, -a.value, (a,), lambda g: (-g,), "negate")


def relu(a: Node) -> Node:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    return _record(a.tape, np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)  # overflow surfaces as NonFiniteError below
    return _record(a.tape, out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("log of a non-positive value")
    av = a.value
    return _record(a.tape, np.log(av), (a,), lambda g: (g / av,), "log")


_ELEMENTWISE: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "negate": negate,
}


def elementwise(op: str, *args) -> Node:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def add_bias(x: Node, b: Node) -> Node:
    """``x + b`` where ``x`` is (n, m) and ``b`` is (m,)."""
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise ValueError(f"add_bias: shape mismatch {x.value.shape} + {b.value.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _record(x.tape, x.value + b.value, (x, b), vjp, "add_bias")


def sum(a: Node) -> Node:  # noqa: A001
    shape = a.value.shape
    return _record(a.tape, np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Node) -> Node:
    shape, n = a.value.shape, a.value.size
    return _record(
        a.tape, np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, g / n),), "mean"
    )


def logsumexp(a: Node) -> Node:
    """Stable log-sum-exp over the last axis."""
    av = a.value
    m = av.max(axis=-1, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = e / s

    def vjp(g):
        return (g[..., None] * soft,)

    return _record(a.tape, out, (a,), vjp, "logsumexp")


def log_softmax(a: Node) -> Node:
    """``a - logsumexp(a)`` over the last axis, shifted by the row max."""
    av = a.value
    shifted = av - av.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record(a.tape, out, (a,), vjp, "log_softmax")


def take_rows(a: Node, index) -> Node:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    index = np.asarray(index, dtype=np.int64)
    if a.value.ndim != 2 or index.shape != (a.value.shape[0],):
        raise ValueError("take_rows: need a 2-D node and one index per row")
    if np.any(index < 0) or np.any(index >= a.value.shape[1]):
        raise IndexError("take_rows: index out of range")
    rows = np.arange(a.value.shape[0])
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _record(a.tape, a.value[rows, index], (a,), vjp, "take_rows")


def column(a: Node, j: int) -> Node:
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _record(a.tape, a.value[:, j].copy(), (a,), vjp, "column")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    """``a[:, start:stop]``."""
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.tape, a.value[:, start:stop].copy(), (a,), vjp, "slice_cols")


def backward(tape: Tape, root: Node) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every node it depends on.

    Returns a map from node id to gradient array. Nodes that ``root`` does not
    depend on are absent from the map.
    """
    if root.tape is not tape:
        raise ValueError("root is not on this tape")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


def grad(tape: Tape, root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Like :func:`backward` but returns one array per node in ``wrt`` (zeros if unreached)."""
    g = backward(tape, root)
    return [g.get(n.id, np.zeros_like(n.value)) for n in wrt]


def finite_diff_check(f, x, analytic=None, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps a float64 array to a float. If ``analytic`` is None the
    gradient is taken by recording ``f`` on a tape, in which case ``f`` must
    accept a :class:`Node` and return a scalar node.
    """
    x = np.array(x, dtype=np.float64)
    if analytic is None:
        tape = Tape()
        leaf = tape.leaf(x)
        out = f(leaf)
        analytic = grad(tape, out, [leaf])[0]

        def value(v):
            t = Tape()
            return float(f(t.leaf(v)).value)
    else:
        def value(v):
            return float(f(v))

    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = central_differences(value, x, h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12), initial=0.0))


def central_differences(value, x, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(x)
        flat[i] = orig - h
        fm = value(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)
