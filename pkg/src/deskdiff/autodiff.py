"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: add, sub, mul, matmul, concat,
reshape, transpose, softmax over the last axis, layer normalization, SiLU,
embedding gather, scalar scale, reduce-sum, reduce-mean, square.  That is
enough to express a patch-token denoiser, a small text encoder, and their
losses; there are no convolutions and no higher-order derivatives.

Ops build the backward graph eagerly (define-by-run).  When no input
requires a gradient the closure is skipped entirely, so inference runs as
plain numpy plus a finiteness check.  Every primitive verifies its output
is finite and raises NonFiniteError naming the op: overflow is a hard
error here, never a silently propagating NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ForwardNotRunError,
    GraphError,
    InvalidStepError,
    NonFiniteError,
    NotScalarRootError,
    ShapeMismatchError,
)

Array = np.ndarray

_LN_EPS = 1e-6


def _check_finite(data: Array, op: str) -> None:
    # Summing is cheaper than isfinite().all() and still flags any NaN/Inf.
    if not math.isfinite(float(np.sum(data))):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """Immutable-by-convention float64 array node in a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are wrapped as non-grad leaves.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scalar_scale(self, -1.0)


def as_tensor(value) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _node(data: Array, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[Array], tuple]) -> Tensor:
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must be at least 2-D (leading axes batch)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, "matmul", (a, b), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: {[p.shape for p in parts]}") from exc
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, "concat", tuple(parts), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = np.reshape(x.data, shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"reshape: {x.shape} -> {shape}") from exc

    def backward(g):
        return (np.reshape(g, x.shape),)

    return _node(data, "reshape", (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _node(data, "transpose", (x,), backward)


def softmax_last(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _node(s, "softmax", (x,), backward)


def layernorm(x: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return _node(y, "layernorm", (x,), backward)


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    data = x.data * sig

    def backward(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _node(data, "silu", (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D table by integer index (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatchError(f"gather_rows expects a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(data, "gather", (table,), backward)


def scalar_scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def backward(g):
        return (g * c,)

    return _node(data, "scale", (x,), backward)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).copy(),)

    return _node(data, "reduce_sum", (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = 1
        for ax in axes:
            count *= x.shape[ax]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, x.shape).copy(),)

    return _node(data, "reduce_mean", (x,), backward)


def square(x: Tensor) -> Tensor:
    data = x.data * x.data

    def backward(g):
        return (g * 2.0 * x.data,)

    return _node(data, "square", (x,), backward)


# ---------------------------------------------------------------------------
# backward walk
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; each node appears exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root: Tensor) -> None:
    """Populate .grad on every requires_grad ancestor of a scalar root."""
    if root.size != 1:
        raise NotScalarRootError(f"backward root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# named-leaf graphs
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """A differentiable computation over named leaf arrays.

    `build(leaves, rng)` assembles the computation from leaf tensors and
    returns the root.  The rng handle is freshly seeded on every forward so
    repeated evaluation is bitwise identical; it exists for dropout-style
    masks and is unused by deterministic models.
    """

    leaves: dict[str, Array]
    build: Callable[[dict[str, Tensor], np.random.Generator], Tensor]
    seed: int = 0
    _root: Tensor | None = field(default=None, repr=False)
    _leaf_tensors: dict[str, Tensor] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.leaves = {k: np.asarray(v, dtype=np.float64) for k, v in self.leaves.items()}

    def reset(self) -> None:
        self._root = None
        self._leaf_tensors = None


def _check_bindings(graph: Graph, bindings: dict[str, Array]) -> None:
    missing = set(graph.leaves) - set(bindings)
    if missing:
        raise GraphError(f"unbound leaves: {sorted(missing)}")
    unknown = set(bindings) - set(graph.leaves)
    if unknown:
        raise GraphError(f"unknown leaves: {sorted(unknown)}")


def forward_eval(graph: Graph, bindings: dict[str, Array] | None = None) -> Tensor:
    """Evaluate the graph with every leaf bound; retains state for backward."""
    bindings = graph.leaves if bindings is None else bindings
    _check_bindings(graph, bindings)
    graph.reset()
    leaf_tensors = {name: Tensor(value, requires_grad=True, name=name)
                    for name, value in bindings.items()}
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(graph.seed)))
    root = graph.build(leaf_tensors, rng)
    graph._root = root
    graph._leaf_tensors = leaf_tensors
    return root


def _forward_value(graph: Graph, bindings: dict[str, Array]) -> Array:
    # Gradient-free evaluation used by the finite-difference loop.
    _check_bindings(graph, bindings)
    leaf_tensors = {name: Tensor(value, name=name) for name, value in bindings.items()}
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(graph.seed)))
    return graph.build(leaf_tensors, rng).data


def backward(graph: Graph) -> dict[str, Array]:
    """Return d(root)/d(leaf) for every leaf of the last forward_eval."""
    if graph._root is None or graph._leaf_tensors is None:
        raise ForwardNotRunError("backward requires a prior forward_eval")
    backprop(graph._root)
    grads = {}
    for name, leaf in graph._leaf_tensors.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads


@dataclass
class FiniteDifferenceReport:
    """Per-leaf max relative error of analytic vs central-difference grads."""

    per_leaf: dict[str, float]
    h: float
    tolerance: float

    @property
    def max_relative_error(self) -> float:
        return max(self.per_leaf.values()) if self.per_leaf else 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_relative_error:.3e} "
                f"(tolerance {self.tolerance:.1e}, h={self.h:.1e}, "
                f"{len(self.per_leaf)} leaves)")


def finite_difference_check(graph: Graph, h: float = 1e-5, tolerance: float = 1e-5,
                            bindings: dict[str, Array] | None = None) -> FiniteDifferenceReport:
    """Compare backward() against central finite differences, leaf by leaf.

    The error is normalized per leaf by the largest gradient magnitude seen
    on that leaf, which matches the absolute-noise model of central
    differences and avoids blowups on entries whose true gradient is zero.
    """
    if not (h > 0):
        raise InvalidStepError(f"finite-difference step must be positive, got {h}")
    bindings = graph.leaves if bindings is None else bindings
    root = forward_eval(graph, bindings)
    if root.size != 1:
        raise NotScalarRootError("finite_difference_check needs a scalar-rooted graph")
    analytic = backward(graph)

    per_leaf: dict[str, float] = {}
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in bindings.items()}
    for name in bindings:
        base = work[name]
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(_forward_value(graph, work).reshape(()))
            flat[i] = orig - h
            f_minus = float(_forward_value(graph, work).reshape(()))
            flat[i] = orig
            fd_flat[i] = (f_plus - f_minus) / (2.0 * h)
        scale = max(np.max(np.abs(fd), initial=0.0),
                    np.max(np.abs(analytic[name]), initial=0.0), 1e-8)
        per_leaf[name] = float(np.max(np.abs(analytic[name] - fd), initial=0.0) / scale)
    return FiniteDifferenceReport(per_leaf=per_leaf, h=h, tolerance=tolerance)
