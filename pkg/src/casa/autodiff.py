"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built lazily: combining nodes records the operation, ``forward``
evaluates the graph, ``backward`` walks it in reverse topological order and
returns the gradient of a scalar root as one flat vector laid out in
``ParamVector`` order.

    >>> params = ParamVector([("x", np.array([2.0]))])
    >>> x = params.leaf("x")
    >>> y = mean(sg(x) * x)
    >>> forward(y)
    array(4.)
    >>> backward(y, params)
    array([2.])
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "GraphError",
    "Node",
    "StopGrad",
    "ParamVector",
    "const",
    "add",
    "sub",
    "mul",
    "matmul",
    "exp",
    "log",
    "tanh",
    "square",
    "mean",
    "softmax",
    "wsum",
    "sg",
    "forward",
    "backward",
    "finite_diff_grad",
    "relative_error",
]

LOG_FLOOR = 1e-300


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, shapes: Sequence[tuple]):
        self.op = op
        self.shapes = tuple(shapes)
        super().__init__(f"shape mismatch in '{op}': operand shapes {', '.join(map(str, shapes))}")


class GraphError(AutodiffError, RuntimeError):
    pass


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("op", "parents", "attrs", "value", "grad", "name")

    def __init__(self, op: str, parents: Sequence["Node"] = (), value=None, name: str | None = None, **attrs):
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs
        self.value = None if value is None else np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        if self.value is None:
            raise GraphError(f"node '{self.op}' has not been evaluated")
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = self.name or self.op
        shape = None if self.value is None else self.value.shape
        return f"Node({label}, shape={shape})"


class StopGrad(Node):
    """Identity in the forward pass, zero contribution in the backward pass."""

    __slots__ = ()

    def __init__(self, inner: Node):
        super().__init__("stop_grad", (inner,))

    @property
    def inner(self) -> Node:
        return self.parents[0]


class ParamVector:
    """Ordered named parameter segments with a fixed row-major flattening."""

    def __init__(self, segments: Iterable[tuple[str, np.ndarray]]):
        self._names: list[str] = []
        self._arrays: dict[str, np.ndarray] = {}
        self._offsets: dict[str, int] = {}
        offset = 0
        for name, values in segments:
            if name in self._arrays:
                raise ValueError(f"duplicate parameter segment '{name}'")
            arr = np.array(values, dtype=np.float64)
            self._names.append(name)
            self._arrays[name] = arr
            self._offsets[name] = offset
            offset += arr.size
        self.total_len = offset

    @property
    def names(self) -> list[str]:
        return list(self._names)

    @property
    def segments(self) -> list[tuple[str, tuple, np.ndarray]]:
        return [(n, self._arrays[n].shape, self._arrays[n]) for n in self._names]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def slice_of(self, name: str) -> slice:
        start = self._offsets[name]
        return slice(start, start + self._arrays[name].size)

    def flat(self) -> np.ndarray:
        if not self._names:
            return np.zeros(0)
        return np.concatenate([self._arrays[n].ravel() for n in self._names])

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_len,):
            raise ValueError(f"expected flat vector of length {self.total_len}, got shape {flat.shape}")
        return ParamVector(
            (n, flat[self.slice_of(n)].reshape(self._arrays[n].shape)) for n in self._names
        )

    def copy(self) -> "ParamVector":
        return self.with_flat(self.flat())

    def leaf(self, name: str) -> Node:
        return Node("param", value=self._arrays[name], name=name, segment=name)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self._names == other._names and all(
            self._arrays[n].shape == other._arrays[n].shape and np.array_equal(self._arrays[n], other._arrays[n])
            for n in self._names
        )

    def __repr__(self):
        return f"ParamVector({len(self._names)} segments, total_len={self.total_len})"


# --------------------------------------------------------------------------
# graph construction

def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def const(value, name: str | None = None) -> Node:
    return Node("const", value=np.asarray(value, dtype=np.float64), name=name)


def add(x, y) -> Node:
    return Node("add", (_as_node(x), _as_node(y)))


def sub(x, y) -> Node:
    return Node("sub", (_as_node(x), _as_node(y)))


def mul(x, y) -> Node:
    return Node("mul", (_as_node(x), _as_node(y)))


def matmul(x, y) -> Node:
    return Node("matmul", (_as_node(x), _as_node(y)))


def exp(x) -> Node:
    return Node("exp", (_as_node(x),))


def log(x, floor: float = LOG_FLOOR, on_clamp: Callable[[int], None] | None = None) -> Node:
    """Elementwise log; inputs below ``floor`` are clamped and reported to ``on_clamp``."""
    return Node("log", (_as_node(x),), floor=floor, on_clamp=on_clamp)


def tanh(x) -> Node:
    return Node("tanh", (_as_node(x),))


def square(x) -> Node:
    return Node("square", (_as_node(x),))


def mean(x) -> Node:
    return Node("mean", (_as_node(x),))


def softmax(x, tau: float = 1.0) -> Node:
    if not tau > 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    return Node("softmax", (_as_node(x),), tau=float(tau))


def wsum(weights, x) -> Node:
    """Sum of ``weights * x`` over the last (action) axis, keeping that axis."""
    return Node("wsum", (_as_node(weights), _as_node(x)))


def sg(x) -> StopGrad:
    return StopGrad(_as_node(x))


# --------------------------------------------------------------------------
# per-op forward / backward rules

def _broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, (a.shape, b.shape)) from None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _fwd(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op in ("add", "sub", "mul"):
        a, b = vals
        _broadcast(op, a, b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "matmul":
        a, b = vals
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0] or b.ndim > 2:
            raise ShapeError(op, (a.shape, b.shape))
        return a @ b
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        x = vals[0]
        floor = node.attrs["floor"]
        low = x < floor
        if low.any():
            callback = node.attrs.get("on_clamp")
            if callback is not None:
                callback(int(low.sum()))
            x = np.maximum(x, floor)
        return np.log(x)
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "square":
        return vals[0] * vals[0]
    if op == "mean":
        return np.asarray(vals[0].mean())
    if op == "softmax":
        x = vals[0]
        if x.ndim == 0:
            raise ShapeError(op, (x.shape,))
        z = x / node.attrs["tau"]
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if op == "wsum":
        w, x = vals
        if x.ndim == 0:
            raise ShapeError(op, (w.shape, x.shape))
        _broadcast(op, w, x)
        return (w * x).sum(axis=-1, keepdims=True)
    if op == "stop_grad":
        return vals[0]
    raise GraphError(f"unknown op '{op}'")


def _bwd(node: Node, g: np.ndarray) -> list[np.ndarray | None]:
    op = node.op
    pv = [p.value for p in node.parents]
    if op == "add":
        return [_unbroadcast(g, pv[0].shape), _unbroadcast(g, pv[1].shape)]
    if op == "sub":
        return [_unbroadcast(g, pv[0].shape), _unbroadcast(-g, pv[1].shape)]
    if op == "mul":
        a, b = pv
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if op == "matmul":
        a, b = pv
        if a.ndim == 1 and b.ndim == 1:
            return [g * b, g * a]
        if a.ndim == 1:
            return [b @ g, np.outer(a, g)]
        if b.ndim == 1:
            return [np.outer(g, b), a.T @ g]
        return [g @ b.T, a.T @ g]
    if op == "exp":
        return [g * node.value]
    if op == "log":
        x = pv[0]
        return [g / np.maximum(x, node.attrs["floor"])]
    if op == "tanh":
        return [g * (1.0 - node.value * node.value)]
    if op == "square":
        return [2.0 * g * pv[0]]
    if op == "mean":
        x = pv[0]
        return [np.full(x.shape, float(g) / max(x.size, 1))]
    if op == "softmax":
        s = node.value
        inner = (g * s).sum(axis=-1, keepdims=True)
        return [s * (g - inner) / node.attrs["tau"]]
    if op == "wsum":
        w, x = pv
        return [_unbroadcast(g * x, w.shape), _unbroadcast(g * w, x.shape)]
    if op == "stop_grad":
        return [None]
    raise GraphError(f"unknown op '{op}'")


# --------------------------------------------------------------------------
# passes

def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def forward(root: Node) -> np.ndarray:
    """Evaluate every unevaluated node under ``root`` and return the root value."""
    for node in _topo(root):
        if node.value is None:
            if not node.parents:
                raise GraphError(f"leaf '{node.op}' has no value")
            node.value = _fwd(node, [p.value for p in node.parents])
    return root.value


def backward(root: Node, params: ParamVector) -> np.ndarray:
    """Gradient of the scalar ``root`` w.r.t. ``params`` as a flat vector."""
    order = _topo(root)
    for node in order:
        if node.value is None:
            raise GraphError("backward called before forward on this graph")
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.value.shape}")
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, _bwd(node, node.grad)):
            if pg is None:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg

    flat = np.zeros(params.total_len)
    for node in order:
        if node.op != "param":
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        seg = node.attrs["segment"]
        if seg not in params:
            continue
        flat[params.slice_of(seg)] += node.grad.ravel()
    return flat


def finite_diff_grad(f: Callable[[ParamVector], float], params: ParamVector, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(θ+δe_i) - f(θ-δe_i)) / 2δ`` per coordinate."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    theta = params.flat()
    out = np.empty_like(theta)
    for i in range(theta.size):
        saved = theta[i]
        theta[i] = saved + step
        hi = float(f(params.with_flat(theta)))
        theta[i] = saved - step
        lo = float(f(params.with_flat(theta)))
        theta[i] = saved
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise AutodiffError(f"non-finite function value while perturbing coordinate {i}")
        out[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(x: np.ndarray, y: np.ndarray) -> float:
    """Sup-norm difference scaled by the larger sup-norm of the two vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scale = max(np.abs(x).max(initial=0.0), np.abs(y).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(x - y).max() / scale)
