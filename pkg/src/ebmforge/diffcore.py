"""Dense float64 arrays with a define-by-run reverse-mode differentiation engine.

Every adjoint is written in terms of the same differentiable ops, so a
gradient computed with ``create_graph=True`` is itself a graph and can be
differentiated again. That is what lets a Langevin step, which contains
``grad_x E``, be backpropagated with respect to the energy parameters.

Shapes follow numpy broadcasting for the elementwise ops; ``matmul`` is
restricted to 2-D operands.
"""
from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node", "ParamSet", "Bindings",
    "DiffError", "ShapeError", "UnboundLeafError", "NonDifferentiableError",
    "constant", "leaf", "as_node",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "broadcast_to",
    "sum_to", "reshape", "transpose", "power", "exp", "log", "softplus",
    "sigmoid", "tanh", "square", "sqrt", "l2_norm", "avg_pool2d", "unpool2d",
    "gather", "scatter_add", "logsumexp", "floor", "stop_gradient", "custom_op",
    "gradient", "evaluate", "finite_difference_check", "dump_graph",
    "no_grad", "enable_grad", "is_grad_enabled", "checked", "REGISTRY",
]


class DiffError(Exception):
    pass


class ShapeError(DiffError, ValueError):
    pass


class UnboundLeafError(DiffError, KeyError):
    pass


class NonDifferentiableError(DiffError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _is_checked() -> bool:
    return getattr(_state, "checked", False)


@contextlib.contextmanager
def _set(attr, value):
    prev = getattr(_state, attr, None)
    setattr(_state, attr, value)
    try:
        yield
    finally:
        if prev is None:
            delattr(_state, attr)
        else:
            setattr(_state, attr, prev)


def no_grad():
    """Context in which new nodes are never recorded on the tape."""
    return _set("grad", False)


def enable_grad(flag: bool = True):
    return _set("grad", flag)


def checked(flag: bool = True):
    """Context in which constructing a non-finite value raises."""
    return _set("checked", flag)


class Node:
    """A value in the graph plus the closure that maps its adjoint to its parents'."""

    __slots__ = ("value", "parents", "vjp", "tag", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, tag="const", requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if _is_checked() and not np.all(np.isfinite(value)):
            raise DiffError(f"non-finite value produced by '{tag}'")
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.tag = tag
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        label = f" '{self.name}'" if self.name else ""
        return f"Node<{self.tag}{label} shape={self.shape}{flag}>"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return gather(self, idx)

    @property
    def T(self):
        return transpose(self)


def constant(value, name=None) -> Node:
    return Node(value, name=name)


def leaf(value, requires_grad=True, name=None) -> Node:
    return Node(value, tag="leaf", requires_grad=requires_grad, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


# op tag -> short description; drives the soundness sweep in the test suite
REGISTRY: dict[str, str] = {}


def _register(tag, doc):
    REGISTRY[tag] = doc


def _make(value, parents, vjp, tag) -> Node:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, tag, True)
    return Node(value, tag=tag)


def _unbroadcast(g: Node, shape) -> Node:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


def _check_broadcast(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)), "sub")


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
                 "mul")


def div(a, b) -> Node:
    return mul(a, power(b, -1.0))


def power(a, p: float) -> Node:
    """Elementwise ``a**p`` for a constant exponent."""
    a = as_node(a)
    p = float(p)
    if p == 0.0:
        return constant(np.ones_like(a.value))
    if p == 1.0:
        return a
    return _make(a.value ** p, (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),), "power")


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: (mul(g, mul(2.0, a)),), "square")


def sqrt(a) -> Node:
    return power(a, 0.5)


def exp(a) -> Node:
    a = as_node(a)

    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(a.value), (a,), vjp, "exp")
    return out


def log(a) -> Node:
    a = as_node(a)
    if _is_checked() and np.any(a.value <= 0):
        raise DiffError("log: non-positive argument")
    return _make(np.log(a.value), (a,), lambda g: (mul(g, power(a, -1.0)),), "log")


def softplus(a) -> Node:
    a = as_node(a)
    v = a.value
    value = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _make(value, (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def sigmoid(a) -> Node:
    a = as_node(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(value, (a,), vjp, "sigmoid")
    return out


def tanh(a) -> Node:
    a = as_node(a)

    def vjp(g):
        return (mul(g, sub(1.0, square(out))),)

    out = _make(np.tanh(a.value), (a,), vjp, "tanh")
    return out


def floor(a) -> Node:
    """Piecewise-constant op; any gradient that reaches it is an error."""
    a = as_node(a)

    def vjp(g):
        raise NonDifferentiableError("cannot differentiate through 'floor'")

    return _make(np.floor(a.value), (a,), vjp, "floor")


def stop_gradient(a) -> Node:
    """Pass the value through; contribute nothing to any gradient."""
    a = as_node(a)
    return Node(a.value, tag="stop_gradient")


# ----------------------------------------------------------------- structural

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), shape),)

    return _make(np.sum(a.value, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make(value, (a,), lambda g: (sum_to(g, a.shape),), "broadcast")


def sum_to(a, shape) -> Node:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast)."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1)
    value = np.sum(a.value, axis=axes, keepdims=True)
    value = value.reshape(shape)
    return _make(value, (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(value, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a) -> Node:
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _make(a.value.T, (a,), lambda g: (transpose(g),), "transpose")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def l2_norm(a, axis=-1) -> Node:
    """Euclidean norm along ``axis``; adjoint is undefined at the origin."""
    a = as_node(a)
    ax = axis % a.ndim
    shape = a.shape

    def vjp(g):
        unit = div(a, reshape(out, tuple(1 if i == ax else n for i, n in enumerate(shape))))
        return (mul(unit, reshape(g, tuple(1 if i == ax else n for i, n in enumerate(shape)))),)

    out = _make(np.sqrt(np.sum(a.value * a.value, axis=ax)), (a,), vjp, "l2_norm")
    return out


def avg_pool2d(a, factor: int) -> Node:
    """Non-overlapping average pooling over the last two axes."""
    a = as_node(a)
    factor = int(factor)
    if a.ndim < 2 or factor < 1 or a.shape[-2] % factor or a.shape[-1] % factor:
        raise ShapeError(f"avg_pool2d: extents {a.shape[-2:]} not divisible by {factor}")
    if factor == 1:
        return a
    h, w = a.shape[-2:]
    lead = a.shape[:-2]
    value = a.value.reshape(lead + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))
    return _make(value, (a,), lambda g: (unpool2d(g, factor),), "avg_pool2d")


def unpool2d(a, factor: int) -> Node:
    """Adjoint of ``avg_pool2d``: repeat each entry over its block, divided by factor**2."""
    a = as_node(a)
    value = np.repeat(np.repeat(a.value, factor, axis=-2), factor, axis=-1) / (factor * factor)
    return _make(value, (a,), lambda g: (avg_pool2d(g, factor),), "unpool2d")


def gather(a, index) -> Node:
    """Select along axis 0 with integer indices (or any numpy basic index)."""
    a = as_node(a)
    if isinstance(index, Node):
        raise DiffError("gather: index must be a constant integer array")
    try:
        value = a.value[index]
    except IndexError as err:
        raise ShapeError(f"gather: {err}") from None
    return _make(value, (a,), lambda g: (scatter_add(g, index, a.shape),), "gather")


def scatter_add(a, index, shape) -> Node:
    """Adjoint of ``gather``: accumulate ``a`` into zeros(shape) at ``index``."""
    a = as_node(a)
    value = np.zeros(shape)
    np.add.at(value, index, a.value)
    return _make(value, (a,), lambda g: (gather(g, index),), "scatter_add")


def logsumexp(a, axis=-1) -> Node:
    a = as_node(a)
    shift = np.max(a.value, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    return add(log(sum(exp(sub(a, shift)), axis=axis)), np.squeeze(shift, axis=axis))


def custom_op(tag: str, forward: Callable, adjoint: Callable, *inputs) -> Node:
    """Build a one-off op: ``forward`` maps input arrays to an array,
    ``adjoint(g, *input_nodes)`` returns parent adjoints as nodes."""
    nodes = tuple(as_node(x) for x in inputs)
    value = forward(*(n.value for n in nodes))
    return _make(value, nodes, lambda g: tuple(adjoint(g, *nodes)), tag)


for _tag, _doc in [
    ("add", "a + b"), ("sub", "a - b"), ("neg", "-a"), ("mul", "a * b"),
    ("power", "a ** p"), ("square", "a * a"), ("exp", "exp(a)"), ("log", "log(a)"),
    ("softplus", "log(1 + exp(a))"), ("sigmoid", "1 / (1 + exp(-a))"),
    ("tanh", "tanh(a)"), ("sum", "reduce sum"),
    ("broadcast", "broadcast_to"), ("sum_to", "unbroadcast"), ("reshape", "reshape"),
    ("transpose", "2-D transpose"), ("matmul", "2-D matrix product"),
    ("l2_norm", "Euclidean norm"), ("avg_pool2d", "average pooling"),
    ("unpool2d", "pooling adjoint"), ("gather", "index select"),
    ("scatter_add", "gather adjoint"), ("floor", "non-differentiable floor"),
]:
    _register(_tag, _doc)


# ------------------------------------------------------------------- gradient

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(root: Node, wrt, create_graph: bool = False):
    """Return d(root)/d(wrt) for a scalar ``root``.

    ``wrt`` may be a single node, a sequence of nodes, or a mapping of
    name -> node; the result mirrors that structure. With
    ``create_graph=True`` the returned gradients are recorded on the tape
    and can be differentiated again.
    """
    if root.shape != ():
        raise ShapeError(f"gradient: root must be a scalar, got shape {root.shape}")
    if isinstance(wrt, Node):
        targets = [wrt]
    elif isinstance(wrt, Mapping):
        targets = list(wrt.values())
    else:
        targets = list(wrt)

    grads: dict[int, Node] = {}
    if root.requires_grad:
        order = _topo_order(root)
        # only nodes lying on a path from some target up to the root matter
        relevant = {id(t) for t in targets}
        for node in order:
            if id(node) not in relevant and any(id(p) in relevant for p in node.parents):
                relevant.add(id(node))
        grads[id(root)] = constant(1.0)
        with enable_grad(create_graph):
            for node in reversed(order):
                if id(node) not in relevant:
                    continue
                g = grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                parent_grads = node.vjp(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or id(p) not in relevant:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in targets:
        g = grads.get(id(t))
        out.append(g if g is not None else constant(np.zeros_like(t.value)))
    if isinstance(wrt, Node):
        return out[0]
    if isinstance(wrt, Mapping):
        return OrderedDict(zip(wrt.keys(), out))
    return out


# ------------------------------------------------------------------ parameters

class ParamSet(Mapping):
    """Ordered, uniquely named parameter arrays."""

    def __init__(self, items=None):
        self._d: OrderedDict[str, np.ndarray] = OrderedDict()
        if items is None:
            return
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, value in pairs:
            if name in self._d:
                raise ValueError(f"duplicate parameter name '{name}'")
            self._d[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, k):
        return self._d[k]

    def __iter__(self):
        return iter(self._d)

    def __len__(self):
        return len(self._d)

    def __repr__(self):
        inner = ", ".join(f"{k}:{v.shape}" for k, v in self._d.items())
        return f"ParamSet({inner})"

    @property
    def count(self) -> int:
        return int(np.sum([v.size for v in self._d.values()])) if self._d else 0

    def shapes(self):
        return OrderedDict((k, v.shape) for k, v in self._d.items())

    def flatten(self) -> np.ndarray:
        if not self._d:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._d.values()])

    def unflatten(self, flat) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.count:
            raise ShapeError(f"unflatten: expected {self.count} values, got {flat.size}")
        out, i = [], 0
        for k, v in self._d.items():
            out.append((k, flat[i:i + v.size].reshape(v.shape)))
            i += v.size
        return ParamSet(out)

    def leaves(self, requires_grad=True) -> "OrderedDict[str, Node]":
        return OrderedDict((k, Node(v, tag="leaf", requires_grad=requires_grad, name=k))
                           for k, v in self._d.items())

    def constants(self) -> "OrderedDict[str, Node]":
        return self.leaves(requires_grad=False)

    def map(self, fn) -> "ParamSet":
        return ParamSet((k, fn(v)) for k, v in self._d.items())

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def combine(self, other: "ParamSet", fn) -> "ParamSet":
        if list(self) != list(other):
            raise ValueError("parameter sets have different names")
        return ParamSet((k, fn(v, other[k])) for k, v in self._d.items())

    def __add__(self, other):
        return self.combine(other, np.add)

    def __sub__(self, other):
        return self.combine(other, np.subtract)

    def scale(self, c: float) -> "ParamSet":
        return self.map(lambda v: c * v)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.flatten() ** 2)))

    def copy(self) -> "ParamSet":
        return self.map(np.copy)

    def equal(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(v, other[k]) for k, v in self._d.items())


class Bindings(Mapping):
    """Name -> node lookup for ``evaluate``; missing names raise ``UnboundLeafError``."""

    def __init__(self, nodes: Mapping[str, Node]):
        self._nodes = dict(nodes)

    def __getitem__(self, k):
        try:
            return self._nodes[k]
        except KeyError:
            raise UnboundLeafError(f"unbound leaf '{k}'") from None

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self):
        return len(self._nodes)


def evaluate(builder: Callable[[Bindings], Node], params: ParamSet | None = None, **inputs) -> np.ndarray:
    """Run ``builder`` on constant leaves for ``params`` and ``inputs``; return the value."""
    nodes = {}
    if params is not None:
        nodes.update(params.constants())
    nodes.update({k: constant(v, name=k) for k, v in inputs.items()})
    with no_grad():
        out = builder(Bindings(nodes))
    return np.array(as_node(out).value)


# ---------------------------------------------------------------------- checks

def finite_difference_check(f: Callable[[Node], Node], point, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + eps).

    ``f`` takes a node and returns a scalar node; the same callable drives
    both the tape gradient and the plain evaluations.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.array(point, dtype=np.float64)
    x = leaf(point)
    analytic = gradient(f(x), x).value
    flat = point.ravel()
    fd = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            up, down = flat.copy(), flat.copy()
            up[i] += eps
            down[i] -= eps
            fu = float(f(constant(up.reshape(point.shape))).value)
            fm = float(f(constant(down.reshape(point.shape))).value)
            if not (np.isfinite(fu) and np.isfinite(fm)):
                raise DiffError(f"non-finite function value at perturbed coordinate {i}")
            fd[i] = (fu - fm) / (2 * eps)
    a = analytic.ravel()
    return float(np.max(np.abs(a - fd) / (np.abs(a) + eps))) if a.size else 0.0


def dump_graph(root: Node) -> str:
    """Indented outline of the graph below ``root`` (tag, shape, requires-grad)."""
    lines, seen = [], {}

    def visit(node, depth):
        pad = "  " * depth
        flag = " *" if node.requires_grad else ""
        label = f" {node.name}" if node.name else ""
        if id(node) in seen:
            lines.append(f"{pad}{node.tag}{label} {node.shape}{flag} (see #{seen[id(node)]})")
            return
        seen[id(node)] = len(seen)
        lines.append(f"{pad}#{seen[id(node)]} {node.tag}{label} {node.shape}{flag}")
        for p in node.parents:
            visit(p, depth + 1)

    visit(root, 0)
    return "\n".join(lines)
