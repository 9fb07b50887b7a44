"""Reverse-mode automatic differentiation over small dense float64 tensors.

Backward rules are written with the same differentiable primitives used in
the forward pass, so running ``grad(..., create_graph=True)`` records the
backward computation on the tape and the returned gradients can be
differentiated again.  That is what lets losses built out of input
gradients be minimised with respect to model parameters.

Shapes must match exactly for elementwise ops; the only implicit
broadcast is a 0-d tensor combined with a tensor of any shape.  Use
:func:`expand` when a vector has to be repeated along an axis.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tape:
    """Per-thread recording state.

    Nodes are not stored in a central list; each recorded tensor keeps a
    reference to its node, and node ids come from a monotone counter, so
    parents always carry smaller ids than their children.
    """

    def __init__(self):
        self.enabled = True
        self._ids = itertools.count()

    def next_id(self) -> int:
        return next(self._ids)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def recording(enabled: bool):
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = enabled
    try:
        yield
    finally:
        tape.enabled = prev


def no_grad():
    return recording(False)


class Node:
    __slots__ = ("id", "op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable | None):
        self.id = current_tape().next_id()
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad or _node is not None)
        if self.requires_grad and _node is None:
            _node = Node("leaf", (), None)
        self._node = _node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return None if self._node is None else self._node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum_(self, axis)

    def max(self, axis: int) -> "Tensor":
        return max_(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    if current_tape().enabled and any(p.requires_grad for p in parents):
        return Tensor(value, _node=Node(op, parents, backward))
    return Tensor(value)


def _check_elementwise(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    # a 0-d operand that met a larger tensor receives the summed gradient
    if shape == () and g.shape != ():
        return sum_(g)
    return g


# --- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(neg(g), b.shape)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)

    def backward(g, need=(True, True)):
        return (_reduce_to(mul(g, b), a.shape) if need[0] else None,
                _reduce_to(mul(g, a), b.shape) if need[1] else None)

    return _make(a.data * b.data, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    return mul(a, Tensor(float(c)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)

    def backward(g, need=(True, True)):
        ga = _reduce_to(div(g, b), a.shape) if need[0] else None
        gb = _reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape) if need[1] else None
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), backward)


# --- elementwise unary --------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), "exp", (a,), backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = None

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(value, "sigmoid", (a,), backward)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), "tanh", (a,), backward)
    return out


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, "relu", (a,), lambda g: (mul(g, mask),))


clamp_min_zero = relu


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (mul(g, mask),))


# --- linear algebra and shape -------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: operand shapes {a.shape} and {b.shape} do not conform")

    def backward(g, need=(True, True)):
        return (matmul(g, transpose(b)) if need[0] else None,
                matmul(transpose(a), g) if need[1] else None)

    return _make(a.data @ b.data, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return _make(value, "reshape", (a,), lambda g: (reshape(g, a.shape),))


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
    if axis is not None:
        axis %= a.ndim

    def backward(g):
        return (expand(g, a.shape, axis),)

    return _make(np.sum(a.data, axis=axis), "sum", (a,), backward)


def expand(a, shape, axis: int | None = None) -> Tensor:
    """Repeat ``a`` to ``shape`` by inserting ``axis``.

    With ``axis=None`` ``a`` must be 0-d and fills the whole shape.
    """
    a = as_tensor(a)
    shape = tuple(shape)
    if axis is None:
        if a.ndim != 0:
            raise ShapeError(f"expand: only a 0-d tensor fills {shape}, got {a.shape}")
        value = np.full(shape, float(a.data))
    else:
        axis %= len(shape)
        expected = shape[:axis] + shape[axis + 1:]
        if a.shape != expected:
            raise ShapeError(f"expand: shape {a.shape} cannot be repeated to {shape} on axis {axis}")
        value = np.broadcast_to(np.expand_dims(a.data, axis), shape).copy()
    return _make(value, "expand", (a,), lambda g: (sum_(g, axis),))


def max_(a, axis: int) -> Tensor:
    """Maximum along ``axis``; ties route the gradient to the lowest index."""
    a = as_tensor(a)
    axis %= a.ndim
    idx = np.argmax(a.data, axis=axis)
    onehot = np.zeros_like(a.data)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)
    mask = Tensor(onehot)

    def backward(g):
        return (mul(expand(g, a.shape, axis), mask),)

    return _make(np.max(a.data, axis=axis), "max", (a,), backward)


def take(a, index, axis: int = 0) -> Tensor:
    """Select entries of ``a`` along ``axis``; indices may repeat."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    axis %= a.ndim
    n = a.shape[axis]
    if index.ndim != 1:
        raise ShapeError(f"take: index must be 1-d, got shape {index.shape}")
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"take: index out of range for axis {axis} of size {n}")
    index = index % n if n else index
    return _make(np.take(a.data, index, axis=axis), "take", (a,),
                 lambda g: (scatter_add(g, index, axis, n),))


def scatter_add(g, index, axis: int, size: int) -> Tensor:
    """Adjoint of :func:`take`: accumulate rows of ``g`` into ``size`` slots."""
    g = as_tensor(g)
    index = np.asarray(index, dtype=np.int64)
    axis %= g.ndim
    shape = list(g.shape)
    shape[axis] = size
    value = np.zeros(shape)
    moved = np.moveaxis(value, axis, 0)
    np.add.at(moved, index, np.moveaxis(g.data, axis, 0))
    return _make(value, "scatter_add", (g,), lambda gg: (take(gg, index, axis),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis %= ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:axis] + t.shape[axis + 1:] != ref.shape[:axis] + ref.shape[axis + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(take(g, np.arange(bounds[k], bounds[k + 1]), axis)
                     for k in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                 tuple(tensors), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis %= a.ndim
    shifted = sub(a, expand(max_(a, axis), a.shape, axis))
    e = exp(shifted)
    return div(e, expand(sum_(e, axis), a.shape, axis))


# --- differentiation ----------------------------------------------------------

_PRUNABLE = frozenset({"mul", "div", "matmul"})


def _topo(output: Tensor) -> list[Node]:
    seen = {}
    stack = [output._node]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for p in node.parents:
            if p._node is not None and p._node.id not in seen:
                stack.append(p._node)
    return [seen[k] for k in sorted(seen, reverse=True)]


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """d output / d each tensor in ``wrt``.

    Tensors that do not influence ``output`` get a zero gradient.  With
    ``create_graph`` the returned tensors are themselves on the tape.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ShapeError(f"grad: output must be a scalar, got shape {output.shape}")
    if output._node is None:
        return [Tensor(np.zeros(w.shape)) for w in wrt]

    nodes = _topo(output)
    # only propagate along paths that end at a requested tensor
    relevant = {w._node.id for w in wrt if w._node is not None}
    for node in reversed(nodes):
        if any(p._node is not None and p._node.id in relevant for p in node.parents):
            relevant.add(node.id)

    grads: dict[int, Tensor] = {output._node.id: Tensor(np.ones(output.shape))}
    with recording(create_graph):
        for node in nodes:
            g = grads.get(node.id)
            if g is None or node.backward is None or node.id not in relevant:
                continue
            need = tuple(p._node is not None and p._node.id in relevant for p in node.parents)
            if node.op in _PRUNABLE:
                pgs = node.backward(g, need)
            else:
                pgs = node.backward(g)
            for parent, pg, wanted in zip(node.parents, pgs, need):
                if pg is None or not wanted:
                    continue
                pid = parent._node.id
                grads[pid] = pg if pid not in grads else add(grads[pid], pg)

    out = []
    for w in wrt:
        g = grads.get(w.node_id) if w._node is not None else None
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    return out


def check_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# --- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params[name].data`` in place."""
    for name, g in grads.items():
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != params[name].shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam: non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
