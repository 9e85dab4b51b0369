"""Reverse-mode differentiation over recorded numpy computations.

Every op returns a :class:`Node` that remembers its inputs and a closure
mapping the upstream gradient to input gradients. :func:`backward` walks
the recorded graph in reverse topological order. Graphs are rebuilt on
each forward pass and dropped afterwards.

Nodes that cannot reach a trainable :class:`Parameter` record nothing,
so frozen weights cost no backward work.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor_core import DTYPE

__all__ = [
    "Node",
    "Parameter",
    "GraphError",
    "no_grad",
    "record",
    "lift",
    "backward",
    "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "sigmoid", "silu", "matmul", "tensordot", "reshape", "transpose",
    "sum", "mean", "concat", "softmax", "mse_loss",
]

_ids = itertools.count()
_state = threading.local()


class GraphError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward closures."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    def __init__(self, value, op: str = "const", inputs: Sequence["Node"] = (),
                 backward_fn: Callable | None = None, requires_grad: bool = False):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    __array_priority__ = 100

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
    def __pow__(self, p): return power(self, p)


class Parameter(Node):
    """A named leaf. Frozen parameters never receive gradients."""

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, dtype=DTYPE), op="param")
        self.name = name
        self.trainable = trainable

    @property
    def requires_grad(self):
        return self.trainable

    @requires_grad.setter
    def requires_grad(self, _):
        pass

    @property
    def tensor(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{flag})"


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=DTYPE))


def record(value, op: str, inputs: Sequence[Node], backward_fn: Callable) -> Node:
    """Wrap ``value`` as the output of ``op``.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    if _grad_enabled() and any(i.requires_grad for i in inputs):
        return Node(value, op, inputs, backward_fn, True)
    return Node(value, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    return record(a.value + b.value, "add", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    return record(a.value - b.value, "sub", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    return record(a.value * b.value, "mul", (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape),
                             _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.value / b.value
    return record(out, "div", (a, b),
                  lambda g: (_unbroadcast(g / b.value, a.shape),
                             _unbroadcast(-g * out / b.value, b.shape)))


def neg(a) -> Node:
    a = lift(a)
    return record(-a.value, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Node:
    a = lift(a)
    return record(a.value ** p, "pow", (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a) -> Node:
    a = lift(a)
    out = np.exp(a.value)
    return record(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = lift(a)
    return record(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def sqrt(a) -> Node:
    a = lift(a)
    out = np.sqrt(a.value)
    return record(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Node:
    a = lift(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return record(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Node:
    a = lift(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    return record(a.value * s, "silu", (a,),
                  lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return record(a.value @ b.value, "matmul", (a, b), bw)


def tensordot(a, b, axes) -> Node:
    a, b = lift(a), lift(b)
    ax_a, ax_b = (list(axes[0]), list(axes[1]))
    free_a = [i for i in range(a.ndim) if i not in ax_a]
    free_b = [i for i in range(b.ndim) if i not in ax_b]
    nfa, nfb = len(free_a), len(free_b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            r = np.tensordot(g, b.value, axes=(list(range(nfa, nfa + nfb)), free_b))
            # r axes: free_a, then b's contracted axes in ascending order
            src = free_a + [ax_a[ax_b.index(j)] for j in sorted(ax_b)]
            ga = np.transpose(r, np.argsort(src))
        if b.requires_grad:
            r = np.tensordot(a.value, g, axes=(free_a, list(range(nfa))))
            src = [ax_b[ax_a.index(i)] for i in sorted(ax_a)] + free_b
            gb = np.transpose(r, np.argsort(src))
        return ga, gb

    return record(np.tensordot(a.value, b.value, axes=(ax_a, ax_b)), "tensordot", (a, b), bw)


# -- shape ---------------------------------------------------------------------

def reshape(a, shape) -> Node:
    a = lift(a)
    return record(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Node:
    a = lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.value, axes), "transpose", (a,),
                  lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> Node:
    xs = [lift(x) for x in xs]
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return record(np.concatenate([x.value for x in xs], axis=axis), "concat", xs,
                  lambda g: tuple(np.split(g, splits, axis=axis)))


# -- reductions ----------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = lift(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.sum(a.value, axis=axis, keepdims=keepdims), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = lift(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def softmax(a, axis: int = -1) -> Node:
    a = lift(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record(out, "softmax", (a,),
                  lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def mse_loss(pred, target) -> Node:
    d = sub(pred, target)
    return mean(mul(d, d))


# -- driver --------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            state[node.id] = 2
            order.append(node)
            continue
        s = state.get(node.id)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[node.id] = 1
        stack.append((node, True))
        for inp in node.inputs:
            if not inp.requires_grad:
                continue
            si = state.get(inp.id)
            if si == 1:
                raise GraphError(f"cycle detected at {inp!r}")
            if si is None:
                stack.append((inp, False))
    return order


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Return d(loss)/d(p) for every trainable parameter reachable from ``loss``."""
    if not isinstance(loss, Node):
        raise GraphError("loss must be a Node")
    if loss.value.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        node.grad = g
        if isinstance(node, Parameter):
            if node.trainable:
                if node.name in out:
                    raise GraphError(f"two parameters share the name {node.name!r}")
                out[node.name] = g
            continue
        if node._backward is None:
            continue
        for inp, gi in zip(node.inputs, node._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return out


def finite_diff_check(loss_fn: Callable[[], Node], param: Parameter, eps: float = 1e-6,
                      indices: Iterable[tuple] | None = None) -> float:
    """Compare analytic and central-difference gradients of ``loss_fn`` w.r.t. ``param``.

    Returns ``max |analytic - numeric| / (|numeric| + 1e-12)`` over the
    checked entries (all entries unless ``indices`` is given).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = backward(loss_fn()).get(param.name)
    if analytic is None:
        analytic = np.zeros_like(param.value)
    if indices is None:
        indices = list(np.ndindex(param.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            orig = param.value[idx]
            param.value[idx] = orig + eps
            fp = float(loss_fn().value)
            param.value[idx] = orig - eps
            fm = float(loss_fn().value)
            param.value[idx] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[idx] - num) / (abs(num) + 1e-12))
    return worst
