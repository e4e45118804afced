"""Reverse-mode automatic differentiation on a Wengert tape of numpy arrays.

Every operation appends a :class:`Node` to its :class:`Tape` and evaluates
eagerly. The tape keeps enough information (op kind, parents, attributes) to
re-run the whole program with new variable bindings via :meth:`Tape.forward`
and to accumulate vector-Jacobian products in reverse insertion order via
:meth:`Tape.backward`.

The module-level math functions (:func:`exp`, :func:`log`, :func:`logsumexp`,
...) are polymorphic: given plain arrays they return plain arrays, given a
node they record on the node's tape. Numerical code written against them runs
both untracked and under the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Union

import numpy as np

__all__ = [
    "NonFiniteError",
    "Node",
    "Tape",
    "GradientMap",
    "backward",
    "forward",
    "detach",
    "value_of",
    "is_node",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "absolute",
    "sum",
    "dot",
    "matmul",
    "maximum",
    "relu",
    "logsumexp",
    "sigmoid",
    "softmax_cross_entropy",
    "reshape",
    "transpose",
    "concatenate",
    "take",
    "straight_through",
]


class NonFiniteError(FloatingPointError):
    """A tape node evaluated to NaN or infinity."""


@dataclass(frozen=True)
class Op:
    name: str
    fwd: Callable[..., np.ndarray]
    # vjp(grad_out, out_value, *parent_values, **attrs) -> per-parent grads
    vjp: Optional[Callable[..., tuple]]


_OPS: Dict[str, Op] = {}


def _register(name, fwd, vjp):
    _OPS[name] = Op(name, fwd, vjp)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _shape(x):
    return np.shape(x)


# --- elementwise binary ----------------------------------------------------

_register(
    "add",
    lambda a, b: np.add(a, b),
    lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))),
)
_register(
    "sub",
    lambda a, b: np.subtract(a, b),
    lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))),
)
_register(
    "mul",
    lambda a, b: np.multiply(a, b),
    lambda g, out, a, b: (
        _unbroadcast(g * b, _shape(a)),
        _unbroadcast(g * a, _shape(b)),
    ),
)
_register(
    "div",
    lambda a, b: np.divide(a, b),
    lambda g, out, a, b: (
        _unbroadcast(g / b, _shape(a)),
        _unbroadcast(-g * out / b, _shape(b)),
    ),
)


def _max_vjp(g, out, a, b):
    # ties route the gradient to the first argument
    pick_a = np.greater_equal(a, b)
    return (
        _unbroadcast(np.where(pick_a, g, 0.0), _shape(a)),
        _unbroadcast(np.where(pick_a, 0.0, g), _shape(b)),
    )


_register("maximum", lambda a, b: np.maximum(a, b), _max_vjp)

# --- elementwise unary -----------------------------------------------------

_register("neg", lambda a: np.negative(a), lambda g, out, a: (-g,))
_register("exp", lambda a: np.exp(a), lambda g, out, a: (g * out,))
_register("log", lambda a: np.log(a), lambda g, out, a: (g / a,))
_register("square", lambda a: np.square(a), lambda g, out, a: (2.0 * a * g,))
_register("abs", lambda a: np.abs(a), lambda g, out, a: (g * np.sign(a),))


def _sigmoid(a):
    a = np.asarray(a, dtype=float)
    # split on sign to avoid overflow in exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


_register("sigmoid", _sigmoid, lambda g, out, a: (g * out * (1.0 - out),))

# --- reductions and linear algebra -----------------------------------------


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, _shape(a)).copy(),)


_register(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    _sum_vjp,
)
_register("dot", lambda a, b: np.dot(a, b), lambda g, out, a, b: (g * b, g * a))


def _matmul_vjp(g, out, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


_register("matmul", lambda a, b: np.matmul(a, b), _matmul_vjp)


def _logsumexp(a, axis=None, keepdims=False):
    a = np.asarray(a, dtype=float)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def _logsumexp_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return (g * np.exp(np.asarray(a) - out),)


_register("logsumexp", _logsumexp, _logsumexp_vjp)


def _softmax_xent(logits, labels=None):
    logits = np.asarray(logits, dtype=float)
    lse = _logsumexp(logits, axis=1)
    picked = logits[np.arange(logits.shape[0]), labels]
    return np.mean(lse - picked)


def _softmax_xent_vjp(g, out, logits, labels=None):
    logits = np.asarray(logits, dtype=float)
    probs = np.exp(logits - _logsumexp(logits, axis=1, keepdims=True))
    probs[np.arange(logits.shape[0]), labels] -= 1.0
    return (g * probs / logits.shape[0],)


_register("softmax_crossentropy", _softmax_xent, _softmax_xent_vjp)

# --- shape manipulation ----------------------------------------------------

_register(
    "reshape",
    lambda a, shape=None: np.reshape(a, shape),
    lambda g, out, a, shape=None: (np.reshape(g, _shape(a)),),
)
_register(
    "transpose",
    lambda a: np.transpose(a),
    lambda g, out, a: (np.transpose(g),),
)


def _take_vjp(g, out, a, index=None):
    grad = np.zeros(_shape(a))
    np.add.at(grad, index, g)
    return (grad,)


_register("take", lambda a, index=None: np.asarray(a)[index], _take_vjp)


def _concat_vjp(g, out, *parts, axis=0):
    sizes = np.cumsum([_shape(p)[axis] for p in parts])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


_register(
    "concatenate",
    lambda *parts, axis=0: np.concatenate(parts, axis=axis),
    _concat_vjp,
)

# value comes from attrs, gradient passes straight to the surrogate parent
_register(
    "straight_through",
    lambda a, value=None: np.array(value, dtype=float),
    lambda g, out, a, value=None: (_unbroadcast(g, _shape(a)),),
)


# ---------------------------------------------------------------------------


class Node:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "op", "parents", "attrs", "value", "name")
    __array_ufunc__ = None  # ndarray <op> Node defers to the Node's reflected op

    def __init__(self, tape, index, op, parents, attrs, value, name=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.name = name

    def __repr__(self):
        label = self.name or f"#{self.index}"
        return f"Node({label}, op={self.op}, shape={np.shape(self.value)})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def T(self):
        return transpose(self)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


class GradientMap(dict):
    """Mapping from variable nodes to ``d(output)/d(variable)`` arrays."""

    def named(self) -> Dict[str, np.ndarray]:
        return {node.name: grad for node, grad in self.items()}


class Tape:
    """An append-only list of nodes in evaluation order.

    Args:
        check_finite: raise :class:`NonFiniteError` as soon as any node
            evaluates to NaN or infinity.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, attrs, value, name=None):
        value = np.asarray(value, dtype=float)
        node = Node(self, len(self.nodes), op, tuple(parents), attrs, value, name)
        if self.check_finite and op != "constant":
            _require_finite(node)
        self.nodes.append(node)
        return node

    def variable(self, value, name: Optional[str] = None) -> Node:
        """Record a differentiable input."""
        return self._append("variable", (), {}, np.array(value, dtype=float), name)

    def constant(self, value, name: Optional[str] = None) -> Node:
        """Record a non-differentiable input."""
        return self._append("constant", (), {}, np.array(value, dtype=float), name)

    def apply(self, op: str, *parents, **attrs) -> Node:
        parent_nodes = tuple(
            p if isinstance(p, Node) else self.constant(p) for p in parents
        )
        for p in parent_nodes:
            if p.tape is not self:
                raise ValueError("cannot combine nodes from different tapes")
        value = _OPS[op].fwd(*(p.value for p in parent_nodes), **attrs)
        return self._append(op, parent_nodes, attrs, value)

    @property
    def variables(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "variable"]

    def forward(self, inputs: Mapping[Union[Node, str], object]) -> None:
        """Rebind variables and re-evaluate every node in insertion order."""
        by_name = {n.name: n for n in self.variables if n.name is not None}
        for key, value in inputs.items():
            node = by_name[key] if isinstance(key, str) else key
            if node.op != "variable":
                raise ValueError(f"{node!r} is not a variable")
            value = np.array(value, dtype=float)
            if value.shape != node.value.shape:
                raise ValueError(
                    f"shape mismatch for {node!r}: got {value.shape}"
                )
            node.value = value
        for node in self.nodes:
            if node.op in ("variable", "constant"):
                continue
            node.value = np.asarray(
                _OPS[node.op].fwd(*(p.value for p in node.parents), **node.attrs),
                dtype=float,
            )
            if self.check_finite:
                _require_finite(node)

    def backward(self, output: Node) -> GradientMap:
        """Accumulate ``d(output)/d(variable)`` for every variable on the tape."""
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if np.size(output.value) != 1:
            raise ValueError(
                f"backward needs a scalar output, got shape {output.shape}"
            )
        grads: Dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.parents:
                if node.op == "variable":
                    grads[node.index] = g if g is not None else np.zeros_like(node.value)
                continue
            parent_grads = _OPS[node.op].vjp(
                g, node.value, *(p.value for p in node.parents), **node.attrs
            )
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent.op == "constant":
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = np.asarray(pg, dtype=float)
        result = GradientMap()
        for node in self.nodes:
            if node.op == "variable":
                grad = grads.get(node.index)
                result[node] = (
                    np.zeros_like(node.value) if grad is None else grad.reshape(node.shape)
                )
        return result


def _require_finite(node):
    if not np.all(np.isfinite(node.value)):
        label = node.name or f"#{node.index}"
        raise NonFiniteError(f"non-finite value at node {label} (op {node.op})")


def forward(tape: Tape, inputs: Mapping[Union[Node, str], object]) -> None:
    tape.forward(inputs)


def backward(tape: Tape, output: Node) -> GradientMap:
    return tape.backward(output)


# --- polymorphic front end -------------------------------------------------


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x) -> np.ndarray:
    """The numeric value of a node, or the argument itself as an array."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def detach(x):
    """Return ``x``'s value as a constant: gradients stop here."""
    if isinstance(x, Node):
        return x.tape.constant(x.value.copy())
    return np.asarray(x, dtype=float)


def _dispatch(op, *args, **attrs):
    for a in args:
        if isinstance(a, Node):
            return a.tape.apply(op, *args, **attrs)
    return _OPS[op].fwd(*args, **attrs)


def add(a, b):
    return _dispatch("add", a, b)


def sub(a, b):
    return _dispatch("sub", a, b)


def mul(a, b):
    return _dispatch("mul", a, b)


def div(a, b):
    return _dispatch("div", a, b)


def neg(a):
    return _dispatch("neg", a)


def exp(a):
    return _dispatch("exp", a)


def log(a):
    return _dispatch("log", a)


def square(a):
    return _dispatch("square", a)


def absolute(a):
    return _dispatch("abs", a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _dispatch("sum", a, axis=axis, keepdims=keepdims)


def dot(a, b):
    return _dispatch("dot", a, b)


def matmul(a, b):
    return _dispatch("matmul", a, b)


def maximum(a, b):
    return _dispatch("maximum", a, b)


def relu(a):
    return _dispatch("maximum", a, 0.0)


def logsumexp(a, axis=None, keepdims=False):
    return _dispatch("logsumexp", a, axis=axis, keepdims=keepdims)


def sigmoid(a):
    return _dispatch("sigmoid", a)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` (batch x classes)."""
    labels = np.asarray(labels, dtype=np.int64)
    return _dispatch("softmax_crossentropy", logits, labels=labels)


def reshape(a, shape):
    return _dispatch("reshape", a, shape=tuple(shape) if np.ndim(shape) else shape)


def transpose(a):
    return _dispatch("transpose", a)


def take(a, index):
    return _dispatch("take", a, index=index)


def concatenate(parts: Iterable, axis: int = 0):
    return _dispatch("concatenate", *parts, axis=axis)


def straight_through(value, surrogate):
    """Evaluate to ``value`` while routing gradients into ``surrogate``."""
    value = np.asarray(value, dtype=float)
    if np.shape(value) != np.shape(value_of(surrogate)):
        raise ValueError("value and surrogate shapes differ")
    if isinstance(surrogate, Node):
        return surrogate.tape.apply("straight_through", surrogate, value=value)
    return value


# --- verification oracle ---------------------------------------------------


def finite_difference_gradient(fn, point, h: float = 1e-5):
    """Central-difference gradient of a scalar function.

    ``point`` is an array or a dict of arrays; the result has the same
    structure. ``fn`` receives the same structure and must be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(point, Mapping):
        base = {k: np.array(v, dtype=float) for k, v in point.items()}
        out = {}
        for key in base:
            def partial(x, key=key):
                return fn({**base, key: x})

            out[key] = finite_difference_gradient(partial, base[key], h)
        return out
    x = np.array(point, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(x.copy()))
        flat[i] = orig - h
        down = float(fn(x.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
