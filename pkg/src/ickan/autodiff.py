"""Reverse-mode automatic differentiation over numpy arrays, plus Adam.

Every operation is available as a plain function (``relu(x)``, ``cumsum(x)``,
...).  Called on numpy arrays the function simply evaluates; called with at
least one :class:`Var` it appends a node to that variable's :class:`Tape`.
One reverse sweep (:func:`backward`) then yields the gradient of a scalar
output with respect to every :class:`Parameter` used on the tape.

Subgradient conventions: ``max(u, 0)`` has derivative 0 at ``u == 0``; the
binary ``maximum``/``minimum`` route ties to their first argument.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from . import _kernels

log = logging.getLogger(__name__)


class Parameter:
    """A named trainable array with an adjoint buffer of the same shape."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def register(kind: str, forward: Callable):
    """Register ``kind``; the decorated function is its vector-Jacobian product.

    The backward receives ``(g, out, *inputs, **attrs)`` and returns one
    gradient (or None) per input.
    """

    def deco(backward):
        OPS[kind] = OpDef(forward, backward)
        return backward

    return deco


class Node:
    __slots__ = ("kind", "parents", "attrs", "value", "param")

    def __init__(self, kind, parents, attrs, value, param=None):
        self.kind = kind
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.param = param


class Tape:
    """Append-only record of evaluated operations (parents always precede children)."""

    def __init__(self):
        self.nodes: list[Node] = []
        # node index per parameter id; storing indices rather than Var handles
        # keeps the tape free of reference cycles, so it is freed promptly
        self._params: dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: Node) -> "Var":
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        return self._append(Node("const", (), {}, np.asarray(value, dtype=float)))

    def param(self, p: Parameter) -> "Var":
        """Leaf for ``p``; repeated calls return the same node."""
        index = self._params.get(id(p))
        if index is not None:
            return Var(self, index)
        v = self._append(Node("param", (), {}, p.value, param=p))
        self._params[id(p)] = v.index
        return v

    def record(self, kind: str, parents, **attrs) -> "Var":
        if kind not in OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        handles = []
        for p in parents:
            if isinstance(p, Var):
                if p.tape is not self or not 0 <= p.index < len(self.nodes):
                    raise ValueError("parent handle does not belong to this tape")
                handles.append(p)
            else:
                handles.append(self.const(p))
        value = OPS[kind].forward(*[h.value for h in handles], **attrs)
        return self._append(Node(kind, tuple(h.index for h in handles), attrs, value))


class Var:
    """Handle to a tape node; supports the usual arithmetic operators."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected op

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.nodes[self.index].kind}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return asum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def apply(kind: str, *args, **attrs):
    """Evaluate ``kind`` eagerly, or record it if any argument is a Var."""
    for a in args:
        if isinstance(a, Var):
            return a.tape.record(kind, args, **attrs)
    if kind not in OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    return OPS[kind].forward(*[np.asarray(a, dtype=float) for a in args], **attrs)


def record(tape: Tape, kind: str, parents, **attrs) -> Var:
    return tape.record(kind, parents, **attrs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


@register("add", np.add)
def _add_b(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@register("sub", np.subtract)
def _sub_b(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@register("mul", np.multiply)
def _mul_b(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("div", np.divide)
def _div_b(g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


@register("neg", np.negative)
def _neg_b(g, out, a):
    return (-g,)


def _power_f(a, n):
    if int(n) != n:
        raise ValueError("only integer powers are supported")
    return a ** int(n)


@register("power", _power_f)
def _power_b(g, out, a, n):
    n = int(n)
    return (g * n * a ** (n - 1),)


@register("relu", lambda a: np.maximum(a, 0.0))
def _relu_b(g, out, a):
    return (g * (a > 0),)


@register("max_const", lambda a, c: np.maximum(a, c))
def _max_const_b(g, out, a, c):
    return (g * (a > c),)


@register("maximum", np.maximum)
def _maximum_b(g, out, a, b):
    first = a >= b
    return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)


@register("minimum", np.minimum)
def _minimum_b(g, out, a, b):
    first = a <= b
    return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)


def _sigmoid_f(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@register("sigmoid", _sigmoid_f)
def _sigmoid_b(g, out, a):
    return (g * out * (1.0 - out),)


@register("softplus", lambda a: np.logaddexp(0.0, a))
def _softplus_b(g, out, a):
    return (g * _sigmoid_f(a),)


@register("exp", np.exp)
def _exp_b(g, out, a):
    return (g * out,)


@register("log", np.log)
def _log_b(g, out, a):
    return (g / a,)


# -- reductions and shape ops -------------------------------------------------


@register("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims))
def _sum_b(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _extreme_b(g, a, axis, pick):
    idx = np.expand_dims(pick(a, axis=axis), axis)
    ga = np.zeros_like(a)
    np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
    return (ga,)


@register("amin", lambda a, axis: np.min(a, axis=axis))
def _amin_b(g, out, a, axis):
    return _extreme_b(g, a, axis, np.argmin)


@register("amax", lambda a, axis: np.max(a, axis=axis))
def _amax_b(g, out, a, axis):
    return _extreme_b(g, a, axis, np.argmax)


@register("cumsum", lambda a, axis=-1: np.cumsum(a, axis=axis))
def _cumsum_b(g, out, a, axis=-1):
    return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)


@register("reshape", lambda a, shape: np.reshape(a, shape))
def _reshape_b(g, out, a, shape):
    return (g.reshape(a.shape),)


@register("transpose", lambda a, axes=None: np.transpose(a, axes))
def _transpose_b(g, out, a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return (np.transpose(g, inv),)


@register("getitem", lambda a, key: a[key])
def _getitem_b(g, out, a, key):
    ga = np.zeros_like(a)
    np.add.at(ga, key, g)
    return (ga,)


def _concat_f(*arrays, axis=0):
    return np.concatenate(arrays, axis=axis)


@register("concat", _concat_f)
def _concat_b(g, out, *arrays, axis=0):
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _take_f(a, idx):
    if a.ndim == 2 and idx.ndim == 2 and a.shape[0] == idx.shape[0]:
        return _kernels.gather_rows(np.ascontiguousarray(a), np.ascontiguousarray(idx, dtype=np.intp))
    return np.take_along_axis(a, idx, axis=-1)


@register("take", _take_f)
def _take_b(g, out, a, idx):
    n = a.shape[-1]
    rows = int(np.prod(idx.shape[:-1], dtype=np.int64))
    flat = idx.reshape(rows, -1) + (np.arange(rows) * n)[:, None]
    ga = np.bincount(flat.ravel(), weights=g.ravel(), minlength=rows * n)
    return (ga.reshape(a.shape),)


# -- linear algebra -----------------------------------------------------------


@register("matmul", np.matmul)
def _matmul_b(g, out, a, b):
    if a.ndim == 1 or b.ndim == 1:
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = np.matmul(a2, b2)
        g2 = g.reshape(g2.shape)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        return _unbroadcast(ga, a2.shape).reshape(a.shape), _unbroadcast(gb, b2.shape).reshape(b.shape)
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _affine_f(*xs, coeffs, const=0.0):
    out = np.asarray(const, dtype=float)
    for c, x in zip(coeffs, xs):
        out = out + c * x
    return out


@register("affine", _affine_f)
def _affine_b(g, out, *xs, coeffs, const=0.0):
    return tuple(_unbroadcast(c * g, x.shape) for c, x in zip(coeffs, xs))


def _contract_f(vals, coeffs, cols):
    return _kernels.contract(
        np.ascontiguousarray(vals), np.ascontiguousarray(coeffs), np.ascontiguousarray(cols, dtype=np.intp)
    )


@register("basis_contract", _contract_f)
def _contract_b(g, out, vals, coeffs, cols):
    return _kernels.contract_adjoints(
        np.ascontiguousarray(g),
        np.ascontiguousarray(vals),
        np.ascontiguousarray(coeffs),
        np.ascontiguousarray(cols, dtype=np.intp),
    )


# -- public functional surface ------------------------------------------------


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def div(a, b):
    return apply("div", a, b)


def neg(a):
    return apply("neg", a)


def power(a, n: int):
    return apply("power", a, n=n)


def relu(a):
    return apply("relu", a)


def max_const(a, c: float):
    return apply("max_const", a, c=c)


def maximum(a, b):
    return apply("maximum", a, b)


def minimum(a, b):
    return apply("minimum", a, b)


def sigmoid(a):
    return apply("sigmoid", a)


def softplus(a):
    return apply("softplus", a)


def exp(a):
    return apply("exp", a)


def log_(a):
    return apply("log", a)


def asum(a, axis=None, keepdims=False):
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return asum(a, axis=axis) * (1.0 / n)


def dot(a, b):
    """Inner product along the last axis."""
    return asum(mul(a, b), axis=-1)


def amin(a, axis=-1):
    return apply("amin", a, axis=axis)


def amax(a, axis=-1):
    return apply("amax", a, axis=axis)


def cumsum(a, axis=-1):
    return apply("cumsum", a, axis=axis)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply("transpose", a, axes=axes)


def getitem(a, key):
    return apply("getitem", a, key=key)


def concat(arrays, axis=0):
    return apply("concat", *arrays, axis=axis)


def take(a, idx):
    """``take_along_axis`` on the last axis with integer ``idx``."""
    return apply("take", a, idx=np.asarray(idx))


def matmul(a, b):
    return apply("matmul", a, b)


def affine(xs, coeffs, const=0.0):
    return apply("affine", *xs, coeffs=tuple(coeffs), const=const)


def basis_contract(vals, coeffs, cols):
    """Sparse-row contraction ``out[b, k] = sum_m vals[b, m] * coeffs[k, cols[b, m]]``."""
    return apply("basis_contract", vals, coeffs, cols=np.asarray(cols))


# -- reverse sweep ------------------------------------------------------------


def backward(tape: Tape, output: Var) -> dict[Parameter, np.ndarray]:
    """Propagate adjoints from scalar ``output``; set and return parameter gradients.

    The tape is not modified, so sweeping twice gives identical adjoints.
    """
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if np.size(output.value) != 1:
        raise ValueError("backward requires a scalar output")
    nodes = tape.nodes
    adj: list = [None] * (output.index + 1)
    adj[output.index] = np.ones_like(output.value)
    grads: dict[Parameter, np.ndarray] = {}
    for i in range(output.index, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        if node.param is not None:
            grads[node.param] = g
            continue
        if not node.parents:
            continue
        inputs = [nodes[j].value for j in node.parents]
        pgrads = OPS[node.kind].backward(g, node.value, *inputs, **node.attrs)
        for j, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            adj[j] = pg if adj[j] is None else adj[j] + pg
    for p, g in grads.items():
        p.grad = np.array(np.broadcast_to(g, p.value.shape), dtype=float)
    return grads


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params, state: AdamState) -> bool:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    A non-finite gradient skips the update (counted in ``state.skipped``).
    """
    params = list(params)
    if not all(np.all(np.isfinite(p.grad)) for p in params):
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        for p in params:
            p.grad = np.zeros_like(p.value)
        return False
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p in params:
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        m, v, g = state.m[key], state.v[key], p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.grad = np.zeros_like(p.value)
    return True


class Adam:
    """Adam bound to a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> bool:
        return adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.value)

    @property
    def skipped(self) -> int:
        return self.state.skipped
