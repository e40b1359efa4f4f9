"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: primitives applied while a :class:`GradTape` is active are
recorded in creation order (which is a topological order of the graph), and
``tape.backward`` walks that list once in reverse. With no active tape the
same primitives evaluate as plain numpy calls, which is the fast path used
by samplers that do not need gradients.

Tensors are immutable value wrappers around C-contiguous float64 arrays and
are safe to share; a tape is confined to one logical thread of execution.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 tensor, row-major, immutable by convention."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Arithmetic sugar; all routes through the recorded primitives below.
    def __add__(self, other):
        return ops.add(self, _as_tensor(other))

    def __radd__(self, other):
        return ops.add(_as_tensor(other), self)

    def __sub__(self, other):
        return ops.sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return ops.sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return ops.neg(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("idx", "name", "inputs", "output", "kwargs")

    def __init__(self, idx, name, inputs, output, kwargs):
        self.idx = idx  # topological order id
        self.name = name
        self.inputs = inputs  # tuple[Tensor]
        self.output = output  # Tensor
        self.kwargs = kwargs


class GradTape:
    """Records primitive applications; replays and differentiates them.

    Use as a context manager. Nested tapes are allowed; only the innermost
    one records.
    """

    _stack: list["GradTape"] = []

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: dict[int, _Node] = {}  # id(output Tensor) -> node

    def __enter__(self) -> "GradTape":
        GradTape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = GradTape._stack.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("GradTape context exited out of order")
        return False

    @staticmethod
    def active() -> "GradTape | None":
        return GradTape._stack[-1] if GradTape._stack else None

    def _record(self, name, inputs, output, kwargs):
        node = _Node(len(self._nodes), name, inputs, output, kwargs)
        self._nodes.append(node)
        self._produced[id(output)] = node

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, output: Tensor, leaves: Sequence[Tensor]) -> dict:
        """Gradients of a scalar `output` w.r.t. each requested leaf.

        Leaves that do not influence the output get zero gradients.
        """
        if output.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = _VJP[node.name](g, node.inputs, node.output, **node.kwargs)
            for tensor, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = ig if acc is None else acc + ig
        out = {}
        for leaf in leaves:
            g = grads.get(id(leaf))
            out[id(leaf)] = Tensor(np.zeros_like(leaf.data) if g is None else g)
        return _GradMap(out)

    def replay(self) -> bool:
        """Re-execute every recorded primitive and verify outputs bit for bit."""
        values: dict[int, np.ndarray] = {}
        for node in self._nodes:
            arrays = [values.get(id(t), t.data) for t in node.inputs]
            redo = _FORWARD[node.name](arrays, **node.kwargs)
            if not np.array_equal(redo, node.output.data):  # pragma: no cover
                raise AssertionError(f"replay mismatch at node {node.idx} ({node.name})")
            values[id(node.output)] = redo
        return True


class _GradMap:
    """Gradient lookup keyed by leaf Tensor identity."""

    def __init__(self, by_id: dict):
        self._by_id = by_id

    def __getitem__(self, leaf: Tensor) -> Tensor:
        return self._by_id[id(leaf)]


# ---------------------------------------------------------------------------
# Primitive registry: forward(list of arrays, **kw) and vjp(g, inputs, out, **kw)

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _primitive(name):
    def deco(fwd):
        _FORWARD[name] = fwd
        return fwd

    return deco


def _vjp(name):
    def deco(fn):
        _VJP[name] = fn
        return fn

    return deco


def _apply(name, tensors, **kwargs) -> Tensor:
    out = Tensor(_FORWARD[name]([t.data for t in tensors], **kwargs))
    tape = GradTape.active()
    if tape is not None:
        tape._record(name, tuple(tensors), out, kwargs)
    return out


def _check_elementwise(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


@_primitive("add")
def _f_add(xs):
    return xs[0] + xs[1]


@_vjp("add")
def _b_add(g, inputs, out):
    return (_unbroadcast(g, inputs[0].shape), _unbroadcast(g, inputs[1].shape))


@_primitive("sub")
def _f_sub(xs):
    return xs[0] - xs[1]


@_vjp("sub")
def _b_sub(g, inputs, out):
    return (_unbroadcast(g, inputs[0].shape), _unbroadcast(-g, inputs[1].shape))


@_primitive("mul")
def _f_mul(xs):
    return xs[0] * xs[1]


@_vjp("mul")
def _b_mul(g, inputs, out):
    a, b = inputs
    return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))


@_primitive("neg")
def _f_neg(xs):
    return -xs[0]


@_vjp("neg")
def _b_neg(g, inputs, out):
    return (-g,)


@_primitive("scale")
def _f_scale(xs, c):
    return xs[0] * c


@_vjp("scale")
def _b_scale(g, inputs, out, c):
    return (g * c,)


@_primitive("matmul")
def _f_matmul(xs):
    return xs[0] @ xs[1]


@_vjp("matmul")
def _b_matmul(g, inputs, out):
    a, b = inputs
    ga = g @ np.swapaxes(b.data, -1, -2)
    gb = np.swapaxes(a.data, -1, -2) @ g
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


@_primitive("sum")
def _f_sum(xs, axis=None, keepdims=False):
    return np.sum(xs[0], axis=axis, keepdims=keepdims)


@_vjp("sum")
def _b_sum(g, inputs, out, axis=None, keepdims=False):
    a = inputs[0]
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


@_primitive("tanh")
def _f_tanh(xs):
    return np.tanh(xs[0])


@_vjp("tanh")
def _b_tanh(g, inputs, out):
    return (g * (1.0 - out.data * out.data),)


@_primitive("gelu")
def _f_gelu(xs):
    x = xs[0]
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


@_vjp("gelu")
def _b_gelu(g, inputs, out):
    x = inputs[0].data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


@_primitive("exp")
def _f_exp(xs):
    return np.exp(xs[0])


@_vjp("exp")
def _b_exp(g, inputs, out):
    return (g * out.data,)


@_primitive("sqrt")
def _f_sqrt(xs):
    return np.sqrt(xs[0])


@_vjp("sqrt")
def _b_sqrt(g, inputs, out):
    return (g * (0.5 / out.data),)


@_primitive("square")
def _f_square(xs):
    return xs[0] * xs[0]


@_vjp("square")
def _b_square(g, inputs, out):
    return (g * (2.0 * inputs[0].data),)


@_primitive("softmax")
def _f_softmax(xs):
    x = xs[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@_vjp("softmax")
def _b_softmax(g, inputs, out):
    y = out.data
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


@_primitive("concat")
def _f_concat(xs, axis=-1):
    return np.concatenate(xs, axis=axis)


@_vjp("concat")
def _b_concat(g, inputs, out, axis=-1):
    sizes = [t.shape[axis] for t in inputs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


@_primitive("reshape")
def _f_reshape(xs, shape=()):
    return np.ascontiguousarray(xs[0].reshape(shape))


@_vjp("reshape")
def _b_reshape(g, inputs, out, shape=()):
    return (g.reshape(inputs[0].shape),)


@_primitive("swap_last2")
def _f_swap_last2(xs):
    return np.ascontiguousarray(np.swapaxes(xs[0], -1, -2))


@_vjp("swap_last2")
def _b_swap_last2(g, inputs, out):
    return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)


class _Ops:
    """Primitive applications, recorded on the active tape if any."""

    @staticmethod
    def add(a: Tensor, b: Tensor) -> Tensor:
        _check_elementwise("add", a, b)
        return _apply("add", [a, b])

    @staticmethod
    def sub(a: Tensor, b: Tensor) -> Tensor:
        _check_elementwise("sub", a, b)
        return _apply("sub", [a, b])

    @staticmethod
    def mul(a: Tensor, b: Tensor) -> Tensor:
        _check_elementwise("mul", a, b)
        return _apply("mul", [a, b])

    @staticmethod
    def neg(a: Tensor) -> Tensor:
        return _apply("neg", [a])

    @staticmethod
    def scale(a: Tensor, c: float) -> Tensor:
        return _apply("scale", [a], c=float(c))

    @staticmethod
    def matmul(a: Tensor, b: Tensor) -> Tensor:
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(
                f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
            )
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        return _apply("matmul", [a, b])

    @staticmethod
    def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
        return _apply("sum", [a], axis=axis, keepdims=keepdims)

    @staticmethod
    def mean(a: Tensor) -> Tensor:
        return _apply("scale", [_apply("sum", [a], axis=None, keepdims=False)], c=1.0 / a.size)

    @staticmethod
    def tanh(a: Tensor) -> Tensor:
        return _apply("tanh", [a])

    @staticmethod
    def gelu(a: Tensor) -> Tensor:
        return _apply("gelu", [a])

    @staticmethod
    def exp(a: Tensor) -> Tensor:
        return _apply("exp", [a])

    @staticmethod
    def sqrt(a: Tensor) -> Tensor:
        return _apply("sqrt", [a])

    @staticmethod
    def square(a: Tensor) -> Tensor:
        return _apply("square", [a])

    @staticmethod
    def softmax(a: Tensor) -> Tensor:
        return _apply("softmax", [a])

    @staticmethod
    def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
        ref = tensors[0].shape
        for t in tensors[1:]:
            if len(t.shape) != len(ref):
                raise ValueError(
                    f"concat: rank mismatch between {ref} and {t.shape}"
                )
        return _apply("concat", list(tensors), axis=axis)

    @staticmethod
    def reshape(a: Tensor, shape) -> Tensor:
        return _apply("reshape", [a], shape=tuple(shape))

    @staticmethod
    def swap_last2(a: Tensor) -> Tensor:
        if a.ndim < 2:
            raise ValueError(f"swap_last2 requires rank >= 2, got {a.shape}")
        return _apply("swap_last2", [a])


ops = _Ops()
