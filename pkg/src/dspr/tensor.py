"""Dense float64 tensors with tape-based reverse-mode differentiation.

Broadcasting is deliberately narrow. Binary elementwise ops accept

* two operands of identical shape,
* a scalar (python number or 0-d tensor) on either side,
* a trailing block: one operand's shape equals the trailing axes of the
  other's (row-vector biases are the common case).

Anything else raises :class:`ShapeError`. Explicit :func:`expand` covers the
remaining cases so shape bugs in graph code surface immediately.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, NonFiniteError, ShapeError

NEG_INF = -1e30  # pre-softmax mask sentinel; exp(NEG_INF - max) == 0.0 exactly


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One executed differentiable op: inputs, output and its vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node = Node(op, tuple(inputs), out, vjp)
    return out


# -- tape ---------------------------------------------------------------------


class Tape:
    """Ops reachable from a root, in topological order (inputs before users)."""

    def __init__(self, ops: list[Node]):
        self.ops = ops

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(order)
        stack = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def run_backward(self, root: Tensor, seed: np.ndarray) -> list[Node]:
        grads: dict[int, np.ndarray] = {id(root): seed}
        visited = []
        for node in reversed(self.ops):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            visited.append(node)
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        return visited


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return tape
    tape.run_backward(loss, np.ones_like(loss.data))
    return tape


# -- broadcasting helpers -----------------------------------------------------


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    return Tensor(x)


def _pair_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "b_trailing"
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return "a_trailing"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _pair_kind(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _pair_kind(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _pair_kind(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), vjp)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NonFiniteError("reciprocal of zero")
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _make("reciprocal", out, (a,), vjp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1.0),)

    return _make("power", ad**p, (a,), vjp)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (2.0 * g * ad,)

    return _make("square", ad * ad, (a,), vjp)


# -- elementwise unary --------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make("relu", np.where(mask, a.data, 0.0), (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", s, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return _make("tanh", t, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def vjp(g):
        return (g * e,)

    return _make("exp", e, (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make("log", np.log(ad), (a,), vjp)


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)

    def vjp(g):
        return (g * sgn,)

    return _make("abs", np.abs(a.data), (a,), vjp)


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape

    def vjp(g):
        return (g.reshape(src),)

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make("transpose", np.transpose(a.data, axes), (a,), vjp)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition (explicit broadcast)."""
    axis = axis if axis >= 0 else a.ndim + 1 + axis
    new = np.expand_dims(a.data, axis)
    shape = list(new.shape)
    shape[axis] = n

    def vjp(g):
        return (g.sum(axis=axis),)

    return _make("expand", np.broadcast_to(new, shape), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis if axis >= 0 else nd + axis
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(
                f"concat: shapes {ref} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items
    )


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    data = a.data[idx]
    return _make("getitem", np.array(data, dtype=np.float64), (a,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` (..., m, k) times ``b`` (k, n) shared, or (..., k, n) with equal batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner axes disagree for {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes disagree for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), vjp)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis after adding ``mask`` (array or tensor).

    Mask entries at or below ``NEG_INF`` (including ``-inf``) give exact zeros.
    """
    inputs = [x]
    z = x.data
    if mask is not None:
        if isinstance(mask, Tensor):
            if mask.shape != x.shape:
                raise ShapeError(f"softmax: mask {mask.shape} vs input {x.shape}")
            inputs.append(mask)
            z = z + mask.data
        else:
            m = np.maximum(np.asarray(mask, dtype=np.float64), NEG_INF)
            if m.shape != x.shape:
                raise ShapeError(f"softmax: mask {m.shape} vs input {x.shape}")
            z = z + m
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        gz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        return (gz, gz) if len(inputs) == 2 else (gz,)

    return _make("softmax", s, inputs, vjp)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x, mask)


def moving_average(x: Tensor, kernel: int, axis: int = -2) -> Tensor:
    """Edge-padded centred moving average along ``axis``."""
    if kernel < 1 or kernel % 2 == 0:
        raise ContractError(f"moving average kernel must be odd and positive, got {kernel}")
    ax = axis if axis >= 0 else x.ndim + axis
    moved = np.moveaxis(x.data, ax, 0)
    mshape = moved.shape
    flat = np.ascontiguousarray(moved.reshape(mshape[0], -1))
    out = np.moveaxis(kernels.moving_average(flat, kernel).reshape(mshape), 0, ax)

    def vjp(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, 0).reshape(mshape[0], -1))
        back = kernels.moving_average_adjoint(gm, kernel).reshape(mshape)
        return (np.moveaxis(back, 0, ax),)

    return _make("moving_average", np.ascontiguousarray(out), (x,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    return mean(square(pred - target))


# -- finite-difference oracle -------------------------------------------------


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                   coords: Iterable[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. ``arr`` (perturbed in place).

    Entries outside ``coords`` are left as NaN.
    """
    grad = np.full(arr.shape, np.nan)
    idxs = coords if coords is not None else np.ndindex(arr.shape)
    for i in idxs:
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the larger gradient magnitude."""
    sel = ~np.isnan(numeric)
    a, n = analytic[sel], numeric[sel]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-10)
    return float(np.abs(a - n).max() / scale)
