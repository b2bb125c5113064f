"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray; primitive operations execute eagerly and,
when a ``Tape`` is active and some input requires gradients, append a node
(op name, input refs, output ref, backward closure) to the tape. Nodes are
stored in execution order, which is also a valid topological order, so
``Tape.backward`` is a single reverse sweep.

Conventions:
  - Outside any tape, operations never record and outputs never require
    gradients (cheap inference mode).
  - Python scalars mix freely with tensors and are treated as constants.
  - Reduction outputs (sum/mean) are checked for NaN/Inf on every call;
    full per-op checking is available via ``strict_finite_checks``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DiffcoreError",
    "ShapeError",
    "NonFiniteError",
    "strict_finite_checks",
    "add",
    "affine",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "log",
    "sin",
    "cos",
    "absolute",
    "square",
    "tensor_sum",
    "mean",
    "cumsum",
    "concat",
    "reshape",
    "transpose",
    "roll",
    "softmax",
    "upsample2x",
]


class DiffcoreError(Exception):
    """Base class for autodiff errors."""


class ShapeError(DiffcoreError):
    """Operand shapes are inconsistent with the op signature."""


class NonFiniteError(DiffcoreError):
    """An operation produced NaN or Inf."""


_TAPE_STACK: list["Tape"] = []
_STRICT_FINITE = False


@contextlib.contextmanager
def strict_finite_checks():
    """Context in which every primitive output is checked for NaN/Inf."""
    global _STRICT_FINITE
    prev = _STRICT_FINITE
    _STRICT_FINITE = True
    try:
        yield
    finally:
        _STRICT_FINITE = prev


class Tensor:
    """Dense array with optional gradient tracking.

    Attributes:
        data: the wrapped ndarray (any float dtype; float32 for training,
            float64 for gradient-check tests).
        requires_grad: whether gradients should flow to this tensor.
        grad: populated for leaf tensors by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Tensor sharing the same storage but cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; all route through the module-level primitives.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)


class Tape:
    """Ordered record of executed primitives for one backward pass.

    Insertion order is the topological order of the (acyclic) graph, so the
    reverse sweep visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.nodes.append((name, inputs, output, backward))

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar output w.r.t. every requires_grad tensor.

        Returns a mapping keyed by tensor identity; leaf tensors also get
        their ``.grad`` attribute set (accumulating if already present).
        """
        if output.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.data)
        }
        by_id: dict[int, Tensor] = {id(output): output}
        produced = {id(out) for _, _, out, _ in self.nodes}
        for name, inputs, out, backward_fn in reversed(self.nodes):
            gout = grads.get(id(out))
            if gout is None:
                continue
            gins = backward_fn(gout)
            for t, g in zip(inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
                    by_id[tid] = t
        result: dict[Tensor, np.ndarray] = {}
        for tid, g in grads.items():
            t = by_id[tid]
            if not t.requires_grad:
                continue
            result[t] = g
            if tid not in produced:
                t.grad = g if t.grad is None else t.grad + g
        return result


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_operand(x):
    """Returns (tensor_or_none, raw_value). Scalars stay raw for numpy promotion."""
    if isinstance(x, Tensor):
        return x, x.data
    if isinstance(x, (int, float)):
        return None, x
    return None, np.asarray(x)


def _check_finite(name: str, out: np.ndarray):
    if _STRICT_FINITE and not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced a non-finite value")


def _emit(name, out_data, inputs: Sequence, backward: Callable) -> Tensor:
    """Wrap an op result, recording on the active tape when gradients flow."""
    _check_finite(name, out_data)
    tape = _active_tape()
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    needs_grad = tape is not None and any(t.requires_grad for t in tensor_inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(name, tensor_inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ta, va = _as_operand(a)
    tb, vb = _as_operand(b)
    out = va + vb
    ashape = None if ta is None else ta.data.shape
    bshape = None if tb is None else tb.data.shape

    def backward(g):
        ga = None if ta is None else _unbroadcast(g, ashape)
        gb = None if tb is None else _unbroadcast(g, bshape)
        return _pack(ta, ga, tb, gb)

    return _emit("add", out, (ta, tb), backward)


def sub(a, b) -> Tensor:
    ta, va = _as_operand(a)
    tb, vb = _as_operand(b)
    out = va - vb
    ashape = None if ta is None else ta.data.shape
    bshape = None if tb is None else tb.data.shape

    def backward(g):
        ga = None if ta is None else _unbroadcast(g, ashape)
        gb = None if tb is None else _unbroadcast(-g, bshape)
        return _pack(ta, ga, tb, gb)

    return _emit("sub", out, (ta, tb), backward)


def mul(a, b) -> Tensor:
    ta, va = _as_operand(a)
    tb, vb = _as_operand(b)
    out = va * vb
    need_a = ta is not None and ta.requires_grad
    need_b = tb is not None and tb.requires_grad

    def backward(g):
        ga = _unbroadcast(g * vb, ta.data.shape) if need_a else None
        gb = _unbroadcast(g * va, tb.data.shape) if need_b else None
        return _pack(ta, ga, tb, gb)

    return _emit("mul", out, (ta, tb), backward)


def div(a, b) -> Tensor:
    ta, va = _as_operand(a)
    tb, vb = _as_operand(b)
    out = va / vb
    need_a = ta is not None and ta.requires_grad
    need_b = tb is not None and tb.requires_grad

    def backward(g):
        ga = _unbroadcast(g / vb, ta.data.shape) if need_a else None
        gb = _unbroadcast(-g * va / (vb * vb), tb.data.shape) if need_b else None
        return _pack(ta, ga, tb, gb)

    return _emit("div", out, (ta, tb), backward)


def _pack(ta, ga, tb, gb):
    """Align gradient tuple with the tensor-only input tuple used by _emit."""
    if ta is not None and tb is not None:
        return (ga, gb)
    if ta is not None:
        return (ga,)
    if tb is not None:
        return (gb,)
    return ()


def neg(a) -> Tensor:
    ta, va = _as_operand(a)
    return _emit("neg", -va, (ta,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    ta, va = _as_operand(a)
    tb, vb = _as_operand(b)
    if np.ndim(va) < 2 or np.ndim(vb) < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if va.shape[-1] != vb.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {va.shape} @ {vb.shape}")
    out = va @ vb
    need_a = ta is not None and ta.requires_grad
    need_b = tb is not None and tb.requires_grad

    def backward(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(vb, -1, -2), ta.data.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(va, -1, -2) @ g, tb.data.shape)
        return _pack(ta, ga, tb, gb)

    return _emit("matmul", out, (ta, tb), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b for 2-D x; one tape node instead of two."""
    tx, vx = _as_operand(x)
    tw, vw = _as_operand(w)
    tb, vb = _as_operand(b)
    if vx.ndim != 2 or vw.ndim != 2 or vx.shape[1] != vw.shape[0]:
        raise ShapeError(f"affine expects (n, k) @ (k, m), got {vx.shape} and {vw.shape}")
    if vb.shape != (vw.shape[1],):
        raise ShapeError(f"affine bias shape {vb.shape} != ({vw.shape[1]},)")
    out = vx @ vw
    out += vb
    need_x = tx is not None and tx.requires_grad

    def backward(g):
        grads = []
        if tx is not None:
            grads.append(g @ vw.T if need_x else None)
        if tw is not None:
            grads.append(vx.T @ g)
        if tb is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _emit("affine", out, (tx, tw, tb), backward)


def relu(a) -> Tensor:
    ta, va = _as_operand(a)
    out = np.maximum(va, 0)
    return _emit("relu", out, (ta,), lambda g: (g * (va > 0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    ta, va = _as_operand(a)
    out = np.where(va > 0, va, va * slope)
    return _emit("leaky_relu", out, (ta,), lambda g: (g * np.where(va > 0, 1.0, slope).astype(va.dtype),))


def sigmoid(a) -> Tensor:
    ta, va = _as_operand(a)
    out = np.empty_like(va)
    pos = va >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-va[pos]))
    ev = np.exp(va[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _emit("sigmoid", out, (ta,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    ta, va = _as_operand(a)
    out = np.exp(va)
    return _emit("exp", out, (ta,), lambda g: (g * out,))


def log(a) -> Tensor:
    ta, va = _as_operand(a)
    out = np.log(va)
    return _emit("log", out, (ta,), lambda g: (g / va,))


def sin(a) -> Tensor:
    ta, va = _as_operand(a)
    return _emit("sin", np.sin(va), (ta,), lambda g: (g * np.cos(va),))


def cos(a) -> Tensor:
    ta, va = _as_operand(a)
    return _emit("cos", np.cos(va), (ta,), lambda g: (-g * np.sin(va),))


def absolute(a) -> Tensor:
    ta, va = _as_operand(a)
    return _emit("abs", np.abs(va), (ta,), lambda g: (g * np.sign(va),))


def square(a) -> Tensor:
    ta, va = _as_operand(a)
    return _emit("square", va * va, (ta,), lambda g: (g * 2.0 * va,))


# ---------------------------------------------------------------------------
# reductions and scans
# ---------------------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    ta, va = _as_operand(a)
    out = va.sum(axis=axis, keepdims=keepdims)
    if not np.isfinite(out).all():
        raise NonFiniteError("sum produced a non-finite value")

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, va.shape).astype(va.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, va.shape).astype(va.dtype, copy=True),)

    return _emit("sum", out, (ta,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ta, va = _as_operand(a)
    out = va.mean(axis=axis, keepdims=keepdims)
    if not np.isfinite(out).all():
        raise NonFiniteError("mean produced a non-finite value")
    count = va.size // max(out.size, 1)

    def backward(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(g2, va.shape) / count).astype(va.dtype, copy=True),)

    return _emit("mean", out, (ta,), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def cumsum(a, axis: int) -> Tensor:
    ta, va = _as_operand(a)
    out = np.cumsum(va, axis=axis)

    def backward(g):
        flipped = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (flipped.astype(va.dtype, copy=False),)

    return _emit("cumsum", out, (ta,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ops = [_as_operand(t) for t in tensors]
    vals = [v for _, v in ops]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    tens = [t for t, _ in ops]

    def backward(g):
        grads = []
        idx = [slice(None)] * g.ndim
        for i, t in enumerate(tens):
            if t is None:
                continue
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _emit("concat", out, tens, backward)


def _slice(a, key) -> Tensor:
    ta, va = _as_operand(a)
    out = va[key]

    def backward(g):
        full = np.zeros_like(va)
        full[key] = g
        return (full,)

    return _emit("slice", np.ascontiguousarray(out), (ta,), backward)


def reshape(a, shape) -> Tensor:
    ta, va = _as_operand(a)
    out = va.reshape(shape)
    return _emit("reshape", out, (ta,), lambda g: (g.reshape(va.shape),))


def transpose(a, axes) -> Tensor:
    ta, va = _as_operand(a)
    out = np.transpose(va, axes)
    inv = np.argsort(axes)
    return _emit("transpose", out, (ta,), lambda g: (np.transpose(g, inv),))


def roll(a, shift: int, axis: int) -> Tensor:
    ta, va = _as_operand(a)
    out = np.roll(va, shift, axis=axis)
    return _emit("roll", out, (ta,), lambda g: (np.roll(g, -shift, axis=axis),))


def softmax(a, axis: int = -1) -> Tensor:
    ta, va = _as_operand(a)
    shifted = va - va.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax", out, (ta,), backward)


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of an (N, C, H, W) feature map."""
    ta, va = _as_operand(a)
    if va.ndim != 4:
        raise ShapeError(f"upsample2x expects (N, C, H, W), got {va.shape}")
    out = va.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = va.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)).astype(va.dtype, copy=False),)

    return _emit("upsample2x", out, (ta,), backward)
