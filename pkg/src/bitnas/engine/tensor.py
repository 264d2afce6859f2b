"""Tape-based reverse-mode autodiff on numpy arrays.

Values are computed eagerly; when a :class:`Tape` is active, every primitive
appends its backward rule to the tape in execution order.  Because ops are
recorded as they run, the tape is already topologically sorted, and one
backward pass walks it exactly once in reverse.

Training uses float32 tensors; gradient checks construct float64 tensors.
Mixing the two in one graph is almost always a bug, so binary ops reject
mismatched dtypes.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["Tensor", "Tape", "custom_gradient", "record"]

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A dense n-dimensional array participating in reverse-mode autodiff.

    ``grad`` is filled in by ``Tape.backward`` and has the same shape and
    dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _binary(self, other, lambda a, b: b - a,
                       lambda g, a, b: (-g, g))

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: (g / b, -g * a / (b * b)))

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a: -g)

    # -- elementwise functions -------------------------------------------

    def relu(self) -> "Tensor":
        return _unary(self, lambda a: np.maximum(a, 0),
                      lambda g, a: g * (a > 0))

    def tanh(self) -> "Tensor":
        return _unary(self, np.tanh, lambda g, a: g * (1.0 - np.tanh(a) ** 2))

    def abs(self) -> "Tensor":
        return _unary(self, np.abs, lambda g, a: g * np.sign(a))

    def log(self) -> "Tensor":
        return _unary(self, np.log, lambda g, a: g / a)

    def exp(self) -> "Tensor":
        return _unary(self, np.exp, lambda g, a: g * np.exp(a))

    # -- reductions and shape --------------------------------------------

    def sum(self) -> "Tensor":
        def backward(g, a):
            return (np.full_like(a, g),)
        return _nary((self,), lambda a: np.asarray(a.sum()), backward)

    def mean(self) -> "Tensor":
        def backward(g, a):
            return (np.full_like(a, g / a.size),)
        return _nary((self,), lambda a: np.asarray(a.mean()), backward)

    def max(self) -> "Tensor":
        """Global max; gradient routes to the first maximal element."""
        def backward(g, a):
            da = np.zeros_like(a)
            da.flat[np.argmax(a)] = g
            return (da,)
        return _nary((self,), lambda a: np.asarray(a.max()), backward)

    def reshape(self, shape) -> "Tensor":
        def backward(g, a):
            return (g.reshape(a.shape),)
        return _nary((self,), lambda a: a.reshape(shape), backward)


def _coerce(other, like: Tensor):
    if isinstance(other, Tensor):
        if other.dtype != like.dtype:
            raise ValueError(
                f"dtype mismatch in tensor op: {like.dtype} vs {other.dtype}")
        return other
    return Tensor(np.asarray(other, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _unary(x: Tensor, forward, backward) -> Tensor:
    out = Tensor(forward(x.data))
    record((x,), out, lambda g, a=x.data: (backward(g, a),))
    return out


def _binary(x: Tensor, other, forward, backward) -> Tensor:
    y = _coerce(other, x)
    out = Tensor(forward(x.data, y.data))

    def rule(g, a=x.data, b=y.data):
        ga, gb = backward(g, a, b)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    record((x, y), out, rule)
    return out


def _nary(inputs: Sequence[Tensor], forward, backward) -> Tensor:
    """Record an op whose backward receives (grad, *input_arrays)."""
    datas = tuple(t.data for t in inputs)
    out = Tensor(forward(*datas))
    record(inputs, out, lambda g, d=datas: backward(g, *d))
    return out


class Tape:
    """Ordered record of executed operations, used once for one backward pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)

    A tape is confined to the thread that created it.  Entering a tape
    nested inside another records onto the innermost one only.
    """

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every recorded tensor."""
        loss.grad = np.ones_like(loss.data)
        for inputs, out, rule in reversed(self._entries):
            g = out.grad
            if g is None:
                continue
            grads = rule(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ValueError(
                        f"backward rule produced gradient of shape {gi.shape} "
                        f"for tensor of shape {t.data.shape}")
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi


def record(inputs: Sequence[Tensor], out: Tensor, rule: Callable):
    """Append one op to the active tape, if recording applies.

    ``rule(grad_out)`` must return one gradient per input (``None`` to skip).
    Without an active tape, or when no input requires grad, nothing is
    recorded and the output does not require grad.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    out.requires_grad = True
    tape._entries.append((tuple(inputs), out, rule))


def custom_gradient(forward_fn: Callable, backward_fn: Callable) -> Callable:
    """Wrap numpy-level forward/backward functions as a tape primitive.

    ``forward_fn(*arrays) -> array`` computes the value; on the backward
    pass ``backward_fn(grad, *arrays)`` is used verbatim in place of
    ``forward_fn``'s analytic derivative and must return one gradient per
    input (``None`` allowed).
    """

    def apply(*tensors: Tensor) -> Tensor:
        n = len(tensors)

        def checked(g, *arrays):
            grads = backward_fn(g, *arrays)
            if not isinstance(grads, (tuple, list)):
                grads = (grads,)
            if len(grads) != n:
                raise ValueError(
                    f"custom gradient returned {len(grads)} gradients "
                    f"for {n} inputs")
            return tuple(None if gi is None else np.asarray(gi) for gi in grads)

        return _nary(tensors, forward_fn, checked)

    return apply
