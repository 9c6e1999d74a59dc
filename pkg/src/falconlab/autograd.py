"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires a gradient records a node
pointing at its inputs. :func:`backward` linearises those nodes into a
:class:`Tape` (inputs before outputs), sweeps it once in reverse and then
drops the recorded graph, so each forward pass builds a fresh tape.

Only leaf tensors (those created directly by the user, e.g. parameters or an
input batch marked ``requires_grad``) receive a ``.grad`` array; gradients of
intermediates live only for the duration of the sweep.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import config, kernels
from .errors import ContractError, DimensionError


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording them (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or config.DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out._node = _Node(tuple(parents), backward) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    """``a / b`` with the denominator clamped from below at ``CLAMP_DELTA``.

    Denominators are assumed non-negative (probabilities, counts, norms).
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    active = b.data > config.CLAMP_DELTA
    den = np.where(active, b.data, config.CLAMP_DELTA)
    out = a.data / den

    def backward(g):
        return _unbroadcast(g / den, a.shape), _unbroadcast(np.where(active, -g * out / den, 0.0), b.shape)

    return _result(out, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    """Natural log of ``max(x, CLAMP_DELTA)``; no gradient flows where the clamp is active."""
    x = as_tensor(x)
    active = x.data > config.CLAMP_DELTA
    safe = np.where(active, x.data, config.CLAMP_DELTA)
    return _result(np.log(safe), (x,), lambda g: (np.where(active, g / safe, 0.0),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g: (_expand(g / count, x.shape, axis, keepdims),))


def max_reduce(x, axis=-1, keepdims=False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, gk, axis=axis)
        return (full,)

    return _result(out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# fused ops


def softmax(x, axis=-1) -> Tensor:
    """Softmax with max-subtraction; rows along ``axis`` sum to one."""
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    return _result(out, (x,), lambda g: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),))


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is (b, c, h, w), ``weight`` is (o, c, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    b, _, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(o, -1)
    out = cols @ w2.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(weight.shape)
        dx = kernels.col2im(g2 @ w2, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), parents, backward)


def maxpool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < size or x.shape[3] < size:
        raise DimensionError(f"maxpool2d: input {x.shape} too small for window {size}")
    out, argmax = kernels.maxpool_forward(x.data, size)
    return _result(out, (x,), lambda g: (kernels.maxpool_backward(g, argmax, x.shape, size),))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, order: list):
        self.order = order

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.order)

    def sweep(self, seed: np.ndarray) -> None:
        grads = {id(self.order[-1]): seed}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            node = t._node
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    pg = np.asarray(pg, dtype=parent.data.dtype)
                    if parent.grad is None:
                        parent.grad = np.array(pg, copy=True).reshape(parent.shape)
                    else:
                        parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        for t in self.order:
            t._node = None
        self.order = []


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        return
    Tape.record(loss).sweep(np.ones_like(loss.data))


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Largest relative gap between the analytic gradient and central differences.

    The gap at each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)
    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
