"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op records its
inputs and a closure that maps the output gradient to input gradients, so the
graph reachable from a scalar loss is the tape replayed by :meth:`Tensor.backward`.
:meth:`Tensor.detach` produces a fresh leaf, which is where backward traversal
stops.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "tensor",
    "zeros",
    "constant",
    "matmul",
    "softmax",
    "rms_norm",
    "gelu",
    "relu",
    "cross_entropy",
    "embedding",
    "argmax",
    "gradcheck",
]

RMS_EPS = 1e-6

_grad_enabled = True
_debug = False


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf while debug checks were on."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_debug(flag: bool) -> bool:
    """Toggle finite-value checks on every forward op. Returns the previous value."""
    global _debug
    prev = _debug
    _debug = bool(flag)
    return prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._retain = False

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        if _debug and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from {op}")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        out._retain = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ---- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def requires_grad_(self, flag: bool = True) -> Tensor:
        if self._backward is not None:
            raise ValueError("requires_grad_ applies to leaf tensors only")
        self.requires_grad = flag
        return self

    def retain_grad(self) -> Tensor:
        """Keep .grad on a non-leaf after backward (used for gradient probes)."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        """Same data, no history: backward never crosses into the producers."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "detach"
        out._parents = ()
        out._backward = None
        out._retain = False
        return out

    # ---- backward -------------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ---- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("division is only defined by scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


# ---- constructors -------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def constant(value: float, shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(out, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)

    def backward(g):
        return (g * c_arr,)

    return Tensor._make(a.data * c_arr, (a,), backward, "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    k = xd.dtype.type(np.sqrt(2.0 / np.pi))
    c = xd.dtype.type(0.044715)
    x2 = xd * xd
    t = x2 * (k * c)
    t += k
    t *= xd
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) k (1 + 3 c x^2)
        dt = t * t
        np.subtract(1.0, dt, out=dt)
        inner = x2 * (3.0 * c * k)
        inner += k
        dt *= inner
        dt *= xd
        dt += t
        dt += 1.0
        dt *= 0.5
        dt *= g
        return (dt,)

    return Tensor._make(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(x.data * mask, (x,), backward, "relu")


# ---- reductions and shape ops -------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(old),)

    return Tensor._make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._make(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(x.data[idx]), (x,), backward, "getitem")


# ---- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    # a shared 2-D right operand: fold all leading dims into one GEMM
    flat = bd.ndim == 2
    try:
        if flat:
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
        else:
            out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if flat:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


# ---- normalisation, attention weights, losses ---------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """y = gain * x / sqrt(mean(x**2, last axis) + eps)."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm gain {gain.shape} does not match last dim of {x.shape}")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xd * r
    out = xhat * gain.data

    def backward(g):
        gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        gx = g * gain.data
        gx = r * (gx - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, gg

    return Tensor._make(out, (x, gain), backward, "rms_norm")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets over unmasked positions.

    ``logits`` has shape ``(..., vocab)``; ``targets`` and the optional boolean
    ``mask`` have the leading shape.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target outside [0, {vocab})")
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1).astype(np.int64)
    w = np.ones(t.shape, dtype=flat.dtype) if mask is None else np.asarray(mask, dtype=flat.dtype).reshape(-1)
    count = w.sum()
    if count == 0:
        raise ValueError("cross_entropy mask selects no positions")
    mx = flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(flat - mx).sum(axis=1)) + mx[:, 0]
    nll = lse - flat[np.arange(t.size), t]
    loss = np.asarray((nll * w).sum() / count, dtype=flat.dtype)
    shape = logits.shape

    def backward(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(t.size), t] -= 1.0
        p *= (w / count)[:, None]
        return ((p * g).reshape(shape),)

    return Tensor._make(loss, (logits,), backward, "cross_entropy")


def embedding(table: Tensor, idx) -> Tensor:
    """Gather rows of ``table``; backward scatters into the rows used."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"token id outside [0, {table.shape[0]})")
    rows = table.shape

    def backward(g):
        full = np.zeros(rows, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return Tensor._make(table.data[idx], (table,), backward, "embedding")


def argmax(x: Tensor | np.ndarray, axis: int = -1) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return data.argmax(axis=axis)


# ---- verification -------------------------------------------------------------


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-5,
              dtype=np.longdouble) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps Tensors to a scalar Tensor. Inputs are promoted to ``dtype``
    (extended precision by default, so differencing a sum of O(1) terms does not
    swamp tiny gradient entries). The error per entry is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    worst = 0.0
    for i, arr in enumerate(arrays):
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(*[Tensor(a) for a in arrays]).data
            flat[j] = orig - h
            fm = fn(*[Tensor(a) for a in arrays]).data
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
