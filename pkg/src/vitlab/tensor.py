"""Dense tensors with define-by-run reverse-mode differentiation.

Each differentiable op records its parents and a closure mapping the
output gradient to parent gradients. :meth:`Tensor.backward` orders the
recorded graph topologically, walks it once in reverse and then releases
it, so a graph cannot be differentiated twice.

Broadcasting is deliberately narrow. Elementwise binary ops accept equal
shapes or one operand whose shape is a trailing suffix of the other
(bias vectors, positional tables, scalars). Matmul accepts a 2D right
operand against any leading batch, or two operands with identical leading
batch dims. Everything else raises.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_grad_enabled = contextvars.ContextVar("vitlab_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _grad_enabled.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -- reverse pass -------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every leaf that requires grad.

        Gradients accumulate into existing ``.grad`` buffers. The recorded
        graph is released afterwards.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is detached from the graph: no input requires grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            node._parents = ()
            node._backward = None


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _is_suffix(short, long) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short):]) == tuple(short)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g.sum().reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or _is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape):
        return
    raise ValueError(f"{op}: unsupported broadcast between shapes {a.shape} and {b.shape}")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a.dtype)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def gelu(a: Tensor) -> Tensor:
    """GELU in the exact form x * Phi(x), Phi the standard normal CDF."""
    x = np.ascontiguousarray(a.data)
    y = kernels.gelu(x, np.empty_like(x))

    def backward(g):
        return (kernels.gelu_backward(x, np.ascontiguousarray(g, dtype=x.dtype), np.empty_like(x)),)

    return Tensor._make(y, (a,), backward, "gelu")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2D (shared across all leading dims of ``a``) or has
    the same leading dims as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: unsupported batch broadcast between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if not _basic_index(idx):
        raise TypeError("only basic (int/slice) indexing is differentiable")
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return Tensor._make(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for k in range(len(tensors)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tensors, backward, "concat")


def broadcast_leading(a: Tensor, shape) -> Tensor:
    """Repeat ``a`` over new or size-1 leading axes to reach ``shape``."""
    shape = tuple(shape)
    src = a.shape
    if len(src) > len(shape):
        raise ValueError(f"cannot broadcast {src} to {shape}")
    padded = (1,) * (len(shape) - len(src)) + src
    for s, t in zip(padded, shape):
        if s != t and s != 1:
            raise ValueError(f"cannot broadcast {src} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(padded, shape)) if s != t)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src),)

    data = np.ascontiguousarray(np.broadcast_to(a.data.reshape(padded), shape))
    return Tensor._make(data, (a,), backward, "broadcast")


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._make(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


# -- normalisation -------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * a`` along ``axis``; stable via max subtraction."""
    if a.ndim == 0:
        raise ValueError("softmax: scalar input has no axis")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ValueError("softmax: empty axis")
    moved = np.moveaxis(a.data, axis, -1)
    x = np.ascontiguousarray(moved)
    m = x.shape[-1]
    y2 = kernels.softmax_rows(x.reshape(-1, m), scale, np.empty((x.size // m, m), dtype=x.dtype))
    y = y2.reshape(x.shape)

    def backward(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1), dtype=y.dtype).reshape(-1, m)
        gx = kernels.softmax_rows_backward(y2, gm, y.dtype.type(scale), np.empty_like(gm))
        return (np.moveaxis(gx.reshape(x.shape), -1, axis),)

    return Tensor._make(np.moveaxis(y, -1, axis), (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis with the population variance."""
    m = a.shape[-1]
    if gamma.shape != (m,) or beta.shape != (m,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({m},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x = np.ascontiguousarray(a.data).reshape(-1, m)
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    kernels.layer_norm_rows(x, gamma.data, beta.data, x.dtype.type(eps), out, xhat, rstd)
    shape = a.shape

    def backward(g):
        g2 = np.ascontiguousarray(g, dtype=x.dtype).reshape(-1, m)
        dx = np.empty_like(g2)
        dgamma = np.empty(m, dtype=x.dtype)
        dbeta = np.empty(m, dtype=x.dtype)
        kernels.layer_norm_rows_backward(g2, xhat, rstd, gamma.data, dx, dgamma, dbeta)
        return dx.reshape(shape), dgamma, dbeta

    return Tensor._make(out.reshape(shape), (a, gamma, beta), backward, "layer_norm")


# -- losses ------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be (B, K), got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"cross_entropy: labels must have shape ({B},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross_entropy: labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = (logsum - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
