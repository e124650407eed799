"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable primitive builds its output with :func:`_node`, which
records the parents and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericalDomainError

DTYPE = np.float64
LOG_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, diagnostics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_live", "_backward", "name")
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._live: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic protocol -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    live = tuple(p.requires_grad for p in parents)
    if _grad_enabled and any(live):
        out.requires_grad = True
        out._parents = tuple(parents)
        # participation is fixed when the node is built, so a module frozen
        # during the forward pass stays frozen for this graph
        out._live = live
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(x: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalDomainError(f"{opname}: non-finite input")


# -- tape -------------------------------------------------------------------
class Tape:
    """Recorded operations reachable from a scalar loss, in topological order.

    ``nodes[i]`` never depends on ``nodes[j]`` for ``j > i``; the backward
    pass visits them in reverse exactly once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
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
            for parent, live in zip(reversed(node._parents), reversed(node._live)):
                if live and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Parameters listed in ``params`` that do not participate in the loss get a
    zero gradient instead of ``None``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        tape = Tape.record(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg, live in zip(node._parents, parent_grads, node._live):
                if pg is None or not live:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped from below at ``floor``."""
    a = as_tensor(a)
    _check_finite(a.data, "log")
    clamped = np.maximum(a.data, floor)
    mask = a.data > floor
    return _node(np.log(clamped), (a,), lambda g: (np.where(mask, g / clamped, 0.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw)


def grad_reverse(a, coeff: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-coeff``."""
    a = as_tensor(a)
    return _node(a.data.copy(), (a,), lambda g: (-coeff * g,))


# -- reductions and shape ---------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(np.asarray(out), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)
    return _node(np.asarray(out), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def sqdist_columns(a, b) -> Tensor:
    """Squared Euclidean distances between the columns of ``a`` (d x m)
    and ``b`` (d x n); returns an m x n matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractError(f"sqdist_columns shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data[:, :, None] - b.data[:, None, :]

    def bw(g):
        weighted = 2.0 * diff * g[None, :, :]
        return weighted.sum(axis=2), -weighted.sum(axis=1)

    return _node((diff * diff).sum(axis=0), (a, b), bw)


def sym_inv_sqrt(s, floor: float) -> Tensor:
    """``S^{-1/2}`` of a symmetric matrix with eigenvalues floored at ``floor``.

    Backward uses the Daleckii-Krein formula for spectral matrix functions.
    """
    s = as_tensor(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"sym_inv_sqrt needs a square matrix, got {s.shape}")
    _check_finite(s.data, "sym_inv_sqrt")
    sym = 0.5 * (s.data + s.data.T)
    lam, u = np.linalg.eigh(sym)
    lam_f = np.maximum(lam, floor)
    f = lam_f ** -0.5
    out = (u * f) @ u.T

    def bw(g):
        fprime = np.where(lam > floor, -0.5 * lam_f ** -1.5, 0.0)
        dl = lam[:, None] - lam[None, :]
        df = f[:, None] - f[None, :]
        close = np.abs(dl) <= 1e-12 * np.maximum(1.0, np.abs(lam[:, None]))
        avg_prime = 0.5 * (fprime[:, None] + fprime[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            kernel = np.where(close, avg_prime, df / np.where(close, 1.0, dl))
        gs = 0.5 * (g + g.T)
        inner = kernel * (u.T @ gs @ u)
        return (u @ inner @ u.T,)

    return _node(out, (s,), bw)


# -- convolution and resampling ---------------------------------------------
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation lowered to im2col + matmul.

    x: (N, C, H, W); weight: (O, C, k, k); bias: (O,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"conv2d shape mismatch: {x.shape} vs {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractError("conv2d kernel larger than padded input")
    # cols: (N, C, kh, kw, Ho, Wo)
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.einsum("ok,nkp->nop", wmat, cols2).reshape(n, o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.einsum("nop,nkp->ok", g2, cols2).reshape(weight.shape)
        gcols = np.einsum("ok,nop->nkp", wmat, g2).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, bw)


def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Interpolation operator (half-pixel centers, edges clamped)."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling of (N, C, H, W) maps by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ContractError(f"upsample_bilinear expects NCHW, got {x.shape}")
    if factor == 1:
        return x
    uh = _bilinear_matrix(x.shape[2], factor)
    uw = _bilinear_matrix(x.shape[3], factor)
    out = np.einsum("ih,nchw,jw->ncij", uh, x.data, uw)
    return _node(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", uh, g, uw),))
