"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every op records its parents and a backward rule mapping the output
gradient to one gradient per parent.  :meth:`Tensor.backward` walks the
graph once in reverse topological order.

Image-like tensors are channels-first and batch-free: ``(C, H, W)``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every reachable tensor that requires grad.

        Without an explicit ``grad`` the tensor must be a scalar loss.
        Leaf gradients accumulate across calls until cleared.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        pending: dict[int, np.ndarray] = {self.id: grad}
        for node in reversed(order):
            g = pending.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- reductions and shape ---------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return (z,)

    return _result(np.array(out, copy=True), (a,), backward)


def take_rows(a, rows) -> Tensor:
    """Gather rows ``a[rows]`` along axis 0; duplicate rows accumulate grads."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, rows, g)
        return (z,)

    return _result(a.data[rows], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ")
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


def sparse_matmul(m: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: shapes {m.shape} and {x.shape} are not aligned")
    m = sp.csr_matrix(m)
    mt = m.T.tocsr()
    return _result(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


# -- normalisation / softmax ---------------------------------------------------
def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    lse = m + np.log(s)
    soft = np.exp(a.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _result(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _result(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = a.data / safe

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * proj) / safe, g / safe),)

    return _result(out, (a,), backward)


# -- image ops (C, H, W) ---------------------------------------------------------
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C, H, W) with ``weight`` (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {(hp, wp)} smaller than kernel {(kh, kw)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    wmat = weight.data.reshape(o, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, ::stride, ::stride]
        cols = xs.reshape(c, -1)
    else:
        xpad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = np.empty((c, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(c * kh * kw, ho * wo)
    out = (wmat @ cols).reshape(o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = wmat.T @ g2
        if kh == 1 and kw == 1 and padding == 0:
            gx = np.zeros_like(x.data)
            gx[:, ::stride, ::stride] = gcols.reshape(c, ho, wo)
        else:
            gcols = gcols.reshape(c, kh, kw, ho, wo)
            gpad = np.zeros((c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gpad[:, padding:padding + h, padding:padding + w] if padding else gpad
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _result(out, parents, backward)


def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def upsample2x(x) -> Tensor:
    """Bilinear x2 upsampling of a (C, H, W) tensor."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample2x expects (C, H, W), got {x.shape}")
    _, h, w = x.shape
    uh = _UPSAMPLE_CACHE.setdefault(h, _bilinear_matrix(h))
    uw = _UPSAMPLE_CACHE.setdefault(w, _bilinear_matrix(w))
    out = uh @ x.data @ uw.T
    return _result(out, (x,), lambda g: (uh.T @ g @ uw,))


def separable_filter(x, kernel_1d: np.ndarray) -> Tensor:
    """Valid-mode depthwise filtering of (C, H, W) with an outer-product kernel."""
    x = as_tensor(x)
    k = np.asarray(kernel_1d, dtype=np.float64)
    n = k.size
    if x.ndim != 3 or x.shape[1] < n or x.shape[2] < n:
        raise ShapeError(f"separable_filter: input {x.shape} smaller than window {n}")
    av = _toeplitz_valid(x.shape[1], k)
    ah = _toeplitz_valid(x.shape[2], k)
    out = av @ x.data @ ah.T
    return _result(out, (x,), lambda g: (av.T @ g @ ah,))


def _toeplitz_valid(n: int, k: np.ndarray) -> np.ndarray:
    m = n - k.size + 1
    a = np.zeros((m, n))
    for i in range(m):
        a[i, i:i + k.size] = k
    return a
