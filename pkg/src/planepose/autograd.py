"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the pose network needs are provided. Each op computes its
forward value eagerly and records a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import NumericError, ShapeError

DEBUG = False  # when set, every op checks its output for non-finite values


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.name = name
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        if DEBUG and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values produced by {name or 'op'}")

    # -- basic protocol ------------------------------------------------------
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operators -----------------------------------------------------------
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

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # -- backprop ------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
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


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward, name):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, name)
    return Tensor(data, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # constants follow the dtype of the tracked operand instead of promoting it
    if a.dtype != b.dtype:
        if not a.requires_grad and b.requires_grad:
            a = Tensor(a.data.astype(b.dtype))
        elif not b.requires_grad and a.requires_grad:
            b = Tensor(b.data.astype(a.dtype))
    return a, b


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**k, (a,), lambda g: (g * k * a.data ** (k - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is passed only where the input lies inside ``[lo, hi]``."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


_SERIES_BELOW = 1e-2
# Maclaurin coefficients in v = t^2: sin(t)/t = sum A_k v^k, (1 - cos t)/t^2 = sum B_k v^k
_SINC_SERIES = np.array([1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880, -1 / 39916800])
_COSC_SERIES = np.array([0.5, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800, -1 / 479001600])


def _series(coef, v):
    val = np.zeros_like(v)
    der = np.zeros_like(v)
    for k in range(len(coef) - 1, -1, -1):
        val = val * v + coef[k]
    for k in range(len(coef) - 1, 0, -1):
        der = der * v + k * coef[k]
    return val, der


def rodrigues_coeffs(theta_sq) -> tuple[Tensor, Tensor]:
    """``sin(t)/t`` and ``(1 - cos t)/t^2`` as smooth functions of ``t^2``.

    Below ``t^2 = 1e-2`` truncated power series replace the closed forms, whose
    derivatives cancel catastrophically near zero.
    """
    x = as_tensor(theta_sq)
    v = x.data.astype(np.float64)
    small = v < _SERIES_BELOW
    safe = np.where(small, 1.0, v)
    t = np.sqrt(safe)
    s, c = np.sin(t), np.cos(t)
    sa, sda = _series(_SINC_SERIES, v)
    sb, sdb = _series(_COSC_SERIES, v)
    a = np.where(small, sa, s / t)
    half = np.sin(0.5 * t)
    b = np.where(small, sb, 2.0 * half * half / safe)
    da = np.where(small, sda, (t * c - s) / (2.0 * safe * t))
    db = np.where(small, sdb, (t * s - 4.0 * half * half) / (2.0 * safe * safe))
    a, b, da, db = (arr.astype(x.dtype) for arr in (a, b, da, db))
    return (
        _make(a, (x,), lambda g: (g * da,), "sinc"),
        _make(b, (x,), lambda g: (g * db,), "cosc"),
    )


def replace_rows(a, mask: np.ndarray, value) -> Tensor:
    """Overwrite rows selected by ``mask`` with a constant; they receive no gradient."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return a
    out = a.data.copy()
    out[mask] = value
    keep = (~mask).reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
    return _make(out, (a,), lambda g: (g * keep,), "replace_rows")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "getitem")


def stack(items, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in items]
    data = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(data, ts, back, "stack")


def concat(items, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in items]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, ts, back, "concat")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped ``(out, in)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data.T
    if b is not None:
        out = out + parents[2].data

    def back(g):
        gx = g @ w.data
        gw = g.T @ x.data
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    return _make(out, parents, back, "linear")


# ---------------------------------------------------------------------------
# image ops (NCHW)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B*H*W, k*k*C)`` patches for a 'same' stride-1 conv.

    Columns are ordered (kernel row, kernel col, channel).
    """
    bsz, c, h, w = x.shape
    pad = k // 2
    xp = np.zeros((bsz, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((bsz, h, w, k * k, c), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di * k + dj, :] = xp[:, di : di + h, dj : dj + w, :]
    return cols.reshape(bsz * h * w, k * k * c)


def conv2d(x, w) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with odd square kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols = _im2col(x.data, k)
    wm = w.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = (cols @ wm.T).reshape(bsz, h, wd, cout).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(bsz * h * wd, cout)
        gw = (gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            return None, gw
        # input gradient = 'same' conv of g with the flipped, transposed kernel
        wf = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, k * k * cout)
        gx = (_im2col(g, k) @ wf.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        return gx, gw

    return _make(out, (x, w), back, "conv2d")


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(bsz, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], -1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], -1)
        gb = gb.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(bsz, c, h, w),)

    return _make(out, (x,), back, "maxpool2x2")


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""
    x = as_tensor(x)
    axes = (2, 3)
    n = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).sum(axis=axes, keepdims=True) / n) * inv
        return (gx,)

    return _make(xhat, (x,), back, "instance_norm")


def adaptive_avg_pool(x, size: int) -> Tensor:
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"adaptive_avg_pool: {h}x{w} is not divisible into {size}x{size}")
    fh, fw = h // size, w // size
    out = x.data.reshape(bsz, c, size, fh, size, fw).mean(axis=(3, 5))

    def back(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (fh * fw), (bsz, c, size, fh, size, fw))
        return (gx.reshape(bsz, c, h, w).copy(),)

    return _make(out, (x,), back, "adaptive_avg_pool")


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    x = as_tensor(x)
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
