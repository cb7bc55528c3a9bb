"""Reverse-mode autodiff over dense float64 tensors.

Define-by-run: each operation stores its parents and a backward closure on
the output tensor, and ``backward`` replays the recorded graph in reverse
topological order. Only the shapes the bundled architectures need are
supported: NCHW convolutions, 2-D matmul, and elementwise ops with numpy
broadcasting. Everything is float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class GeometryError(ValueError):
    """Convolution geometry yields a non-positive output extent."""


class DivergenceError(RuntimeError):
    """NaN/Inf appeared where a finite value is required."""


class Tensor:
    """Dense float64 array with an optional gradient.

    ``grad`` is lazily allocated during backward and has the same shape as
    ``data``. Tensors produced by operations hold the backward closure that
    routes output gradients to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Populate ``grad`` for every tensor the scalar ``loss`` depends on.

    Visits each recorded node exactly once, in reverse topological order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _from_op(out, (a, b), bwd)


def sub(a, b):
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _from_op(out, (a, b), bwd)


def mul(a, b):
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _from_op(out, (a, b), bwd)


def square(a):
    out = a.data * a.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(2.0 * a.data * g)

    return _from_op(out, (a,), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(out * g)

    return _from_op(out, (a,), bwd)


def log(a):
    out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _from_op(out, (a,), bwd)


def clamp_min(a, lo):
    """Elementwise max(a, lo); gradient is zero on the clamped region."""
    out = np.maximum(a.data, lo)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > lo))

    return _from_op(out, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _from_op(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.shape[i]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _from_op(out, (a,), bwd)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _from_op(out, (a, b), bwd)


def gather_rows(a, idx):
    """out[i] = a[i, idx[i]] for a 2-D tensor and an integer index vector."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: {a.shape} with index shape {idx.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, idx), g)
            a._accumulate(ga)

    return _from_op(out, (a,), bwd)


def concat(tensors, axis=0):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _from_op(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _from_op(out, (a,), bwd)


def leaky_relu(a, slope=0.2):
    mask = a.data > 0.0
    out = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.where(mask, 1.0, slope))

    return _from_op(out, (a,), bwd)


def sigmoid(a):
    # computed in log space on the negative side, no overflow for |x| <= 700
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _from_op(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out * out))

    return _from_op(out, (a,), bwd)


def softplus(a):
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        if a.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * s)

    return _from_op(out, (a,), bwd)


def log_softmax(a, axis=1):
    x = a.data
    xmax = x.max(axis=axis, keepdims=True)
    z = x - xmax
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        if a.requires_grad:
            p = np.exp(out)
            a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _from_op(out, (a,), bwd)


def activations(a, kind):
    """Dispatch by name; ``log_softmax`` acts over the class axis (axis 1)."""
    table = {
        "relu": relu,
        "leaky_relu": lambda t: leaky_relu(t, 0.2),
        "sigmoid": sigmoid,
        "tanh": tanh,
        "log_softmax": log_softmax,
    }
    if kind not in table:
        raise ValueError(f"unknown activation {kind!r}")
    return table[kind](a)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _conv_geom(extent, k, stride, padding):
    out = (extent + 2 * padding - k) // stride + 1
    if out <= 0:
        raise GeometryError(
            f"conv output extent {out} for input {extent}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _im2col(x, kh, kw, stride, padding):
    """(N,C,H,W) -> (N*Ho*Wo, C*kh*kw) patch matrix, plus the output grid."""
    n, c, h, w = x.shape
    ho = _conv_geom(h, kh, stride, padding)
    wo = _conv_geom(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, n, c, h, w, kh, kw, stride, padding, ho, wo):
    """Adjoint of ``_im2col``: scatter-add patch rows back onto the image."""
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            wj = j + stride * wo
            img[:, :, i:hi:stride, j:wj:stride] += cols[:, :, :, :, i, j]
    if padding:
        img = img[:, :, padding:-padding, padding:-padding]
    return img


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIKK weight plus per-O bias."""
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, ci * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = gmat @ wmat
            x._accumulate(_col2im(dcols, n, c, h, w, kh, kw, stride, padding, ho, wo))

    return _from_op(out, (x, weight, bias), bwd)


def conv_transpose2d(x, weight, bias, stride=1, padding=0):
    """Adjoint of ``conv2d``: weight is IOKK with I matching the input channels."""
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    if bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape}, expected ({co},)")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"conv_transpose2d output extent {ho}x{wo}")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, ci)
    wmat = weight.data.reshape(ci, co * kh * kw)
    cols = xmat @ wmat
    out = _col2im(cols, n, co, ho, wo, kh, kw, stride, padding, h, w)
    out += bias.data.reshape(1, co, 1, 1)

    def bwd(g):
        gcols, gho, gwo = _im2col(g, kh, kw, stride, padding)
        # gcols rows line up with x's spatial positions: (ho+2p-kh)/s+1 == h
        if weight.requires_grad:
            weight._accumulate((xmat.T @ gcols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = (gcols @ wmat.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2)
            x._accumulate(dx)

    return _from_op(out, (x, weight, bias), bwd)


def max_pool2d(x, k=2):
    """Non-overlapping k-by-k max pooling; ties route the gradient to the
    first window position (row-major), keeping backward deterministic."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise GeometryError(f"max_pool2d: spatial {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        gw = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(gx)

    return _from_op(out, (x,), bwd)


class RunningStats:
    """Per-channel running mean/variance for batch norm (externally readable)."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self):
        out = RunningStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x, gamma, beta, state, mode, momentum=0.1, eps=1e-5):
    """Batch normalization over (N,H,W) per channel.

    Train mode normalizes by biased batch statistics and blends them into
    ``state`` with the given momentum; eval mode normalizes by the stored
    statistics. Variance is biased (population) in both the normalizer and
    the running buffer.
    """
    n, c, h, w = x.shape
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    if mode == "train":
        if n < 2:
            raise ShapeError("batchnorm2d train mode requires batch size >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean = (1.0 - momentum) * state.mean + momentum * mean
        state.var = (1.0 - momentum) * state.var + momentum * var
    else:
        mean = state.mean
        var = state.var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    m = n * h * w

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gk = gamma.data.reshape(1, c, 1, 1)
        istd = invstd.reshape(1, c, 1, 1)
        if mode == "eval":
            x._accumulate(g * gk * istd)
            return
        dxhat = g * gk
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        x._accumulate(istd * (dxhat - s1 / m - xhat * s2 / m))

    return _from_op(out, (x, gamma, beta), bwd)
