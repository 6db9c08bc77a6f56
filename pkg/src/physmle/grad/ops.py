"""Differentiable primitives.

Every function takes and returns :class:`Tensor`; numpy arrays and Python
scalars are promoted as constants. Backward rules return one gradient per
input, shaped like that input (broadcast dimensions are summed out).
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, make_result


class DimensionError(ValueError):
    pass


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# -- element-wise ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float):
    a = as_tensor(a)
    ad = a.data
    return make_result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    # tanh form: one transcendental and no overflow for large |x|
    out = 0.5 * np.tanh(0.5 * a.data) + 0.5
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def clip(a, lo, hi):
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# -- reductions and shape ---------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return make_result(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw, "mean")


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_result(a.data[idx], (a,), bw, "getitem")


def pad(a, pad_width):
    a = as_tensor(a)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return make_result(np.pad(a.data, pad_width), (a,), lambda g: (g[slices],), "pad")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def norm(a):
    """Euclidean norm over all elements; subgradient 0 at the origin."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad))

    def bw(g):
        if n == 0:
            return (np.zeros_like(ad),)
        return (g * ad / n,)

    return make_result(n, (a,), bw, "norm")


def cosine_similarity(a, b, axis=-1, eps=1e-8):
    """Cosine along ``axis``; pairs whose norm product is below ``eps`` give 0."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    dot = np.sum(ad * bd, axis=axis, keepdims=True)
    na = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(bd * bd, axis=axis, keepdims=True))
    den = na * nb
    small = den < eps
    safe = np.where(small, eps, den)
    cos = dot / safe

    def bw(g):
        g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(small, bd / eps, bd / safe - cos * ad / np.where(na == 0, 1, na * na))
            gb = np.where(small, ad / eps, ad / safe - cos * bd / np.where(nb == 0, 1, nb * nb))
        return (g * ga, g * gb)

    return make_result(np.squeeze(cos, axis=axis), (a, b), bw, "cosine")


# -- convolution and feature-map ops ---------------------------------------


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _conv_geometry(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError("kernel larger than padded input")
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    return (kh, kw), (sh, sw), (ph, pw), (oh, ow)


def conv2d(x, weight, stride=1, padding=0):
    """2-D cross-correlation of (B, C, H, W) with (Co, C, kh, kw)."""
    return conv2d_multi(x, [weight], stride, padding)


def conv2d_multi(x, weights, stride=1, padding=0):
    """Several convolutions of one input, concatenated along channels.

    The patch matrix is built once. Each weight gets its own product, so
    every output slice is bitwise what ``conv2d`` alone would give for it.
    """
    x = as_tensor(x)
    weights = [as_tensor(w) for w in weights]
    if not weights:
        raise ValueError("conv2d_multi needs at least one weight")
    (kh, kw), (sh, sw), (ph, pw), (oh, ow) = _conv_geometry(x, weights[0], stride, padding)
    for w_ in weights[1:]:
        if w_.shape[1:] != weights[0].shape[1:]:
            raise DimensionError("conv2d_multi weights must share input channels and kernel size")
    b, _, h, w = x.shape
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = kernels.im2col(xp, kh, kw, sh, sw, oh, ow)
    w2s = [w_.data.reshape(w_.shape[0], -1) for w_ in weights]
    outs = [w2 @ cols for w2 in w2s]
    out = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
    co = out.shape[1]
    out = out.reshape(b, co, oh, ow)
    bounds = np.cumsum([0] + [w2.shape[0] for w2 in w2s])

    def bw(g):
        g2 = g.reshape(b, co, oh * ow)
        grads = [None]
        for i, w_ in enumerate(weights):
            if w_.requires_grad:
                gi = g2[:, bounds[i] : bounds[i + 1]]
                grads.append(np.matmul(gi, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_.shape))
            else:
                grads.append(None)
        if x.requires_grad:
            w_all = w2s[0] if len(w2s) == 1 else np.concatenate(w2s, axis=0)
            gcols = w_all.T @ g2
            gxp = kernels.col2im(gcols, xp.shape, kh, kw, sh, sw, oh, ow)
            grads[0] = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        return tuple(grads)

    return make_result(out, (x, *weights), bw, "conv2d")


def _normalize(x, axes, gamma, beta, eps, stats=None):
    """Shared normalization; ``stats`` = (mean, var) freezes the statistics."""
    inputs = [x]
    if gamma is not None:
        inputs += [gamma, beta]
    xd = x.data
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    if stats is None:
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        frozen = False
    else:
        mu, var = (np.asarray(s, dtype=xd.dtype).reshape(bshape) for s in stats)
        frozen = True
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    if gamma is not None:
        gd = gamma.data.reshape(bshape)
        out = xhat * gd + beta.data.reshape(bshape)
    else:
        gd = None
        out = xhat
    n = int(np.prod([xd.shape[a] for a in axes]))
    red = tuple(i for i in range(xd.ndim) if i != 1)

    def bw(g):
        dxhat = g * gd if gd is not None else g
        if frozen:
            gx = dxhat * inv
        else:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        if gd is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    res = make_result(out, tuple(inputs), bw, "normalize")
    return res, mu, var


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch statistics in training (running buffers updated in
    place), running averages otherwise."""
    x = as_tensor(x)
    if training:
        out, mu, var = _normalize(x, (0, 2, 3), gamma, beta, eps)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        return out
    out, _, _ = _normalize(x, (0, 2, 3), gamma, beta, eps, stats=(running_mean, running_var))
    return out


def instance_norm(x, gamma=None, beta=None, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes."""
    out, _, _ = _normalize(as_tensor(x), (2, 3), gamma, beta, eps)
    return out


def adaptive_avg_pool2d(x, output_size):
    """Average pool to ``output_size``; input extents must be multiples of it."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    oh, ow = _pair(output_size)
    if h % oh or w % ow:
        raise DimensionError(f"cannot pool {h}x{w} evenly to {oh}x{ow}")
    fh, fw = h // oh, w // ow
    out = x.data.reshape(b, c, oh, fh, ow, fw).mean(axis=(3, 5))

    def bw(g):
        g6 = np.broadcast_to((g / (fh * fw))[:, :, :, None, :, None], (b, c, oh, fh, ow, fw))
        return (g6.reshape(b, c, h, w),)

    return make_result(out, (x,), bw, "avgpool")


def upsample_nearest(x, scale):
    """Nearest-neighbour upsampling of the two trailing axes by (sh, sw)."""
    x = as_tensor(x)
    sh, sw = _pair(scale)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, sh, axis=2), sw, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, sh, w, sw).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw, "upsample")


# -- operator sugar ---------------------------------------------------------

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, p: power(self, p)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__getitem__ = lambda self, idx: getitem(self, idx)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, *shape: reshape(self, *shape)
Tensor.transpose = lambda self, axes=None: transpose(self, axes)
Tensor.T = property(lambda self: transpose(self))
Tensor.relu = lambda self: relu(self)
Tensor.sigmoid = lambda self: sigmoid(self)
Tensor.abs = lambda self: abs_(self)
Tensor.exp = lambda self: exp(self)
Tensor.log = lambda self: log(self)
Tensor.sqrt = lambda self: sqrt(self)
