"""Differentiable primitives over :class:`~picanet.tensor.Tensor`.

Feature maps use the N x C x H x W layout.  Each primitive computes its
forward value with numpy and registers a hand-written backward rule on the
active tape.
"""

from __future__ import annotations

import functools
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, note_branch, record, record1

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ----------------------------------------------------------------------------
# elementwise arithmetic


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return record1("cast", [x], x.data.astype(dtype),
                   lambda g: [g.astype(src)])


def add(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return record1("add", [a, b], a.data + b.data,
                   lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])


def sub(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return record1("sub", [a, b], a.data - b.data,
                   lambda g: [_unbroadcast(g, sa), _unbroadcast(-g, sb)])


def mul(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return record1("mul", [a, b], ad * bd,
                   lambda g: [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)])


def div(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd
    return record1("div", [a, b], out,
                   lambda g: [_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)])


def neg(x: Tensor) -> Tensor:
    return record1("neg", [x], -x.data, lambda g: [-g])


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record1("exp", [x], out, lambda g: [g * out])


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record1("log", [x], np.log(xd), lambda g: [g / xd])


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    note_branch(inside)
    return record1("clip", [x], np.clip(xd, lo, hi), lambda g: [g * inside])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ConfigurationError("matmul operands must be at least 2-D")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return [_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)]

    return record1("matmul", [a, b], np.matmul(ad, bd), bw)


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]

    return record1("sum", [x], np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, shape).copy()]

    return record1("mean", [x], np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record1("reshape", [x], x.data.reshape(shape), lambda g: [g.reshape(src)])


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return record1("transpose", [x], np.transpose(x.data, axes),
                   lambda g: [np.transpose(g, inv)])


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(index)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return [gx]

    return record1("getitem", [x], x.data[index], bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    return record1("concat", list(xs), np.concatenate([t.data for t in xs], axis=axis),
                   lambda g: np.split(g, bounds, axis=axis))


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into ``x.shape[axis]`` tensors with one tape record."""
    n = x.shape[axis]
    parts = [np.take(x.data, i, axis=axis) for i in range(n)]

    def bw(gs):
        return [np.stack([np.zeros_like(parts[i]) if g is None else g
                          for i, g in enumerate(gs)], axis=axis)]

    return record("unstack", [x], parts, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(xs)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(n)]

    return record1("stack", list(xs), np.stack([t.data for t in xs], axis=axis), bw)


# ----------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    # NaN <= 0 is False, so NaN passes through for anomaly detection
    out = np.where(x.data <= 0, 0, x.data).astype(x.dtype)
    return record1("relu", [x], out, lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record1("sigmoid", [x], out, lambda g: [g * out * (1 - out)])


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record1("tanh", [x], out, lambda g: [g * (1 - out * out)])


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(x)


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax across axis 1 with max-subtraction."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return [out * (g - (g * out).sum(axis=1, keepdims=True))]

    return record1("channel_softmax", [x], out, bw)


# ----------------------------------------------------------------------------
# convolution, pooling, normalisation, resampling


def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1,
                     padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation."""
    N, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ConfigurationError(f"conv2d: kernel expects {Ci} input channels, input has {C}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    Ho = conv_output_size(H, kh, stride, dilation, padding)
    Wo = conv_output_size(W, kw, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"conv2d: input {H}x{W} too small for kernel/dilation")
    dtype = np.result_type(x.dtype, weight.dtype)
    xd = x.data
    w2 = weight.data.reshape(Co, Ci * kh * kw)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(N, C, H * W)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=dtype)
        rs, cs = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                cols[:, :, i, j] = xp[:, :, r0:r0 + rs:stride, c0:c0 + cs:stride]
        cols = cols.reshape(N, C * kh * kw, Ho * Wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(N, Co, Ho, Wo)

    def bw(g):
        g3 = g.reshape(N, Co, Ho * Wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gx = gcols.reshape(N, C, H, W)
            else:
                gcols = gcols.reshape(N, C, kh, kw, Ho, Wo)
                gxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
                rs, cs = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        r0, c0 = i * dilation, j * dilation
                        gxp[:, :, r0:r0 + rs:stride, c0:c0 + cs:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return [gx, gw, gb] if bias is not None else [gx, gw]

    inputs = [x, weight, bias] if bias is not None else [x, weight]
    return record1("conv2d", inputs, out, bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    N, C, H, W = x.shape
    if H % size or W % size:
        raise ConfigurationError(f"max_pool2d: {H}x{W} not divisible by {size}")
    Ho, Wo = H // size, W // size
    win = x.data.reshape(N, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, Ho, Wo, size * size)
    arg = win.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((N, C, Ho, Wo, size * size), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(N, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return [gw.reshape(N, C, H, W)]

    return record1("max_pool2d", [x], out, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and the running
    statistics are updated in place (unbiased variance, as in the original
    BN formulation); in eval mode the running statistics are used.
    """
    xd = x.data
    N, C, H, W = xd.shape
    m = N * H * W
    if m < 1:
        raise ConfigurationError("batch_norm: empty batch")
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu = running_mean.data.astype(xd.dtype)
        var = running_var.data.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * inv[:, None, None]
    gd = gamma.data[:, None, None]
    out = xhat * gd + beta.data[:, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv[:, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[:, None, None]
        return [gx, gg, gb]

    return record1("batch_norm", [x, gamma, beta], out.astype(xd.dtype), bw)


@functools.lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype_name: str) -> np.ndarray:
    """Half-pixel bilinear x2 interpolation matrix (2n x n), edges clamped."""
    u = np.zeros((2 * n, n), dtype=dtype_name)
    for i in range(n):
        u[2 * i, i] += 0.75
        u[2 * i, max(i - 1, 0)] += 0.25
        u[2 * i + 1, i] += 0.75
        u[2 * i + 1, min(i + 1, n - 1)] += 0.25
    u.setflags(write=False)
    return u


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Fixed bilinear x2 upsampling; constant maps stay constant."""
    N, C, H, W = x.shape
    uh = _upsample_matrix(H, x.dtype.name)
    uw = _upsample_matrix(W, x.dtype.name)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return record1("bilinear_upsample2x", [x], out,
                   lambda g: [np.matmul(np.matmul(uh.T, g), uw)])


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigurationError("concat_channels: empty input list")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ConfigurationError(
                f"concat_channels: {t.shape} does not match batch/spatial extents {(n, h, w)}")
    if len(xs) == 1:
        return xs[0]
    return concat(xs, axis=1)


# ----------------------------------------------------------------------------
# recurrent cell


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order in the weight columns is (i, f, g, o).

    ``x``: B x I, ``h``/``c``: B x Hd, ``w_ih``: I x 4Hd, ``w_hh``: Hd x 4Hd.
    """
    hd = h.shape[-1]
    if c.shape[-1] != hd or w_hh.shape != (hd, 4 * hd) or bias.shape != (4 * hd,) \
            or w_ih.shape[1] != 4 * hd:
        raise ConfigurationError("lstm_cell: hidden sizes of state and parameters disagree")
    xd, hprev, cprev = x.data, h.data, c.data
    a = xd @ w_ih.data + hprev @ w_hh.data + bias.data
    e = np.exp(-np.abs(a))
    sig = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    ig, fg, og = sig[:, :hd], sig[:, hd:2 * hd], sig[:, 3 * hd:]
    gg = np.tanh(a[:, 2 * hd:3 * hd])
    c_new = fg * cprev + ig * gg
    tc = np.tanh(c_new)
    h_new = og * tc

    def bw(gs):
        gh, gc = gs
        dc = np.zeros_like(c_new) if gc is None else gc.copy()
        do = np.zeros_like(h_new)
        if gh is not None:
            dc += gh * og * (1 - tc * tc)
            do = gh * tc
        da = np.concatenate([dc * gg * ig * (1 - ig),
                             dc * cprev * fg * (1 - fg),
                             dc * ig * (1 - gg * gg),
                             do * og * (1 - og)], axis=1)
        return [da @ w_ih.data.T if x.requires_grad else None,
                da @ w_hh.data.T if h.requires_grad else None,
                dc * fg if c.requires_grad else None,
                xd.T @ da if w_ih.requires_grad else None,
                hprev.T @ da if w_hh.requires_grad else None,
                da.sum(axis=0) if bias.requires_grad else None]

    h_out, c_out = record("lstm_cell", [x, h, c, w_ih, w_hh, bias], [h_new, c_new], bw)
    return h_out, c_out


# ----------------------------------------------------------------------------
# loss


def binary_cross_entropy(p: Tensor, target) -> Tensor:
    """Mean BCE with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if y.shape != p.shape:
        raise ConfigurationError(f"binary_cross_entropy: shapes {p.shape} vs {y.shape}")
    pd = p.data
    pc = np.clip(pd, BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (pd >= BCE_CLAMP) & (pd <= 1 - BCE_CLAMP)
    note_branch(inside)
    n = pd.size
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()

    def bw(g):
        return [g * inside * (-y / pc + (1 - y) / (1 - pc)) / n]

    return record1("binary_cross_entropy", [p], np.asarray(loss, dtype=p.dtype), bw)
