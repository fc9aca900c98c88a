"""Differentiable layer primitives on NCHW tensors.

Every op also accepts an unbatched ``(C, H, W)`` input and returns an
unbatched result.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, DimensionError
from .tensor import Tensor, make_result, reshape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(fn):
    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"{fn.__name__} expects (C,H,W) or (N,C,H,W), got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _out_size(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded {axis} extent {n + 2 * padding}")
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N*Ho*Wo, C*k*k) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto a padded canvas."""
    n, c, hp, wp = shape
    patches = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    canvas = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            canvas[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += patches[
                :, :, i, j
            ]
    return canvas


def _check_kernel(weight: Tensor, c_in: int, conv_axis: int, name: str) -> int:
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"{name}: weight must be (a,b,k,k), got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"{name}: kernel size must be odd, got {k}")
    if weight.shape[conv_axis] != c_in:
        raise DimensionError(
            f"{name}: input channels {c_in} do not match weight axis {conv_axis} ({weight.shape[conv_axis]})"
        )
    return k


@_batched
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C_in,H,W) with ``weight`` (C_out,C_in,k,k).

    Output size per axis is ``(n + 2*padding - k) // stride + 1``.
    """
    n, c_in, h, w = x.shape
    k = _check_kernel(weight, c_in, 1, "conv2d")
    c_out = weight.shape[0]
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho = _out_size(h, k, stride, padding, "H")
    wo = _out_size(w, k, stride, padding, "W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    padded_shape = xp.shape

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (gflat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _col2im(gflat @ wmat, padded_shape, k, stride, ho, wo)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        db = gflat.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), inputs, bw)


@_batched
def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int | None = None,
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`.

    ``weight`` is (C_in, C_out, k, k): the same array a forward conv from
    C_out to C_in channels would use. ``output_padding`` defaults to
    ``stride - 1`` so that stride 2 with ``padding = k // 2`` doubles H and W.
    """
    if output_padding is None:
        output_padding = stride - 1
    n, c_in, h, w = x.shape
    k = _check_kernel(weight, c_in, 0, "conv2d_transpose")
    c_out = weight.shape[1]
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d_transpose: bias shape {bias.shape} != ({c_out},)")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d_transpose: non-positive output size {(ho, wo)}")
    canvas_shape = (n, c_out, ho + 2 * padding, wo + 2 * padding)

    xflat = x.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wmat = weight.data.reshape(c_in, -1)
    canvas = _col2im(xflat @ wmat, canvas_shape, k, stride, h, w)
    out = canvas[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, k, stride, h, w)
        dx = (gcols @ wmat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2) if x.requires_grad else None
        dw = (xflat.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, bw)


@_batched
def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W) with out[c, y*r+dy, x*r+dx] = in[c*r*r + dy*r + dx, y, x]."""
    n, cr2, h, w = x.shape
    if cr2 % (r * r):
        raise DimensionError(f"pixel_shuffle: channels {cr2} not divisible by r^2={r * r}")
    c = cr2 // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr2, h, w),)

    return make_result(out, (x,), bw)


@_batched
def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse index map of :func:`pixel_shuffle`."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError(f"pixel_unshuffle: spatial dims {(hr, wr)} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bw(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr),)

    return make_result(out, (x,), bw)


@_batched
def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial dims must be even, got H={h}, W={w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return make_result(out, (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization of an (N,C,H,W) tensor.

    In train mode the batch statistics are used and the running buffers are
    replaced by their momentum-updated values (unbiased variance). In eval
    mode the running buffers are read and left untouched.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(f"batch_norm: {name} shape {t.shape} != ({c},)")
    xd = x.data
    g4 = gamma.data.reshape(1, c, 1, 1)

    if not train:
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (xd - running_mean.data.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

        def bw_eval(g):
            dx = g * (g4 * inv_std.reshape(1, c, 1, 1)) if x.requires_grad else None
            return (dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"batch_norm in train mode needs N*H*W >= 2, got {m}")
    mu = xd.mean(axis=(0, 2, 3))
    centered = xd - mu.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu).astype(running_mean.dtype)
    running_var.data = ((1 - momentum) * running_var.data + momentum * var * (m / (m - 1))).astype(
        running_var.dtype
    )

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * g4
            s1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv_std * (dxhat - s1 - xhat * s2)
        return (dx, dgamma, dbeta)

    return make_result(out, (x, gamma, beta), bw)


def elu(x: Tensor) -> Tensor:
    """ELU with unit alpha: x for x > 0, exp(x) - 1 otherwise."""
    xd = x.data
    neg = np.expm1(np.minimum(xd, 0))
    out = np.where(xd > 0, xd, neg)
    return make_result(out, (x,), lambda g: (g * np.where(xd > 0, 1.0, neg + 1.0).astype(xd.dtype),))


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared element differences."""
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean())

    def bw(g):
        d = (2.0 / n) * g * diff
        return (d, -d)

    return make_result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N,in) @ weight (in,out) + bias (out,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: incompatible shapes {x.shape}, {weight.shape}, {bias.shape}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        dx = g @ weight.data.T if x.requires_grad else None
        return (dx, x.data.T @ g, g.sum(axis=0))

    return make_result(out, (x, weight, bias), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy of sigmoid(logits) against 0/1 ``targets``."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        p = 1.0 / (1.0 + np.exp(-z))
        return (g * (p - t) / n,)

    return make_result(np.asarray(loss.mean()), (logits,), bw)
