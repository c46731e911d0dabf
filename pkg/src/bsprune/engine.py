"""Numpy kernels for the layers a prunable network is built from.

Activations are NHWC. Parameters are stored as float32; every kernel here
accumulates in float64 and returns float64 activations, so reductions
(matmuls, BN statistics, the loss) do not lose precision.

Each ``*_forward`` returning a cache has a matching ``*_backward``. Backward
kernels only produce gradients for parameters that can be trainable (scaling
vectors, BN affine terms, the classifier); frozen kernels get none.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def output_extent(size, kernel, stride, padding):
    """Output length and (before, after) padding along one spatial axis."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, (total // 2, total - total // 2)
    if padding == "valid":
        out = (size - kernel) // stride + 1
        if out <= 0:
            raise ShapeError(
                f"spatial underflow: extent {size} with kernel {kernel}, stride {stride}")
        return out, (0, 0)
    raise ShapeError(f"unknown padding {padding!r}")


def _pad(x, kh, kw, stride, padding, value=0.0):
    _, h, w, _ = x.shape
    oh, ph = output_extent(h, kh, stride, padding)
    ow, pw = output_extent(w, kw, stride, padding)
    if ph != (0, 0) or pw != (0, 0):
        x = np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=value)
    return x, oh, ow, (ph, pw)


def _windows(xp, kh, kw, stride, oh, ow):
    # (b, oh, ow, c, kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def im2col(x, kh, kw, stride=1, padding="same"):
    """Patch matrix whose columns enumerate (kh, kw, ci) in C order.

    Returns ``(cols, (oh, ow), pads)`` with ``cols`` shaped ``(b*oh*ow, kh*kw*ci)``.
    """
    xp, oh, ow, pads = _pad(x, kh, kw, stride, padding)
    win = _windows(xp, kh, kw, stride, oh, ow)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(x.shape[0] * oh * ow, -1)
    return cols, (oh, ow), pads


def col2im(dcols, x_shape, kh, kw, stride, out_hw, pads):
    b, h, w, c = x_shape
    oh, ow = out_hw
    (pt, pb), (pl, pr) = pads
    dxp = np.zeros((b, h + pt + pb, w + pl + pr, c), dtype=dcols.dtype)
    dcols = dcols.reshape(b, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (oh - 1) * stride + 1 : stride,
                j : j + (ow - 1) * stride + 1 : stride] += dcols[:, :, :, i, j]
    return dxp[:, pt : pt + h, pl : pl + w]


# --- convolution -----------------------------------------------------------

def conv2d_forward(x, kernel, bias=None, stride=1, padding="same", return_cache=False):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-D kernel, got {x.shape} and {kernel.shape}")
    kh, kw, ci, co = kernel.shape
    if x.shape[3] != ci:
        raise ShapeError(f"conv2d input {x.shape} does not match kernel {kernel.shape}")
    x = np.asarray(x, dtype=np.float64)
    w2 = kernel.reshape(kh * kw * ci, co).astype(np.float64)
    b = x.shape[0]
    if kh == 1 and kw == 1 and stride == 1:
        cols, (oh, ow), pads = x.reshape(-1, ci), x.shape[1:3], ((0, 0), (0, 0))
    else:
        cols, (oh, ow), pads = im2col(x, kh, kw, stride, padding)
    out = cols @ w2
    if bias is not None:
        out += bias
    out = out.reshape(b, oh, ow, co)
    if return_cache:
        return out, (x.shape, w2, (kh, kw, stride), (oh, ow), pads)
    return out


def conv2d_backward_input(dout, cache):
    x_shape, w2, (kh, kw, stride), out_hw, pads = cache
    dcols = dout.reshape(-1, dout.shape[-1]) @ w2.T
    if kh == 1 and kw == 1 and stride == 1:
        return dcols.reshape(x_shape)
    return col2im(dcols, x_shape, kh, kw, stride, out_hw, pads)


# --- basis scaling ---------------------------------------------------------

def basis_scaling_forward(z, s, vbar_t, bias=None, return_cache=False):
    """Channel-wise scale by ``s`` then a 1x1 convolution with ``vbar_t``."""
    r = vbar_t.shape[0]
    if z.shape[-1] != r or s.shape != (r,):
        raise ShapeError(
            f"basis scaling input {z.shape} / s {s.shape} do not match Vbar^T {vbar_t.shape}")
    zf = np.asarray(z, dtype=np.float64).reshape(-1, r)
    vt = vbar_t.astype(np.float64)
    out = (zf * s.astype(np.float64)) @ vt
    if bias is not None:
        out += bias
    out = out.reshape(*z.shape[:-1], vbar_t.shape[1])
    if return_cache:
        return out, (zf, s.astype(np.float64), vt, z.shape)
    return out


def basis_scaling_backward(dout, cache):
    zf, s, vt, z_shape = cache
    dscaled = dout.reshape(-1, vt.shape[1]) @ vt.T
    ds = np.einsum("nr,nr->r", dscaled, zf)
    return (dscaled * s).reshape(z_shape), ds


# --- batch normalization ---------------------------------------------------

def batchnorm_forward(x, gamma, beta, moving_mean, moving_var, mode="infer",
                      eps=BN_EPSILON, momentum=BN_MOMENTUM, update_stats=True,
                      return_cache=False):
    """Per-channel normalization over every axis but the last.

    In ``train`` mode batch statistics are used and, when ``update_stats``,
    the moving statistics are updated in place by exponential averaging.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"BN parameters of length {gamma.shape[0]} for {c} channels")
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            moving_mean *= momentum
            moving_mean += ((1 - momentum) * mean).astype(moving_mean.dtype)
            moving_var *= momentum
            moving_var += ((1 - momentum) * var).astype(moving_var.dtype)
    elif mode == "infer":
        mean = moving_mean.astype(np.float64)
        var = moving_var.astype(np.float64)
    else:
        raise ValueError(f"unknown BN mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    if return_cache:
        return out, (mode, xhat, inv_std, gamma.astype(np.float64))
    return out


def batchnorm_backward(dout, cache):
    mode, xhat, inv_std, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    n = dout.size // dout.shape[-1]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# --- pooling ---------------------------------------------------------------

def maxpool_forward(x, pool=2, stride=None, padding="valid", return_cache=False):
    stride = stride or pool
    x = np.asarray(x, dtype=np.float64)
    xp, oh, ow, pads = _pad(x, pool, pool, stride, padding, value=-np.inf)
    win = _windows(xp, pool, pool, stride, oh, ow)
    flat = win.reshape(*win.shape[:4], pool * pool)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if return_cache:
        return out, (x.shape, arg, pool, stride, (oh, ow), pads)
    return out


def maxpool_backward(dout, cache):
    x_shape, arg, pool, stride, (oh, ow), pads = cache
    b, h, w, c = x_shape
    (pt, pb), (pl, pr) = pads
    dxp = np.zeros((b, h + pt + pb, w + pl + pr, c))
    for i in range(pool):
        for j in range(pool):
            hit = arg == i * pool + j
            dxp[:, i : i + (oh - 1) * stride + 1 : stride,
                j : j + (ow - 1) * stride + 1 : stride] += np.where(hit, dout, 0.0)
    return dxp[:, pt : pt + h, pl : pl + w]


def avgpool_forward(x, pool=2, stride=None, padding="valid", return_cache=False):
    """Average pooling; padded positions are excluded from the mean."""
    stride = stride or pool
    x = np.asarray(x, dtype=np.float64)
    xp, oh, ow, pads = _pad(x, pool, pool, stride, padding)
    total = _windows(xp, pool, pool, stride, oh, ow).sum(axis=(-2, -1))
    ones, *_ = _pad(np.ones((1,) + x.shape[1:3] + (1,)), pool, pool, stride, padding)
    count = _windows(ones, pool, pool, stride, oh, ow).sum(axis=(-2, -1))
    out = total / count
    if return_cache:
        return out, (x.shape, count, pool, stride, (oh, ow), pads)
    return out


def avgpool_backward(dout, cache):
    x_shape, count, pool, stride, (oh, ow), pads = cache
    b, h, w, c = x_shape
    (pt, pb), (pl, pr) = pads
    share = dout / count
    dxp = np.zeros((b, h + pt + pb, w + pl + pr, c))
    for i in range(pool):
        for j in range(pool):
            dxp[:, i : i + (oh - 1) * stride + 1 : stride,
                j : j + (ow - 1) * stride + 1 : stride] += share
    return dxp[:, pt : pt + h, pl : pl + w]


def global_avg_pool(x):
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global average pooling needs NHWC input, got {x.shape}")
    return np.asarray(x, dtype=np.float64).mean(axis=(1, 2))


def global_avg_pool_backward(dout, x_shape):
    _, h, w, _ = x_shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()


# --- classifier ------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels outside [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted[np.arange(n), labels] - log_norm
    loss = float(-log_prob.mean())
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def dense_softmax_ce(x, weight, bias, labels):
    logits = np.asarray(x, dtype=np.float64) @ weight.astype(np.float64) + bias
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss, logits


# --- optimization ----------------------------------------------------------

def sgd_step(params, grads, velocities, lr, momentum=0.9, nonnegative=()):
    """One momentum SGD update, in place.

    ``velocity = momentum * velocity - lr * grad; param += velocity``.
    Keys listed in ``nonnegative`` are clamped at zero afterwards.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for key, grad in grads.items():
        p = params[key]
        v = velocities.get(key)
        if v is None:
            v = velocities[key] = np.zeros(p.shape, dtype=np.float64)
        v *= momentum
        v -= lr * grad
        p += v.astype(p.dtype)
        if key in nonnegative:
            np.maximum(p, 0, out=p)
    return params


def cosine_lr(t, total, lr_min=1e-4, lr_max=1e-1):
    if total <= 0:
        raise ValueError("cosine schedule needs a positive number of steps")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))
