"""Channels-last layers with explicit backward passes."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

SELU_ALPHA = kernels.SELU_ALPHA
SELU_SCALE = kernels.SELU_SCALE


def selu(x, inplace=False):
    """SELU; ``inplace`` overwrites ``x`` (use it on freshly computed pre-activations)."""
    neg = np.minimum(x, 0)
    np.expm1(neg, out=neg)
    neg *= SELU_SCALE * SELU_ALPHA
    out = x if inplace else np.empty_like(x)
    np.maximum(x, 0, out=out)
    out *= SELU_SCALE
    out += neg
    return out


def selu_backward(y, dy):
    """Gradient through SELU given its output ``y``: slope is y + scale*alpha where y <= 0."""
    return kernels.selu_backward(y, dy)


def xavier_uniform(rng, shape, dtype):
    """Glorot uniform; fan counts include the receptive field of conv kernels."""
    receptive = math.prod(shape[:-2]) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_same(x, w, b=None):
    """N-d convolution (cross-correlation) with zero 'same' padding.

    x: (*lead, *spatial, C); w: (*kernel, C, F). The number of spatial axes is
    ``w.ndim - 2``. Returns (y, cols) where cols is the im2col matrix kept for
    the backward pass.
    """
    n = w.ndim - 2
    ks = w.shape[:n]
    C, F = w.shape[-2:]
    nlead = x.ndim - 1 - n
    lead, spatial = x.shape[:nlead], x.shape[nlead:-1]
    pads = [(0, 0)] * nlead + [(k // 2, k - 1 - k // 2) for k in ks] + [(0, 0)]
    xp = np.pad(x, pads)
    win = sliding_window_view(xp, ks, axis=tuple(range(nlead, nlead + n)))
    # win: lead + spatial + (C,) + ks  ->  lead + spatial + ks + (C,)
    base = nlead + n
    perm = list(range(base)) + list(range(base + 1, base + 1 + n)) + [base]
    cols = win.transpose(perm).reshape(-1, math.prod(ks) * C)
    y = cols @ w.reshape(-1, F)
    if b is not None:
        y += b
    return y.reshape(lead + spatial + (F,)), cols


def conv_same_backward(dy, cols, w, x_shape, need_dx=True):
    n = w.ndim - 2
    ks = w.shape[:n]
    C, F = w.shape[-2:]
    dyf = dy.reshape(-1, F)
    dw = (cols.T @ dyf).reshape(w.shape)
    db = dyf.sum(axis=0)
    if not need_dx:
        return None, dw, db
    nlead = len(x_shape) - 1 - n
    lead, spatial = tuple(x_shape[:nlead]), tuple(x_shape[nlead:-1])
    dcols = (dyf @ w.reshape(-1, F).T).reshape(lead + spatial + ks + (C,))
    if n == 1:
        M = math.prod(lead)
        return kernels.col2im_time(dcols.reshape(M, spatial[0], ks[0], C)).reshape(x_shape), dw, db
    padded = tuple(s + k - 1 for s, k in zip(spatial, ks))
    dxp = np.zeros(lead + padded + (C,), dtype=dy.dtype)
    full = (slice(None),) * nlead
    for off in np.ndindex(*ks):
        target = full + tuple(slice(o, o + s) for o, s in zip(off, spatial))
        dxp[target] += dcols[(slice(None),) * (nlead + n) + off]
    crop = full + tuple(slice(k // 2, k // 2 + s) for k, s in zip(ks, spatial))
    return dxp[crop], dw, db


def maxpool2(x):
    """Max pool by 2 along axis 1 of (M, T, C), ceil mode."""
    return kernels.maxpool2(x)


def maxpool2_backward(dy, first, T):
    return kernels.maxpool2_backward(dy, first, T)


def dropout_mask(rng, shape, rate, dtype):
    if rate <= 0 or rng is None:
        return None
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)
