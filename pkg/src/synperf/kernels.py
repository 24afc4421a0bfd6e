"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``SYNPERF_DISABLE_NUMBA=1`` before import to force the numpy path. Both
implementations of every kernel are reachable through ``NUMBA_IMPL`` and
``NUMPY_IMPL`` so tests and the benchmark can compare them directly.
"""

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SYNPERF_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# oscillation index truncated SVD


def _osvd_numpy(V, s_inv, proj, limit, n_keep):
    """Residues for each voxel at the largest rank whose oscillation index <= limit.

    V: (L, L) right singular vectors as columns; s_inv: (L,) reciprocals of
    singular values in descending order; proj: (n, L) = U^T c per voxel.
    Returns (residues (n, L), ranks (n,)).
    """
    n, L = proj.shape
    out = np.zeros((n, L), dtype=np.float64)
    ranks = np.ones(n, dtype=np.int64)
    chunk = max(1, 2_000_000 // (L * L))
    for start in range(0, n, chunk):
        coef = proj[start:start + chunk] * s_inv[None, :]  # (m, L)
        # partial sums over rank: res[m, r, t] = sum_{j<=r} coef[m, j] V[t, j]
        res = np.cumsum(coef[:, :, None] * V.T[None, :, :], axis=1)
        res = res[:, :n_keep]
        d2 = np.abs(res[:, :, 2:] - 2.0 * res[:, :, 1:-1] + res[:, :, :-2]).sum(axis=2)
        peak = np.abs(res).max(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            oi = np.where(peak > 0, d2 / (L * peak), np.inf)
        ok = oi <= limit
        # largest rank (1-based) satisfying the limit, rank 1 if none does
        last = np.where(ok.any(axis=1), n_keep - np.argmax(ok[:, ::-1], axis=1), 1)
        ranks[start:start + chunk] = last
        out[start:start + chunk] = res[np.arange(len(last)), last - 1]
    return out, ranks


@_njit
def _osvd_numba(V, s_inv, proj, limit, n_keep):
    n, L = proj.shape
    out = np.zeros((n, L))
    ranks = np.ones(n, dtype=np.int64)
    res = np.zeros(L)
    for i in range(n):
        res[:] = 0.0
        best = 1
        for r in range(n_keep):
            c = proj[i, r] * s_inv[r]
            for t in range(L):
                res[t] += c * V[t, r]
            peak = 0.0
            for t in range(L):
                a = abs(res[t])
                if a > peak:
                    peak = a
            if peak == 0.0:
                continue
            d2 = 0.0
            for t in range(2, L):
                d2 += abs(res[t] - 2.0 * res[t - 1] + res[t - 2])
            if d2 / (L * peak) <= limit:
                best = r + 1
        ranks[i] = best
        # rebuild at the chosen rank
        for t in range(L):
            out[i, t] = 0.0
        for r in range(best):
            c = proj[i, r] * s_inv[r]
            for t in range(L):
                out[i, t] += c * V[t, r]
    return out, ranks


# ---------------------------------------------------------------------------
# temporal Gaussian smoothing, half-sample symmetric boundary


def gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return w / w.sum()


def _smooth_numpy(x, weights):
    """Convolve each column of ``x`` (T, V) along axis 0 with ``weights``."""
    radius = len(weights) // 2
    T = x.shape[0]
    xp = np.pad(x, ((radius, radius), (0, 0)), mode="symmetric") if radius < T else _symmetric_index_pad(x, radius)
    out = np.zeros(x.shape, dtype=np.float64)
    for j, w in enumerate(weights):
        out += w * xp[j:j + T]
    return out


def _symmetric_index_pad(x, radius):
    T = x.shape[0]
    idx = np.arange(-radius, T + radius)
    period = 2 * T
    idx = np.mod(idx, period)
    idx = np.where(idx >= T, period - 1 - idx, idx)
    return x[idx]


@_njit
def _smooth_numba(x, weights):
    T, nv = x.shape
    radius = len(weights) // 2
    out = np.zeros((T, nv))
    period = 2 * T
    for t in range(T):
        for j in range(len(weights)):
            src = (t + j - radius) % period
            if src < 0:
                src += period
            if src >= T:
                src = period - 1 - src
            w = weights[j]
            for v in range(nv):
                out[t, v] += w * x[src, v]
    return out


# ---------------------------------------------------------------------------
# max pooling by 2 along axis 1 (ceil mode), channels last


def _maxpool2_numpy(x):
    M, T, C = x.shape
    T2 = (T + 1) // 2
    if T % 2:
        x = np.concatenate([x, x[:, -1:, :]], axis=1)
    xr = x.reshape(M, T2, 2, C)
    first = xr[:, :, 0, :] >= xr[:, :, 1, :]
    out = np.where(first, xr[:, :, 0, :], xr[:, :, 1, :])
    return out, first


def _maxpool2_backward_numpy(dy, first, T):
    M, T2, C = dy.shape
    dx = np.zeros((M, 2 * T2, C), dtype=dy.dtype)
    dx[:, 0::2, :] = np.where(first, dy, 0)
    dx[:, 1::2, :] = np.where(first, 0, dy)
    return dx[:, :T, :]


@_njit
def _maxpool2_numba(x):
    M, T, C = x.shape
    T2 = (T + 1) // 2
    out = np.empty((M, T2, C), dtype=x.dtype)
    first = np.empty((M, T2, C), dtype=np.bool_)
    for m in range(M):
        for t in range(T2):
            a = 2 * t
            b = a + 1 if a + 1 < T else a
            for c in range(C):
                va = x[m, a, c]
                vb = x[m, b, c]
                if va >= vb:
                    out[m, t, c] = va
                    first[m, t, c] = True
                else:
                    out[m, t, c] = vb
                    first[m, t, c] = False
    return out, first


@_njit
def _maxpool2_backward_numba(dy, first, T):
    M, T2, C = dy.shape
    dx = np.zeros((M, T, C), dtype=dy.dtype)
    for m in range(M):
        for t in range(T2):
            a = 2 * t
            b = a + 1 if a + 1 < T else a
            for c in range(C):
                if first[m, t, c]:
                    dx[m, a, c] += dy[m, t, c]
                else:
                    dx[m, b, c] += dy[m, t, c]
    return dx


# ---------------------------------------------------------------------------
# col2im for temporal convolutions: fold (M, T, K, C) window gradients back
# onto the (M, T, C) input, dropping the zero-padding frames


def _col2im_time_numpy(dcols):
    M, T, K, C = dcols.shape
    dxp = np.zeros((M, T + K - 1, C), dtype=dcols.dtype)
    for o in range(K):
        dxp[:, o:o + T] += dcols[:, :, o]
    return np.ascontiguousarray(dxp[:, K // 2:K // 2 + T])


@_njit
def _col2im_time_numba(dcols):
    M, T, K, C = dcols.shape
    h = K // 2
    dx = np.zeros((M, T, C), dtype=dcols.dtype)
    for m in range(M):
        for t in range(T):
            for o in range(K):
                s = t + o - h
                if 0 <= s < T:
                    for c in range(C):
                        dx[m, s, c] += dcols[m, t, o, c]
    return dx


# ---------------------------------------------------------------------------
# SELU backward from the activation output (the forward stays numpy: its
# vectorized exp beats a scalar loop)

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def _selu_backward_numpy(y, dy):
    slope = np.minimum(y, 0)
    slope += SELU_SCALE * SELU_ALPHA
    np.copyto(slope, SELU_SCALE, where=y > 0)
    slope *= dy
    return slope


@_njit
def _selu_backward_numba(y, dy):
    yf = y.ravel()
    df = dy.ravel()
    out = np.empty_like(df)
    pos = yf.dtype.type(SELU_SCALE)
    neg = yf.dtype.type(SELU_SCALE * SELU_ALPHA)
    for i in range(yf.size):
        v = yf[i]
        out[i] = df[i] * (pos if v > 0 else v + neg)
    return out.reshape(dy.shape)


# ---------------------------------------------------------------------------
# weighted Laplace negative log-likelihood with gradients


def _laplace_numpy(p, p_hat, log_b, lo, hi, w_in, w_out, weighted):
    """Per-voxel loss and gradients w.r.t. p_hat and log_b (all float64, flat)."""
    diff = p_hat - p
    ad = np.abs(diff)
    inv_b = np.exp(-log_b)
    if weighted:
        inside = (np.maximum(p, p_hat) >= lo) & (np.minimum(p, p_hat) <= hi)
        w = np.where(inside, w_in, w_out)
    else:
        w = np.ones_like(p)
    loss = w * (log_b + ad * inv_b)
    g_hat = w * np.sign(diff) * inv_b
    g_logb = w * (1.0 - ad * inv_b)
    return loss, g_hat, g_logb


@_njit
def _laplace_numba(p, p_hat, log_b, lo, hi, w_in, w_out, weighted):
    n = p.shape[0]
    loss = np.empty(n)
    g_hat = np.empty(n)
    g_logb = np.empty(n)
    for i in range(n):
        d = p_hat[i] - p[i]
        ad = abs(d)
        inv_b = math.exp(-log_b[i])
        w = 1.0
        if weighted:
            lo_v = min(p[i], p_hat[i])
            hi_v = max(p[i], p_hat[i])
            w = w_in if (hi_v >= lo and lo_v <= hi) else w_out
        loss[i] = w * (log_b[i] + ad * inv_b)
        s = 0.0
        if d > 0:
            s = 1.0
        elif d < 0:
            s = -1.0
        g_hat[i] = w * s * inv_b
        g_logb[i] = w * (1.0 - ad * inv_b)
    return loss, g_hat, g_logb


NUMPY_IMPL = {
    "osvd": _osvd_numpy,
    "smooth": _smooth_numpy,
    "maxpool2": _maxpool2_numpy,
    "maxpool2_backward": _maxpool2_backward_numpy,
    "laplace": _laplace_numpy,
    "selu_backward": _selu_backward_numpy,
    "col2im_time": _col2im_time_numpy,
}

NUMBA_IMPL = {
    "osvd": _osvd_numba,
    "smooth": _smooth_numba,
    "maxpool2": _maxpool2_numba,
    "maxpool2_backward": _maxpool2_backward_numba,
    "laplace": _laplace_numba,
    "selu_backward": _selu_backward_numba,
    "col2im_time": _col2im_time_numba,
}

_ACTIVE = NUMBA_IMPL if USE_NUMBA else NUMPY_IMPL


def osvd_residues(V, s_inv, proj, limit, n_keep=None):
    V = np.ascontiguousarray(V, dtype=np.float64)
    s_inv = np.ascontiguousarray(s_inv, dtype=np.float64)
    proj = np.ascontiguousarray(np.atleast_2d(proj), dtype=np.float64)
    if n_keep is None:
        n_keep = len(s_inv)
    return _ACTIVE["osvd"](V, s_inv, proj, float(limit), int(n_keep))


def smooth_time(x, sigma):
    """Gaussian-smooth a (T, ...) array along axis 0; returns float64."""
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    shape = x.shape
    flat = np.ascontiguousarray(x.reshape(shape[0], -1))
    return _ACTIVE["smooth"](flat, gaussian_kernel(sigma)).reshape(shape)


def maxpool2(x):
    return _ACTIVE["maxpool2"](np.ascontiguousarray(x))


def maxpool2_backward(dy, first, T):
    return _ACTIVE["maxpool2_backward"](np.ascontiguousarray(dy), first, int(T))


def laplace_terms(p, p_hat, log_b, lo, hi, w_in, w_out, weighted):
    args = [np.ascontiguousarray(np.ravel(a), dtype=np.float64) for a in (p, p_hat, log_b)]
    return _ACTIVE["laplace"](*args, float(lo), float(hi), float(w_in), float(w_out), bool(weighted))


def selu_backward(y, dy):
    y = np.ascontiguousarray(y)
    dy = np.ascontiguousarray(dy, dtype=y.dtype)
    return _ACTIVE["selu_backward"](y, dy)


def col2im_time(dcols):
    """(M, T, K, C) window gradients of a 'same' temporal conv -> (M, T, C) input gradient."""
    return _ACTIVE["col2im_time"](np.ascontiguousarray(dcols))
