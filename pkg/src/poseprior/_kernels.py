"""Hot inner loops of the transformer: layer norm, GELU and attention softmax.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with identical signatures. The module-level names (``layer_norm_fwd`` etc.)
are bound to the numba versions unless ``POSEPRIOR_DISABLE_NUMBA`` is set to a
truthy value in the environment before import, or numba cannot be imported.

All kernels operate on 2-D (rows, features) or 3-D (groups, seq, dim) arrays
and preserve the input dtype. The attention kernels keep the batched matrix
products in BLAS on both paths; numba only fuses the row softmax and its
backward, which numpy needs five passes for.
"""

from __future__ import annotations

import math
import os

import numpy as np

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _env_disabled() -> bool:
    return os.environ.get("POSEPRIOR_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return decorator


USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()

# Reassociation is fine; NaN/inf must still propagate so divergence is detected upstream.
_JIT = dict(cache=True, error_model="numpy", fastmath={"nsz", "arcp", "contract", "afn", "reassoc"})


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def layer_norm_fwd_numpy(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd_numpy(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def gelu_fwd_numpy(x):
    """tanh-approximated GELU; also returns the tanh term, which the backward pass reuses."""
    t = np.tanh(_GELU_K * (x + _GELU_C * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd_numpy(dy, x, t):
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def attention_fwd_numpy(q, k, v, scale):
    s = np.matmul(q, k.transpose(0, 2, 1)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.matmul(p, v), p


def attention_bwd_numpy(do, q, k, v, p, scale):
    dp = np.matmul(do, v.transpose(0, 2, 1))
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(ds.transpose(0, 2, 1), q) * scale
    dv = np.matmul(p.transpose(0, 2, 1), do)
    return dq, dk, dv


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _ln_fwd_nb(x, gamma, beta, eps, y, xhat, rstd):
    rows, cols = x.shape
    for r in range(rows):
        m = 0.0
        for c in range(cols):
            m += x[r, c]
        m /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - m
            var += d * d
        var /= cols
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for c in range(cols):
            xh = (x[r, c] - m) * rs
            xhat[r, c] = xh
            y[r, c] = xh * gamma[c] + beta[c]


@njit(**_JIT)
def _ln_bwd_nb(dy, xhat, rstd, gamma, dx, dgamma, dbeta):
    rows, cols = dy.shape
    acc_g = np.zeros(cols)
    acc_b = np.zeros(cols)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            g = dy[r, c] * gamma[c]
            m1 += g
            m2 += g * xhat[r, c]
            acc_g[c] += dy[r, c] * xhat[r, c]
            acc_b[c] += dy[r, c]
        m1 /= cols
        m2 /= cols
        rs = rstd[r]
        for c in range(cols):
            dx[r, c] = (dy[r, c] * gamma[c] - m1 - xhat[r, c] * m2) * rs
    for c in range(cols):
        dgamma[c] = acc_g[c]
        dbeta[c] = acc_b[c]


@njit(**_JIT)
def _gelu_arg_nb(x, u):
    flat_x = x.ravel()
    flat_u = u.ravel()
    k = flat_x.dtype.type(_GELU_K)
    kc = flat_x.dtype.type(_GELU_K * _GELU_C)
    for i in range(flat_x.size):
        xi = flat_x[i]
        flat_u[i] = k * xi + kc * xi * xi * xi


@njit(**_JIT)
def _gelu_out_nb(x, t, y):
    flat_x = x.ravel()
    flat_t = t.ravel()
    flat_y = y.ravel()
    half = flat_x.dtype.type(0.5)
    for i in range(flat_x.size):
        flat_y[i] = half * flat_x[i] * (flat_t[i] + 1)


@njit(**_JIT)
def _gelu_bwd_nb(dy, x, t, dx):
    flat_dy = dy.ravel()
    flat_x = x.ravel()
    flat_t = t.ravel()
    flat_dx = dx.ravel()
    one = flat_x.dtype.type(1.0)
    half = flat_x.dtype.type(0.5)
    k = flat_x.dtype.type(_GELU_K)
    c3 = flat_x.dtype.type(3.0 * _GELU_C)
    for i in range(flat_x.size):
        xi = flat_x[i]
        ti = flat_t[i]
        dt = (one - ti * ti) * k * (one + c3 * xi * xi)
        flat_dx[i] = flat_dy[i] * (half * (one + ti) + half * xi * dt)


@njit(**_JIT)
def _softmax_rows_nb(s, scale):
    # in place: s <- softmax(scale * s) along the last axis
    groups, rows, cols = s.shape
    for g in range(groups):
        for i in range(rows):
            mx = s[g, i, 0]
            for j in range(1, cols):
                if s[g, i, j] > mx:
                    mx = s[g, i, j]
            tot = s.dtype.type(0.0)
            for j in range(cols):
                e = np.exp((s[g, i, j] - mx) * scale)
                s[g, i, j] = e
                tot += e
            inv = s.dtype.type(1.0) / tot
            for j in range(cols):
                s[g, i, j] *= inv


@njit(**_JIT)
def _softmax_bwd_nb(dp, p, scale):
    # in place: dp <- scale * p * (dp - rowsum(dp * p))
    groups, rows, cols = dp.shape
    for g in range(groups):
        for i in range(rows):
            dot = dp.dtype.type(0.0)
            for j in range(cols):
                dot += dp[g, i, j] * p[g, i, j]
            for j in range(cols):
                dp[g, i, j] = scale * p[g, i, j] * (dp[g, i, j] - dot)


def layer_norm_fwd_numba(x, gamma, beta, eps):
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _ln_fwd_nb(x, gamma, beta, eps, y, xhat, rstd)
    return y, xhat, rstd


def layer_norm_bwd_numba(dy, xhat, rstd, gamma):
    dx = np.empty_like(dy)
    dgamma = np.empty(dy.shape[1], dtype=dy.dtype)
    dbeta = np.empty(dy.shape[1], dtype=dy.dtype)
    _ln_bwd_nb(dy, xhat, rstd, gamma, dx, dgamma, dbeta)
    return dx, dgamma, dbeta


def gelu_fwd_numba(x):
    # numba has no vectorized tanh without SVML; numpy's SIMD tanh sits between the fused kernels
    x = np.ascontiguousarray(x)
    t = np.empty_like(x)
    _gelu_arg_nb(x, t)
    np.tanh(t, out=t)
    y = np.empty_like(x)
    _gelu_out_nb(x, t, y)
    return y, t


def gelu_bwd_numba(dy, x, t):
    dy = np.ascontiguousarray(dy)
    dx = np.empty_like(x)
    _gelu_bwd_nb(dy, x, t, dx)
    return dx


def attention_fwd_numba(q, k, v, scale):
    p = np.matmul(q, k.transpose(0, 2, 1))
    _softmax_rows_nb(p, p.dtype.type(scale))
    return np.matmul(p, v), p


def attention_bwd_numba(do, q, k, v, p, scale):
    ds = np.matmul(do, v.transpose(0, 2, 1))
    _softmax_bwd_nb(ds, p, ds.dtype.type(scale))
    dq = np.matmul(ds, k)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    dv = np.matmul(p.transpose(0, 2, 1), do)
    return dq, dk, dv


NUMPY_KERNELS = {
    "layer_norm_fwd": layer_norm_fwd_numpy,
    "layer_norm_bwd": layer_norm_bwd_numpy,
    "gelu_fwd": gelu_fwd_numpy,
    "gelu_bwd": gelu_bwd_numpy,
    "attention_fwd": attention_fwd_numpy,
    "attention_bwd": attention_bwd_numpy,
}

NUMBA_KERNELS = {
    "layer_norm_fwd": layer_norm_fwd_numba,
    "layer_norm_bwd": layer_norm_bwd_numba,
    "gelu_fwd": gelu_fwd_numba,
    "gelu_bwd": gelu_bwd_numba,
    "attention_fwd": attention_fwd_numba,
    "attention_bwd": attention_bwd_numba,
}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

layer_norm_fwd = _active["layer_norm_fwd"]
layer_norm_bwd = _active["layer_norm_bwd"]
gelu_fwd = _active["gelu_fwd"]
gelu_bwd = _active["gelu_bwd"]
attention_fwd = _active["attention_fwd"]
attention_bwd = _active["attention_bwd"]


def backend() -> str:
    """Name of the kernel set bound at import time: ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
