import os
import subprocess
import sys

import numpy as np
import pytest

from poseprior import _kernels as K

pytestmark = pytest.mark.skipif(not K.NUMBA_AVAILABLE, reason="numba not installed")


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_layer_norm_paths_agree(rng, dtype, tol):
    x = rng.standard_normal((37, 24)).astype(dtype) * 3 + 1
    gamma = rng.standard_normal(24).astype(dtype)
    beta = rng.standard_normal(24).astype(dtype)
    dy = rng.standard_normal((37, 24)).astype(dtype)
    a = K.layer_norm_fwd_numpy(x, gamma, beta, 1e-5)
    b = K.layer_norm_fwd_numba(x, gamma, beta, 1e-5)
    for u, v in zip(a, b):
        assert u.dtype == v.dtype == dtype
        np.testing.assert_allclose(u, v, rtol=tol, atol=tol)
    ga = K.layer_norm_bwd_numpy(dy, a[1], a[2], gamma)
    gb = K.layer_norm_bwd_numba(dy, b[1], b[2], gamma)
    for u, v in zip(ga, gb):
        np.testing.assert_allclose(u, v, rtol=tol * 10, atol=tol * 10)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_gelu_paths_agree(rng, dtype, tol):
    x = (rng.standard_normal((11, 64)) * 4).astype(dtype)
    dy = rng.standard_normal((11, 64)).astype(dtype)
    ya, ta = K.gelu_fwd_numpy(x)
    yb, tb = K.gelu_fwd_numba(x)
    np.testing.assert_allclose(ya, yb, rtol=tol, atol=tol)
    np.testing.assert_allclose(K.gelu_bwd_numpy(dy, x, ta), K.gelu_bwd_numba(dy, x, tb), rtol=tol, atol=tol)


def test_gelu_derivative_matches_finite_difference():
    x = np.linspace(-6, 6, 1001)
    h = 1e-6
    fd = (K.gelu_fwd_numpy(x + h)[0] - K.gelu_fwd_numpy(x - h)[0]) / (2 * h)
    _, t = K.gelu_fwd_numpy(x)
    np.testing.assert_allclose(K.gelu_bwd_numpy(np.ones_like(x), x, t), fd, atol=1e-8)


@pytest.mark.parametrize("length", [1, 8, 17])
def test_attention_paths_agree(rng, length):
    q, k, v, do = (rng.standard_normal((6, length, 5)) for _ in range(4))
    oa, pa = K.attention_fwd_numpy(q, k, v, 0.4)
    ob, pb = K.attention_fwd_numba(q, k, v, 0.4)
    np.testing.assert_allclose(oa, ob, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(pa.sum(-1), 1.0, atol=1e-12)
    for u, w in zip(K.attention_bwd_numpy(do, q, k, v, pa, 0.4), K.attention_bwd_numba(do, q, k, v, pb, 0.4)):
        np.testing.assert_allclose(u, w, rtol=1e-10, atol=1e-12)


def test_softmax_is_shift_stable():
    q = np.full((1, 3, 2), 400.0)
    k = np.array([[[1.0, 1.0], [2.0, 2.0], [-1.0, 0.0]]])
    for fwd in (K.attention_fwd_numpy, K.attention_fwd_numba):
        _, p = fwd(q, k, np.ones((1, 3, 2)), 1.0)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(-1), 1.0)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba"), ("", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, POSEPRIOR_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from poseprior import _kernels as K; print(K.backend(), K.layer_norm_fwd.__name__)"],
        capture_output=True, text=True, env=env, check=True,
    ).stdout.split()
    assert out[0] == expected
    assert out[1].endswith(expected)


def test_non_finite_inputs_propagate_instead_of_raising():
    q = np.full((1, 3, 2), np.inf)
    for kernels in (K.NUMPY_KERNELS, K.NUMBA_KERNELS):
        with np.errstate(all="ignore"):
            o, _ = kernels["attention_fwd"](q, -q, q, 1.0)
            y, _, _ = kernels["layer_norm_fwd"](np.full((2, 4), np.nan), np.ones(4), np.zeros(4), 1e-5)
        assert not np.isfinite(o).all() and np.isnan(y).all()
