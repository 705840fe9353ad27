"""Backend equivalence: the numba fast path must match the numpy fallback."""

import numpy as np
import pytest

from stormbench import kernels

needs_numba = pytest.mark.skipif(kernels.BACKEND != "numba",
                                 reason="numba backend not active")


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv2d_forward_backends_agree(dtype):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((2, 3, 10, 10)).astype(dtype)
    w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
    fast = kernels._nb_conv2d_forward(xp, w)
    slow = kernels._np_conv2d_forward(xp, w)
    rtol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(fast, slow, rtol=rtol, atol=1e-6)


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv2d_grads_backends_agree(dtype):
    rng = np.random.default_rng(1)
    xp = rng.standard_normal((2, 3, 10, 10)).astype(dtype)
    w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
    go = rng.standard_normal((2, 4, 8, 8)).astype(dtype)
    rtol = 1e-4 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(kernels._nb_conv2d_kernel_grad(go, xp, 3, 3),
                               kernels._np_conv2d_kernel_grad(go, xp, 3, 3),
                               rtol=rtol, atol=1e-5)
    np.testing.assert_allclose(kernels._nb_conv2d_input_grad(go, w, 10, 10),
                               kernels._np_conv2d_input_grad(go, w, 10, 10),
                               rtol=rtol, atol=1e-5)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_gelu_matches_exact_erf(dtype):
    from scipy.special import erf
    rng = np.random.default_rng(2)
    x = (rng.standard_normal(4096) * 3).astype(dtype)
    y, phi = kernels.gelu_forward(x)
    exact = x * 0.5 * (1.0 + erf(x.astype(np.float64) * kernels._INV_SQRT2))
    # float32 path uses a 1.5e-7-accurate erf approximation: exact at float32
    np.testing.assert_allclose(y.astype(np.float64), exact, atol=3e-7, rtol=1e-6)
    assert y.dtype == dtype and phi.dtype == dtype


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_gelu_backward_matches_analytic(dtype):
    rng = np.random.default_rng(3)
    x = (rng.standard_normal(512) * 2).astype(dtype)
    g = rng.standard_normal(512).astype(dtype)
    _, phi = kernels.gelu_forward(x)
    gx = kernels.gelu_backward(g, x, phi)
    x64 = x.astype(np.float64)
    from scipy.special import erf
    phi64 = 0.5 * (1.0 + erf(x64 * kernels._INV_SQRT2))
    pdf64 = np.exp(-0.5 * x64 * x64) * kernels._INV_SQRT_2PI
    expect = g.astype(np.float64) * (phi64 + x64 * pdf64)
    np.testing.assert_allclose(gx.astype(np.float64), expect, atol=2e-6, rtol=2e-5)


def test_backend_env_validation(monkeypatch):
    monkeypatch.setenv("STORMBENCH_BACKEND", "cuda")
    with pytest.raises(ValueError):
        kernels._select_backend()
    monkeypatch.setenv("STORMBENCH_BACKEND", "numpy")
    assert kernels._select_backend() == "numpy"


def test_numpy_fallback_ops_gradcheck(monkeypatch):
    """Force the numpy kernels through the public dispatch and spot-check values."""
    monkeypatch.setattr(kernels, "BACKEND", "numpy")
    rng = np.random.default_rng(4)
    xp = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    y = kernels.conv2d_forward(xp, w)
    # direct quadruple-loop reference
    ref = np.zeros_like(y)
    for io in range(2):
        for ic in range(2):
            for i in range(4):
                for j in range(4):
                    ref[0, io, i, j] += np.sum(w[io, ic] * xp[0, ic, i:i + 3, j:j + 3])
    np.testing.assert_allclose(y, ref, rtol=1e-12)
