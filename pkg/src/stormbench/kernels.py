"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the STORMBENCH_BACKEND
environment variable ("numba" or "numpy"). Default is numba when it is
importable. Both backends produce numerically identical results up to
float associativity; ``benchmarks/bench_backends.py`` compares their speed.
"""

import math
import os

import numpy as np

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _select_backend():
    env = os.environ.get("STORMBENCH_BACKEND", "").strip().lower()
    if env not in ("", "numba", "numpy"):
        raise ValueError(f"STORMBENCH_BACKEND must be 'numba' or 'numpy', got {env!r}")
    if env == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if env == "numba":
            raise
        return "numpy"


BACKEND = _select_backend()


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _windows(xp, kh, kw):
    # [B,C,Hp,Wp] -> [B,C,H,W,kh,kw] view of all kh x kw patches
    return np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))


def _np_conv2d_forward(xp, w):
    cols = _windows(xp, w.shape[2], w.shape[3])
    return np.einsum("bchwkl,ockl->bohw", cols, w, optimize=True)


def _np_conv2d_kernel_grad(go, xp, kh, kw):
    cols = _windows(xp, kh, kw)
    return np.einsum("bohw,bchwkl->ockl", go, cols, optimize=True)


def _np_conv2d_input_grad(go, w, hp, wp):
    b, _, h, wd = go.shape
    gxp = np.zeros((b, w.shape[1], hp, wp), dtype=go.dtype)
    for di in range(w.shape[2]):
        for dj in range(w.shape[3]):
            gxp[:, :, di:di + h, dj:dj + wd] += np.einsum(
                "bohw,oc->bchw", go, w[:, :, di, dj], optimize=True)
    return gxp


def _np_gelu_forward(x):
    from scipy.special import erf
    phi = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    phi = phi.astype(x.dtype, copy=False)
    return x * phi, phi


def _np_gelu_backward(g, x, phi):
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return g * (phi + x * pdf)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _nb_conv2d_forward(xp, w):
        b, c, hp, wp = xp.shape
        o, _, kh, kw = w.shape
        h = hp - kh + 1
        wd = wp - kw + 1
        y = np.zeros((b, o, h, wd), dtype=xp.dtype)
        for ib in range(b):
            for io in range(o):
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            wv = w[io, ic, di, dj]
                            for i in range(h):
                                for j in range(wd):
                                    y[ib, io, i, j] += wv * xp[ib, ic, i + di, j + dj]
        return y

    @njit(cache=True)
    def _nb_conv2d_kernel_grad(go, xp, kh, kw):
        b, o, h, wd = go.shape
        c = xp.shape[1]
        gw = np.zeros((o, c, kh, kw), dtype=go.dtype)
        for ib in range(b):
            for io in range(o):
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc = go.dtype.type(0.0)
                            for i in range(h):
                                for j in range(wd):
                                    acc += go[ib, io, i, j] * xp[ib, ic, i + di, j + dj]
                            gw[io, ic, di, dj] += acc
        return gw

    @njit(cache=True)
    def _nb_conv2d_input_grad(go, w, hp, wp):
        b, o, h, wd = go.shape
        c = w.shape[1]
        kh, kw = w.shape[2], w.shape[3]
        gxp = np.zeros((b, c, hp, wp), dtype=go.dtype)
        for ib in range(b):
            for io in range(o):
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            wv = w[io, ic, di, dj]
                            for i in range(h):
                                for j in range(wd):
                                    gxp[ib, ic, i + di, j + dj] += wv * go[ib, io, i, j]
        return gxp

    @njit(cache=True)
    def _erf32(x):
        # Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7: exact at float32.
        s = 1.0 if x >= 0.0 else -1.0
        ax = abs(x)
        t = 1.0 / (1.0 + 0.3275911 * ax)
        y = 1.0 - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t
                    - 0.284496736) * t + 0.254829592) * t * math.exp(-ax * ax)
        return s * y

    @njit(cache=True)
    def _nb_gelu_forward32(x, y, phi):
        for i in range(x.shape[0]):
            v = x[i]
            p = 0.5 * (1.0 + _erf32(v * _INV_SQRT2))
            phi[i] = p
            y[i] = v * p

    @njit(cache=True)
    def _nb_gelu_forward64(x, y, phi):
        for i in range(x.shape[0]):
            v = x[i]
            p = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            phi[i] = p
            y[i] = v * p

    @njit(cache=True)
    def _nb_gelu_backward(g, x, phi, gx):
        for i in range(x.shape[0]):
            v = x[i]
            gx[i] = g[i] * (phi[i] + v * math.exp(-0.5 * v * v) * _INV_SQRT_2PI)


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def conv2d_forward(xp, w):
    """Valid cross-correlation of padded input [B,C,Hp,Wp] with kernel [O,C,kh,kw]."""
    if BACKEND == "numba":
        return _nb_conv2d_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w))
    return _np_conv2d_forward(xp, w)


def conv2d_kernel_grad(go, xp, kh, kw):
    if BACKEND == "numba":
        return _nb_conv2d_kernel_grad(np.ascontiguousarray(go), np.ascontiguousarray(xp), kh, kw)
    return _np_conv2d_kernel_grad(go, xp, kh, kw)


def conv2d_input_grad(go, w, hp, wp):
    if BACKEND == "numba":
        return _nb_conv2d_input_grad(np.ascontiguousarray(go), np.ascontiguousarray(w), hp, wp)
    return _np_conv2d_input_grad(go, w, hp, wp)


def gelu_forward(x):
    """Exact-erf GELU. Returns (gelu(x), Phi(x)); Phi is cached for the backward pass."""
    if BACKEND == "numba" and x.dtype in (np.float32, np.float64):
        flat = np.ascontiguousarray(x).reshape(-1)
        y = np.empty_like(flat)
        phi = np.empty_like(flat)
        if x.dtype == np.float64:
            _nb_gelu_forward64(flat, y, phi)
        else:
            _nb_gelu_forward32(flat, y, phi)
        return y.reshape(x.shape), phi.reshape(x.shape)
    return _np_gelu_forward(x)


def gelu_backward(g, x, phi):
    if BACKEND == "numba" and x.dtype in (np.float32, np.float64):
        gf = np.ascontiguousarray(g).reshape(-1)
        xf = np.ascontiguousarray(x).reshape(-1)
        pf = np.ascontiguousarray(phi).reshape(-1)
        gx = np.empty_like(xf)
        _nb_gelu_backward(gf, xf, pf, gx)
        return gx.reshape(x.shape)
    return _np_gelu_backward(g, x, phi)
