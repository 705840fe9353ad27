"""Differentiable primitives on Tensor/ComplexTensor.

The primitive set is closed: everything the forecasting backbones need is
either here or composed from what is here. Every primitive registers a
backward closure on the active tape; gradients of complex tensors use the
real-pair convention (grad = dL/d(re) + 1j*dL/d(im)).

FFT gradients are implemented via adjoint transforms, which are exact.
"""

import numpy as np
import scipy.fft as sfft

from . import kernels
from .tensor import ComplexTensor, ShapeError, Tensor, record

PAD_MODES = ("zero", "circular_both", "circular_x_zero_y")

_COMPLEX_OF = {np.dtype(np.float32): np.complex64, np.dtype(np.float64): np.complex128}
_REAL_OF = {np.dtype(np.complex64): np.float32, np.dtype(np.complex128): np.float64}


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a, b):
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out, lambda g: (g, -g))


def mul(a, b):
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scalar_mul(a, s):
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))
    return record("scalar_mul", (a,), out, lambda g: (g * a.data.dtype.type(s),))


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)
    return record("tanh", (a,), out, lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return record("sigmoid", (a,), out, lambda g: (g * y * (1.0 - y),))


def relu(a):
    y = np.maximum(a.data, 0)
    out = Tensor(y)
    return record("relu", (a,), out, lambda g: (g * (a.data > 0),))


def gelu(a):
    y, phi = kernels.gelu_forward(a.data)
    out = Tensor(y)
    return record("gelu", (a,), out, lambda g: (kernels.gelu_backward(g, a.data, phi),))


def tsum(a):
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    return record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def tmean(a):
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    return record("mean", (a,), out,
                  lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),))


def mse(pred, target):
    """Mean over all elements of the squared difference."""
    _require_same_shape(pred, target, "mse")
    d = pred.data - target.data
    n = d.size
    out = Tensor(np.asarray(np.mean(d * d), dtype=pred.data.dtype))

    def bwd(g):
        gp = (2.0 / n) * g * d
        return gp.astype(pred.data.dtype), (-gp).astype(pred.data.dtype)

    return record("mse", (pred, target), out, bwd)


def concat(tensors, axis=1):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------

def _pad(x, p, pad_mode):
    if pad_mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if pad_mode == "circular_both":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
    if pad_mode == "circular_x_zero_y":
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p)), mode="wrap")
        return np.pad(x, ((0, 0), (0, 0), (p, p), (0, 0)))
    raise ValueError(f"unknown pad_mode {pad_mode!r}")


def _fold_axis_circular(gxp, p, axis):
    # inverse of wrap-padding: fold the pad strips back onto the torus
    n = gxp.shape[axis] - 2 * p
    core = np.take(gxp, range(p, p + n), axis=axis)
    left = np.take(gxp, range(0, p), axis=axis)
    right = np.take(gxp, range(p + n, 2 * p + n), axis=axis)
    core = core.copy()
    idx_hi = [slice(None)] * gxp.ndim
    idx_hi[axis] = slice(n - p, n)
    core[tuple(idx_hi)] += left
    idx_lo = [slice(None)] * gxp.ndim
    idx_lo[axis] = slice(0, p)
    core[tuple(idx_lo)] += right
    return core


def _unpad_grad(gxp, p, pad_mode):
    if pad_mode == "zero":
        return gxp[:, :, p:-p, p:-p]
    if pad_mode == "circular_both":
        return _fold_axis_circular(_fold_axis_circular(gxp, p, 2), p, 3)
    if pad_mode == "circular_x_zero_y":
        return _fold_axis_circular(gxp, p, 3)[:, :, p:-p, :]
    raise ValueError(f"unknown pad_mode {pad_mode!r}")


def conv2d(x, w, b=None, pad_mode="circular_both"):
    """Cross-correlation with an odd kernel; spatial extents are preserved.

    x: [B,Cin,H,W], w: [Cout,Cin,k,k], b: [Cout] or None.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input/kernel, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    if pad_mode not in PAD_MODES:
        raise ValueError(f"unknown pad_mode {pad_mode!r}")

    k = w.shape[2]
    p = (k - 1) // 2
    xp = _pad(x.data, p, pad_mode) if p else x.data
    y = kernels.conv2d_forward(xp, w.data)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gw = kernels.conv2d_kernel_grad(g, xp, k, k)
        gxp = kernels.conv2d_input_grad(g, w.data, xp.shape[2], xp.shape[3])
        gx = _unpad_grad(gxp, p, pad_mode) if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d", inputs, out, bwd)


def conv_transpose2_stride2(x, w, b=None):
    """Transposed convolution, kernel 2, stride 2; doubles spatial extents.

    x: [B,Cin,H,W], w: [Cin,Cout,2,2], b: [Cout] or None.
    """
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2: channels {x.shape[1]} != kernel {w.shape[0]}")
    if w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2: kernel must be [Cin,Cout,2,2], got {w.shape}")
    bsz, _, h, wd = x.shape
    co = w.shape[1]
    y = np.empty((bsz, co, 2 * h, 2 * wd), dtype=x.data.dtype)
    for di in range(2):
        for dj in range(2):
            y[:, :, di::2, dj::2] = np.tensordot(x.data, w.data[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
    if b is not None:
        y += b.data[None, :, None, None]
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for di in range(2):
            for dj in range(2):
                gsub = g[:, :, di::2, dj::2]
                gx += np.tensordot(gsub, w.data[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
                gw[:, :, di, dj] = np.tensordot(x.data, gsub, axes=([0, 2, 3], [0, 2, 3]))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv_transpose2", inputs, out, bwd)


def avgpool2(x):
    """2x2 mean pooling; halves spatial extents."""
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: extents must be even, got {h}x{w}")
    y = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y)

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25)
        return (gx,)

    return record("avgpool2", (x,), out, bwd)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    """Channel-last affine map: y[..., o] = sum_i x[..., i] w[i, o] + b[o]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, w.shape[1]).sum(axis=0)

    return record("linear", inputs, out, bwd)


def channel_linear(x, w, b=None):
    """Pointwise (1x1) channel map on [B,C,H,W] data."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel_linear: channels {x.shape[1]} != weight rows {w.shape[0]}")
    y = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = np.ascontiguousarray(np.tensordot(g, w.data, axes=([1], [1])).transpose(0, 3, 1, 2))
        gw = np.tensordot(x.data, g, axes=([0, 2, 3], [0, 2, 3]))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("channel_linear", inputs, out, bwd)


def channel_linear_pair(x, w1, b1, w2, b2):
    """Two stacked pointwise channel maps, computed as one fused affine map.

    y = (x*w1 + b1)*w2 + b2 on [B,C,H,W] data. The wide intermediate is never
    materialized, which keeps the fixed 256-channel lifting/projection stages
    cheap; gradients contract through the small [Cin,Cout] coupling first.
    """
    ci, m = w1.shape
    m2, co = w2.shape
    if x.shape[1] != ci:
        raise ShapeError(f"channel_linear_pair: channels {x.shape[1]} != {ci}")
    if m != m2:
        raise ShapeError(f"channel_linear_pair: inner extents {m} != {m2}")
    weff = w1.data @ w2.data
    beff = b1.data @ w2.data + b2.data
    y = np.tensordot(x.data, weff, axes=([1], [0])).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y + beff[None, :, None, None])
    out = Tensor(y)

    def bwd(g):
        gx = np.ascontiguousarray(np.tensordot(g, weff, axes=([1], [1])).transpose(0, 3, 1, 2))
        cross = np.tensordot(x.data, g, axes=([0, 2, 3], [0, 2, 3]))  # [Ci,Co]
        gsum = g.sum(axis=(0, 2, 3))                                  # [Co]
        gw1 = cross @ w2.data.T
        gw2 = w1.data.T @ cross + np.outer(b1.data, gsum)
        gb1 = gsum @ w2.data.T
        gb2 = gsum
        return gx, gw1, gb1, gw2, gb2

    return record("channel_linear_pair", (x, w1, b1, w2, b2), out, bwd)


# ---------------------------------------------------------------------------
# spectral
# ---------------------------------------------------------------------------

def _check_pow2_extents(shape):
    h, w = shape[-2], shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"fft extents must be powers of two, got {h}x{w}")
    return h, w


def fft2(x):
    """Unnormalized forward 2D FFT over the trailing two axes."""
    _check_pow2_extents(x.shape)
    out = ComplexTensor(sfft.fft2(x.data))
    hw = x.shape[-2] * x.shape[-1]

    def bwd(g):
        return (np.real(sfft.ifft2(g)).astype(x.data.dtype) * hw,)

    return record("fft2", (x,), out, bwd)


def ifft2(z):
    """Inverse 2D FFT with 1/(H*W) normalization; complex to complex."""
    _check_pow2_extents(z.shape)
    out = ComplexTensor(sfft.ifft2(z.data))
    hw = z.shape[-2] * z.shape[-1]

    def bwd(g):
        return (sfft.fft2(g) / hw,)

    return record("ifft2", (z,), out, bwd)


def _reflect_col(col):
    # col[..., i] -> col[..., (-i) mod H]
    return np.roll(col[..., ::-1], 1, axis=-1)


def rfft2(x):
    """Half-spectrum forward FFT of a real field; last axis holds W//2+1 modes."""
    h, w = _check_pow2_extents(x.shape)
    out = ComplexTensor(sfft.rfft2(x.data))
    hw = h * w

    def bwd(g):
        gh = g.copy()
        gh *= 0.5
        gh[..., 0] += 0.5 * np.conj(_reflect_col(np.moveaxis(g, -2, -1)[..., 0, :]))
        gh[..., w // 2] += 0.5 * np.conj(_reflect_col(np.moveaxis(g, -2, -1)[..., w // 2, :]))
        return (hw * sfft.irfft2(gh, s=(h, w)).astype(x.data.dtype),)

    return record("rfft2", (x,), out, bwd)


def irfft2(z, width):
    """Inverse of rfft2 onto a real [.., H, width] field (1/(H*W) normalized)."""
    h = z.shape[-2]
    if z.shape[-1] != width // 2 + 1:
        raise ShapeError(f"irfft2: last axis {z.shape[-1]} != {width // 2 + 1}")
    if not (_is_pow2(h) and _is_pow2(width)):
        raise ShapeError(f"fft extents must be powers of two, got {h}x{width}")
    out = Tensor(sfft.irfft2(z.data, s=(h, width)))
    hw = h * width

    def bwd(g):
        gh = sfft.rfft2(g) / hw
        gz = 2.0 * gh
        gz[..., 0] *= 0.5
        gz[..., width // 2] *= 0.5
        return (gz.astype(z.data.dtype),)

    return record("irfft2", (z,), out, bwd)


def real(z):
    """Real part of a complex tensor."""
    out = Tensor(np.ascontiguousarray(z.data.real))

    def bwd(g):
        return (g.astype(z.data.dtype),)

    return record("real", (z,), out, bwd)


def abs2(z):
    """Squared modulus, elementwise: re^2 + im^2."""
    out = Tensor((z.data.real ** 2 + z.data.imag ** 2).astype(_REAL_OF[z.data.dtype]))

    def bwd(g):
        return ((2.0 * g) * z.data,)

    return record("abs2", (z,), out, bwd)


def spectral_mul(xh, w):
    """Per-mode channel mixing on retained low modes; everything else is zeroed.

    xh: [B,Cin,H,Wm] half spectrum. w: [Cin,Cout,2*m1,m2]; its first m1 rows
    act on the m1 lowest positive frequencies of the first spatial axis, the
    last m1 rows on the m1 highest (negative) frequencies; columns act on the
    m2 lowest modes of the second axis.
    """
    b, ci, h, wm = xh.shape
    wci, co, tm1, m2 = w.shape
    if tm1 % 2:
        raise ShapeError(f"spectral_mul: weight mode rows must be even, got {tm1}")
    m1 = tm1 // 2
    if wci != ci:
        raise ShapeError(f"spectral_mul: channels {ci} != weight {wci}")
    if m1 > h // 2:
        raise ShapeError(f"spectral_mul: m1={m1} exceeds Nyquist of H={h}")
    if m2 > wm:
        raise ShapeError(f"spectral_mul: m2={m2} exceeds {wm} stored modes")

    xlo = xh.data[:, :, :m1, :m2]
    xhi = xh.data[:, :, h - m1:, :m2]
    ylo = np.einsum("bixy,ioxy->boxy", xlo, w.data[:, :, :m1, :], optimize=True)
    yhi = np.einsum("bixy,ioxy->boxy", xhi, w.data[:, :, m1:, :], optimize=True)
    y = np.zeros((b, co, h, wm), dtype=xh.data.dtype)
    y[:, :, :m1, :m2] = ylo
    y[:, :, h - m1:, :m2] = yhi
    out = ComplexTensor(y)

    def bwd(g):
        glo = g[:, :, :m1, :m2]
        ghi = g[:, :, h - m1:, :m2]
        gx = np.zeros_like(xh.data)
        gx[:, :, :m1, :m2] = np.einsum("boxy,ioxy->bixy", glo, np.conj(w.data[:, :, :m1, :]), optimize=True)
        gx[:, :, h - m1:, :m2] = np.einsum("boxy,ioxy->bixy", ghi, np.conj(w.data[:, :, m1:, :]), optimize=True)
        gw = np.empty_like(w.data)
        gw[:, :, :m1, :] = np.einsum("bixy,boxy->ioxy", np.conj(xlo), glo, optimize=True)
        gw[:, :, m1:, :] = np.einsum("bixy,boxy->ioxy", np.conj(xhi), ghi, optimize=True)
        return gx, gw

    return record("spectral_mul", (xh, w), out, bwd)


def tucker_reconstruct(core, u1, u2, u3, u4):
    """Rebuild a dense 4-axis complex weight from a Tucker core and factors.

    w[i,o,r,c] = sum core[a,b,p,q] u1[i,a] u2[o,b] u3[r,p] u4[c,q].
    """
    w = np.einsum("abpq,ia,ob,rp,cq->iorc", core.data, u1.data, u2.data,
                  u3.data, u4.data, optimize=True)
    out = ComplexTensor(w)

    def bwd(g):
        c1, c2, c3, c4 = np.conj(u1.data), np.conj(u2.data), np.conj(u3.data), np.conj(u4.data)
        gcore = np.einsum("iorc,ia,ob,rp,cq->abpq", g, c1, c2, c3, c4, optimize=True)
        cc = np.conj(core.data)
        gu1 = np.einsum("iorc,abpq,ob,rp,cq->ia", g, cc, c2, c3, c4, optimize=True)
        gu2 = np.einsum("iorc,abpq,ia,rp,cq->ob", g, cc, c1, c3, c4, optimize=True)
        gu3 = np.einsum("iorc,abpq,ia,ob,cq->rp", g, cc, c1, c2, c4, optimize=True)
        gu4 = np.einsum("iorc,abpq,ia,ob,rp->cq", g, cc, c1, c2, c3, optimize=True)
        return gcore, gu1, gu2, gu3, gu4

    return record("tucker_reconstruct", (core, u1, u2, u3, u4), out, bwd)
