"""Forward semantics, shape validation, and tape behavior."""

import numpy as np
import pytest

from stormbench import ComplexTensor, ShapeError, TapeError, Tensor, backward, no_grad, reset_tape
from stormbench import ops
from stormbench.tensor import active_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


def test_default_dtype_is_float32():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32


def test_float64_opt_in():
    t = Tensor([1.0], dtype=np.float64)
    assert t.dtype == np.float64


def test_complex_tensor_mirrors_real_dtype():
    z = ComplexTensor(np.zeros((2, 2), dtype=np.complex64))
    assert z.dtype == np.complex64
    z64 = ComplexTensor(np.zeros((2, 2), dtype=np.complex128))
    assert z64.dtype == np.complex128


def test_add_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_conv2d_even_kernel_rejected():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    w = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, w)


def test_conv2d_channel_mismatch_rejected():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, w)


def test_conv2d_unknown_pad_mode_rejected():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ValueError):
        ops.conv2d(x, w, pad_mode="reflect")


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    for pm in ops.PAD_MODES:
        y = ops.conv2d(Tensor(x), Tensor(w), pad_mode=pm)
        np.testing.assert_allclose(y.data, x, rtol=1e-6)


def test_conv2d_circular_wraps():
    # a shift kernel on circular padding must roll the field
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    x[0, 0, 0, 0] = 1.0
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 0, 0] = 1.0  # reads the (-1,-1) neighbor
    y = ops.conv2d(Tensor(x), Tensor(w), pad_mode="circular_both")
    expect = np.roll(np.roll(x, 1, axis=2), 1, axis=3)
    np.testing.assert_allclose(y.data, expect, atol=1e-7)


def test_conv2d_zero_pad_blocks_wrap():
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    x[0, 0, 0, 0] = 1.0
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 0, 0] = 1.0
    y = ops.conv2d(Tensor(x), Tensor(w), pad_mode="zero")
    assert y.data[0, 0, 1, 1] == 1.0
    assert y.data.sum() == 1.0


def test_conv2d_mixed_pad_wraps_only_width():
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    x[0, 0, 0, 0] = 1.0
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 0] = 1.0  # reads the (0,-1) neighbor
    y = ops.conv2d(Tensor(x), Tensor(w), pad_mode="circular_x_zero_y")
    expect = np.roll(x, 1, axis=3)
    np.testing.assert_allclose(y.data, expect, atol=1e-7)
    x2 = np.zeros((1, 1, 4, 4), dtype=np.float32)
    x2[0, 0, 3, 0] = 1.0  # on the last row: shifting down must fall off, not wrap
    w2 = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w2[0, 0, 0, 1] = 1.0  # reads the (-1,0) neighbor: zero-padded axis
    y2 = ops.conv2d(Tensor(x2), Tensor(w2), pad_mode="circular_x_zero_y")
    assert y2.data.sum() == 0.0


def test_avgpool2_odd_extent_rejected():
    with pytest.raises(ShapeError):
        ops.avgpool2(Tensor(np.zeros((1, 1, 5, 4))))


def test_avgpool2_values():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    y = ops.avgpool2(Tensor(x))
    np.testing.assert_allclose(y.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_conv_transpose2_doubles_extent():
    y = ops.conv_transpose2_stride2(Tensor(np.zeros((2, 3, 4, 5))), Tensor(np.zeros((3, 6, 2, 2))))
    assert y.shape == (2, 6, 8, 10)


def test_fft2_requires_power_of_two():
    with pytest.raises(ShapeError):
        ops.fft2(Tensor(np.zeros((6, 6))))
    with pytest.raises(ShapeError):
        ops.rfft2(Tensor(np.zeros((8, 12))))


def test_fft2_matches_numpy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 8))
    z = ops.fft2(Tensor(x, dtype=np.float64))
    np.testing.assert_allclose(z.data, np.fft.fft2(x), rtol=1e-12)
    back = ops.ifft2(z)
    np.testing.assert_allclose(back.data.real, x, atol=1e-12)


def test_rfft2_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 8))
    z = ops.rfft2(Tensor(x, dtype=np.float64))
    np.testing.assert_allclose(z.data, np.fft.rfft2(x), rtol=1e-12)


def test_spectral_mul_zeroes_dropped_modes():
    rng = np.random.default_rng(3)
    xh = ComplexTensor((rng.standard_normal((1, 2, 8, 5))
                        + 1j * rng.standard_normal((1, 2, 8, 5))).astype(np.complex64))
    w = ComplexTensor(np.ones((2, 3, 4, 3), dtype=np.complex64))
    y = ops.spectral_mul(xh, w)
    assert np.all(y.data[:, :, 2:6, :] == 0)
    assert np.all(y.data[:, :, :, 3:] == 0)
    # retained band equals a direct channel contraction
    expect_lo = np.einsum("bixy,io->boxy", xh.data[:, :, :2, :3], np.ones((2, 3)))
    np.testing.assert_allclose(y.data[:, :, :2, :3], expect_lo, rtol=1e-5)


def test_spectral_mul_rejects_super_nyquist_modes():
    xh = ComplexTensor(np.zeros((1, 2, 8, 5), dtype=np.complex64))
    with pytest.raises(ShapeError):
        ops.spectral_mul(xh, ComplexTensor(np.zeros((2, 2, 10, 3), dtype=np.complex64)))
    with pytest.raises(ShapeError):
        ops.spectral_mul(xh, ComplexTensor(np.zeros((2, 2, 4, 6), dtype=np.complex64)))


def test_tucker_full_rank_is_exact():
    rng = np.random.default_rng(4)
    w = (rng.standard_normal((3, 3, 4, 2)) + 1j * rng.standard_normal((3, 3, 4, 2)))
    # identity factors with a core equal to w reproduce w exactly
    eye = lambda n: ComplexTensor(np.eye(n, dtype=np.complex128))
    out = ops.tucker_reconstruct(ComplexTensor(w.astype(np.complex128)),
                                 eye(3), eye(3), eye(4), eye(2))
    np.testing.assert_allclose(out.data, w, rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ops.scalar_mul(x, 2.0)
    with pytest.raises(TapeError):
        backward(y)


def test_backward_requires_attached_loss():
    x = Tensor(np.ones(()), requires_grad=True)
    with pytest.raises(TapeError):
        backward(x)


def test_no_grad_skips_recording():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = ops.tsum(ops.scalar_mul(x, 2.0))
    assert y.node is None
    assert len(active_tape().nodes) == 0


def test_untracked_inputs_not_recorded():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((2, 2)))
    ops.add(a, b)
    assert len(active_tape().nodes) == 0


def test_tape_consumed_after_backward():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = ops.tsum(ops.mul(x, x))
    backward(loss)
    assert len(active_tape().nodes) == 0


def test_grad_dtype_matches_param_dtype():
    x = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float32)
    backward(ops.tsum(ops.gelu(x)))
    assert x.grad.dtype == np.float32


def test_float32_path_runs_whole_suite():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True, dtype=np.float32)
    w = ComplexTensor((rng.standard_normal((3, 3, 4, 3))
                       + 1j * rng.standard_normal((3, 3, 4, 3))).astype(np.complex64))
    w.requires_grad = True
    spec = ops.irfft2(ops.spectral_mul(ops.rfft2(x), w), 8)
    loss = ops.tmean(ops.gelu(spec))
    backward(loss)
    assert x.grad.dtype == np.float32
    assert w.grad.dtype == np.complex64
    assert np.isfinite(x.grad).all() and np.isfinite(w.grad).all()
