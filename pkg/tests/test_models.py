"""Backbone construction, parameter budgets, and forecast semantics.

Parameter-count oracles below are frozen from explicit shape-sum arithmetic
over the declared architectures (encoder/cell/decoder shapes summed by
hand); the suite re-derives them via brute-force summation over the actual
parameter tensors.
"""

import numpy as np
import pytest

from stormbench import models as M
from stormbench import ops
from stormbench.simulate import BlowUpError
from stormbench.tensor import Tensor, reset_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


def brute_force_count(model):
    total = 0
    for p in model.params.values():
        n = 1
        for d in p.shape:
            n *= d
        total += n * (2 if np.iscomplexobj(p.data) else 1)
    return total


# frozen shape-sum oracles for the published width table rows
BUCKET_CASES = [
    ("convlstm", 13, 52_092, 50_000),   # "4x13" row
    ("unet", 3, 47_977, 50_000),        # dims [3,6,12,24,48]
    ("tfno2d", 27, 454_652, 500_000),   # modes 2x12, width 27, 4 layers
    ("tfno2d", 8, 48_489, 50_000),
]


@pytest.mark.parametrize("family,width,expected,bucket", BUCKET_CASES)
def test_table_configs_land_in_buckets(family, width, expected, bucket):
    model = M.build_model(M.ModelConfig(family=family, width=width))
    n = M.count_params(model)
    assert n == expected
    assert n == brute_force_count(model)
    assert abs(n - bucket) / bucket <= 0.15


def test_unet_dims_match_published_row():
    model = M.build_model(M.ModelConfig(family="unet", width=3))
    assert model.dims == [3, 6, 12, 24, 48]


def test_persistence_has_no_params():
    model = M.build_model(M.ModelConfig(family="persistence"))
    assert M.count_params(model) == 0


def test_count_params_counts_complex_as_two():
    model = M.build_model(M.ModelConfig(family="fno2d", width=2))
    spectral = model.params["block0.spectral"]
    assert spectral.size == 2 * 2 * 24 * 12
    dense_total = sum(p.size for p in model.params.values())
    n_complex = sum(p.size for p in model.params.values() if np.iscomplexobj(p.data))
    assert M.count_params(model) == dense_total + n_complex


def test_init_deterministic():
    cfg = M.ModelConfig(family="tfno2d", width=4, seed=3)
    a = M.build_model(cfg).export_params()
    b = M.build_model(cfg).export_params()
    c = M.build_model(M.ModelConfig(family="tfno2d", width=4, seed=4)).export_params()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_forward_preserves_extents_all_families():
    rng = np.random.default_rng(0)
    hist = Tensor(rng.standard_normal((2, 10, 32, 32)).astype(np.float32))
    for family, width in [("fno2d", 3), ("tfno2d", 3), ("unet", 2),
                          ("convlstm", 3), ("persistence", 0)]:
        cfg = M.ModelConfig(family=family, width=max(width, 1) if family != "persistence" else 0)
        out = M.forward_step(M.build_model(cfg), hist)
        assert out.shape == (2, 1, 32, 32), family
        reset_tape()


def test_forward_step_rejects_wrong_history_length():
    model = M.build_model(M.ModelConfig(family="persistence", history_len=10))
    with pytest.raises(ValueError):
        M.forward_step(model, Tensor(np.zeros((1, 7, 16, 16), dtype=np.float32)))


def test_persistence_returns_last_frame():
    rng = np.random.default_rng(1)
    hist = rng.standard_normal((3, 10, 16, 16)).astype(np.float32)
    model = M.build_model(M.ModelConfig(family="persistence"))
    out = M.forward_step(model, Tensor(hist))
    assert np.array_equal(out.data[:, 0], hist[:, -1])


def test_fno2d_zero_bias_zero_output():
    model = M.build_model(M.ModelConfig(family="fno2d", width=3))
    for name, p in model.params.items():
        if name.endswith((".b", ".b1", ".b2")):
            p.data = np.zeros_like(p.data)
    out = M.forward_step(model, Tensor(np.zeros((1, 10, 32, 32), dtype=np.float32)))
    assert np.abs(out.data).max() == 0.0


@pytest.mark.parametrize("family,width", [("fno2d", 3), ("tfno2d", 3)])
def test_fno_single_step_shift_equivariance(family, width):
    rng = np.random.default_rng(2)
    hist = rng.standard_normal((1, 10, 32, 32)).astype(np.float32)
    model = M.build_model(M.ModelConfig(family=family, width=width))
    base = M.forward_step(model, Tensor(hist)).data
    reset_tape()
    shifted = np.roll(np.roll(hist, 5, axis=2), -3, axis=3)
    out = M.forward_step(model, Tensor(shifted)).data
    reset_tape()
    np.testing.assert_allclose(out, np.roll(np.roll(base, 5, axis=2), -3, axis=3), atol=1e-5)


@pytest.mark.parametrize("family,width,shift", [("fno2d", 3, (5, -3)),
                                                ("tfno2d", 3, (5, -3)),
                                                ("convlstm", 3, (5, -3)),
                                                ("unet", 2, (16, 16))])
def test_whole_model_rollout_equivariance(family, width, shift):
    # unet is equivariant only to shifts that are multiples of 2^levels = 16
    rng = np.random.default_rng(3)
    ic = rng.standard_normal((10, 32, 32)).astype(np.float32)
    model = M.build_model(M.ModelConfig(family=family, width=width))
    base = M.rollout(model, ic, 3)
    shifted_ic = np.roll(np.roll(ic, shift[0], axis=1), shift[1], axis=2)
    out = M.rollout(model, shifted_ic, 3)
    np.testing.assert_allclose(out, np.roll(np.roll(base, shift[0], axis=1),
                                            shift[1], axis=2), atol=1e-4)


def test_tucker_full_rank_reproduces_dense():
    dense = M.build_model(M.ModelConfig(family="fno2d", width=3, seed=5))
    tucker = M.build_model(M.ModelConfig(family="tfno2d", width=3, seed=5,
                                         tucker_rank_fraction=1.0))
    # initialize the tucker model from the reconstructed dense weights:
    # identity factors, core = dense spectral weight
    for name, p in dense.params.items():
        if name.endswith(".spectral"):
            block = name.rsplit(".", 1)[0]
            tucker.params[f"{block}.core"].data = p.data.copy()
            tucker.params[f"{block}.u1"].data = np.eye(3, dtype=np.complex64)
            tucker.params[f"{block}.u2"].data = np.eye(3, dtype=np.complex64)
            tucker.params[f"{block}.u3"].data = np.eye(24, dtype=np.complex64)
            tucker.params[f"{block}.u4"].data = np.eye(12, dtype=np.complex64)
        else:
            tucker.params[name].data = p.data.copy()
    rng = np.random.default_rng(6)
    hist = Tensor(rng.standard_normal((1, 10, 32, 32)).astype(np.float32))
    a = M.forward_step(dense, hist).data
    reset_tape()
    b = M.forward_step(tucker, hist).data
    reset_tape()
    np.testing.assert_allclose(a, b, atol=1e-6)


class _ScaledPersistence(M.Model):
    """Hand-built linear model: prediction = scale * (last frame)."""

    def __init__(self, scale, history_len=10):
        super().__init__(M.ModelConfig(family="persistence", history_len=history_len))
        self.scale = scale

    def forward(self, history):
        last = Tensor(np.ascontiguousarray(history.data[:, -1:]))
        return ops.scalar_mul(last, self.scale)


def test_rollout_geometric_oracle():
    model = _ScaledPersistence(0.5, history_len=4)
    ic = np.ones((4, 8, 8), dtype=np.float32)
    out = M.rollout(model, ic, 3)
    np.testing.assert_allclose(out[:, 0, 0], [0.5, 0.25, 0.125], rtol=1e-6)


def test_rollout_single_step_matches_forward():
    rng = np.random.default_rng(7)
    ic = rng.standard_normal((10, 32, 32)).astype(np.float32)
    model = M.build_model(M.ModelConfig(family="fno2d", width=2))
    one = M.rollout(model, ic, 1)
    direct = M.forward_step(model, Tensor(ic[None])).data[0]
    reset_tape()
    np.testing.assert_allclose(one, direct, atol=1e-6)


def test_rollout_persistence_repeats_last_frame():
    rng = np.random.default_rng(8)
    ic = rng.standard_normal((10, 8, 8)).astype(np.float32)
    model = M.build_model(M.ModelConfig(family="persistence"))
    out = M.rollout(model, ic, 7)
    for s in range(7):
        assert np.array_equal(out[s], ic[-1])


def test_rollout_blowup_reports_step():
    model = _ScaledPersistence(float("nan"), history_len=2)
    with pytest.raises(BlowUpError) as exc:
        M.rollout(model, np.ones((2, 8, 8), dtype=np.float32), 5)
    assert exc.value.step_index == 0


def test_rollout_validates_inputs():
    model = M.build_model(M.ModelConfig(family="persistence"))
    with pytest.raises(ValueError):
        M.rollout(model, np.zeros((10, 8, 8), dtype=np.float32), 0)
    with pytest.raises(ValueError):
        M.rollout(model, np.zeros((4, 8, 8), dtype=np.float32), 2)


def test_fit_width_to_budget():
    cfg = M.fit_width_to_budget("convlstm", 50_000)
    assert cfg.width == 13
    n = M.count_params(M.build_model(cfg))
    assert abs(n - 50_000) / 50_000 <= 0.15
    cfg500 = M.fit_width_to_budget("tfno2d", 500_000)
    n500 = M.count_params(M.build_model(cfg500))
    assert abs(n500 - 500_000) / 500_000 <= 0.15


def test_fit_fno2d_50k_is_nearest_achievable():
    # the dense-width grid is coarse here: width 4 gives 42,325 params
    # (15.35% under 50k) and width 5 gives 63,614 (27% over); the nearest
    # achievable fit is width 4, verified by the shape-sum oracle
    cfg = M.fit_width_to_budget("fno2d", 50_000)
    assert cfg.width == 4
    model = M.build_model(cfg)
    assert M.count_params(model) == brute_force_count(model) == 42_325
    n5 = M.count_params(M.build_model(M.ModelConfig(family="fno2d", width=5)))
    assert abs(n5 - 50_000) > abs(42_325 - 50_000)


def test_fit_rejects_persistence_and_unreachable():
    with pytest.raises(ValueError):
        M.fit_width_to_budget("persistence", 50_000)
    with pytest.raises(ValueError):
        M.fit_width_to_budget("tfno2d", 10)


def test_fit_tie_breaks_to_smaller_width():
    # construct an exact midpoint budget between two adjacent convlstm widths
    n3 = M.count_params(M.build_model(M.ModelConfig(family="convlstm", width=3)))
    n4 = M.count_params(M.build_model(M.ModelConfig(family="convlstm", width=4)))
    mid = (n3 + n4) // 2
    if (n3 + n4) % 2 == 0:
        assert M.fit_width_to_budget("convlstm", mid).width == 3
    else:
        assert M.fit_width_to_budget("convlstm", mid).width == 3
        assert M.fit_width_to_budget("convlstm", mid + 1).width == 4


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(family="resnet", width=4)
    with pytest.raises(ValueError):
        M.ModelConfig(family="fno2d", width=0)
    with pytest.raises(ValueError):
        M.ModelConfig(family="fno2d", width=4, history_len=0)
    with pytest.raises(ValueError):
        M.ModelConfig(family="tfno2d", width=4, tucker_rank_fraction=0.0)
    with pytest.raises(ValueError):
        M.ModelConfig(family="unet", width=2, pad_mode="reflect")


def test_checkpoint_roundtrip_through_storage(tmp_path):
    from stormbench import storage
    model = M.build_model(M.ModelConfig(family="tfno2d", width=3, seed=1))
    path = tmp_path / "model.dwb"
    storage.write_checkpoint(path, model.export_params())
    clone = M.build_model(M.ModelConfig(family="tfno2d", width=3, seed=2))
    clone.load_params(storage.read_checkpoint(path))
    rng = np.random.default_rng(9)
    hist = Tensor(rng.standard_normal((1, 10, 32, 32)).astype(np.float32))
    a = M.forward_step(model, hist).data
    reset_tape()
    b = M.forward_step(clone, hist).data
    reset_tape()
    np.testing.assert_allclose(a, b, atol=0)
