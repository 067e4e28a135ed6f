import numpy as np
import pytest
from hypothesis import given, strategies as st

from arfsfr import functional as F
from arfsfr.arf import (ArfConfig, ArfLayer, arf_apply, base_lattice, build_deformed_grid,
                        discretize_scale, predict_scales, scale_from_raw)
from arfsfr.errors import ConfigurationError, ContractViolation, DimensionError
from arfsfr.gradcheck import check_arf
from arfsfr.layers import ParamStore
from arfsfr.tensor import Tensor


def make_layer(c_in=2, c_out=2, seed=0, **kw):
    store = ParamStore(np.float64)
    layer = ArfLayer(store, "arf", ArfConfig(c_in, c_out, **kw), np.random.default_rng(seed))
    return store, layer


def make_degenerate(c_in, c_out, seed):
    """kappa 0, forced 3x3 kernel, M = 1, B = 0 and attention = 1."""
    store, layer = make_layer(c_in, c_out, seed, kappa=0.0)
    layer.force_kernel = (3, 3)
    layer.modulation.conv2.weight.data[...] = 0.0
    layer.modulation.conv2.bias.data[...] = 40.0   # tanh(40) == 1.0 in float64
    layer.bias_head.conv2.weight.data[...] = 0.0
    layer.bias_head.conv2.bias.data[...] = 0.0
    layer.attention.weight.data[...] = 0.0
    layer.attention.bias.data[...] = 40.0          # sigmoid(40) == 1.0 in float64
    return store, layer


# -- discretization -----------------------------------------------------------
@pytest.mark.parametrize("lam, step, expected", [(5, 2, 5), (1, 2, 1), (9, 3, 7), (4.99, 2, 5), (9, 2, 9)])
def test_discretize_examples(lam, step, expected):
    assert discretize_scale(lam, step) == expected


def test_discretize_out_of_range():
    with pytest.raises(ContractViolation):
        discretize_scale(0.5, 2)
    with pytest.raises(ContractViolation):
        discretize_scale(9.5, 2, rho_max=9)


@given(st.floats(1.0, 9.0), st.sampled_from([1, 2, 3, 5, 7, 9]))
def test_discretize_odd_and_bounded(lam, step):
    n = discretize_scale(lam, step, 9)
    assert n % 2 == 1 and 1 <= n <= 2 * (9 // step) + 1


def test_bank_keys_cover_every_reachable_size():
    for step in (1, 2, 3, 5, 9):
        config = ArfConfig(1, 1, rho_max=9, sigma_step=step)
        reachable = {discretize_scale(lam, step, 9) for lam in np.linspace(1, 9, 2001)}
        assert set(config.kernel_sizes()) == reachable
        assert len(config.bank_keys()) == len(reachable) ** 2


def test_config_validation():
    for kwargs in (dict(rho_max=8), dict(rho_max=1), dict(sigma_step=0), dict(sigma_step=11),
                   dict(kappa=-0.1), dict(eca_window=2)):
        with pytest.raises(ConfigurationError):
            ArfConfig(2, 2, **kwargs)


# -- scale prediction -----------------------------------------------------------
def test_scales_start_at_the_midpoint(rng):
    _, layer = make_layer(2, 2)
    lam_u, lam_v = predict_scales(Tensor(rng.normal(size=(3, 2, 5, 5))), layer, training=True)
    np.testing.assert_array_equal(lam_u.data, 5.0)
    np.testing.assert_array_equal(lam_v.data, 5.0)


def test_scale_mapping_limits():
    assert scale_from_raw(Tensor(np.array([-1e4])), 9).data[0] == 1.0
    assert scale_from_raw(Tensor(np.array([0.0])), 9).data[0] == 5.0
    assert scale_from_raw(Tensor(np.array([1e4])), 9).data[0] == 9.0


def conv1d_loop(x, w, b):
    c_out, c_in, k = w.shape
    length = x.shape[1]
    out = np.zeros((c_out, length))
    for o in range(c_out):
        for pos in range(length):
            total = b[o]
            for c in range(c_in):
                for j in range(k):
                    src = pos + j - k // 2
                    if 0 <= src < length:
                        total += w[o, c, j] * x[c, src]
            out[o, pos] = total
    return out


def head_oracle(head, descriptor, training):
    h = conv1d_loop(descriptor, head.conv1.weight.data, head.conv1.bias.data)
    gamma, beta = head.norm.state.gamma.data, head.norm.state.beta.data
    if training:
        mu, var = h.mean(axis=1), h.var(axis=1)
    else:
        mu, var = head.norm.state.running_mean, head.norm.state.running_var
    h = (h - mu[:, None]) / np.sqrt(var[:, None] + F.BN_EPS) * gamma[:, None] + beta[:, None]
    h = np.where(h > 0, h, 0.1 * h)
    raw = conv1d_loop(h, head.conv2.weight.data, head.conv2.bias.data).mean()
    return 8.0 / (1.0 + np.exp(-raw)) + 1.0


@pytest.mark.parametrize("training", [False, True])
def test_predict_scales_hand_oracle(training):
    _, layer = make_layer(2, 2, seed=5)
    rng = np.random.default_rng(9)
    for head in (layer.scale_u, layer.scale_v):
        head.conv2.weight.data[...] = rng.normal(size=head.conv2.weight.shape)
        head.conv1.bias.data[...] = [0.2, -0.1]
        head.conv2.bias.data[...] = [0.05]
    x = np.ones((2, 4, 4))
    x[1] *= 2.0
    lam_u, lam_v = predict_scales(Tensor(x), layer, training=training)
    # x is constant, so both axis-pooled descriptors are [C, 4] with rows 1 and 2
    desc = np.repeat(np.array([[1.0], [2.0]]), 4, axis=1)
    assert abs(lam_u.data[0] - head_oracle(layer.scale_u, desc, training)) <= 1e-10
    assert abs(lam_v.data[0] - head_oracle(layer.scale_v, desc, training)) <= 1e-10


@given(st.integers(0, 2 ** 31), st.floats(0.1, 50))
def test_scales_stay_in_range(seed, scale):
    _, layer = make_layer(3, 2, seed=1)
    x = np.random.default_rng(seed).normal(0, scale, size=(4, 3, 5, 5))
    for lam in predict_scales(Tensor(x), layer, training=seed % 2 == 0):
        assert lam.shape == (4,)
        assert np.all(lam.data >= 1.0) and np.all(lam.data <= 9.0)


# -- sampling grid ---------------------------------------------------------------
def test_base_lattice():
    np.testing.assert_allclose(base_lattice(3, 5), np.linspace(-1, 1, 5), atol=1e-15)
    np.testing.assert_array_equal(base_lattice(1, 4), np.zeros(4))
    np.testing.assert_array_equal(base_lattice(5, 5), np.linspace(-1, 1, 5))


def test_grid_without_deformation():
    config = ArfConfig(1, 1)
    for lam_u, lam_v, cfg in ((5.0, 5.0, config), (9.0, 1.0, ArfConfig(1, 1, kappa=0.0))):
        grid = build_deformed_grid(5, 3, lam_u, lam_v, 6, 7, cfg).data
        np.testing.assert_allclose(grid[0], np.broadcast_to(base_lattice(3, 7), (6, 7)), atol=1e-15)
        np.testing.assert_allclose(grid[1], np.broadcast_to(base_lattice(5, 6)[:, None], (6, 7)), atol=1e-15)


def test_grid_offset_example():
    grid = build_deformed_grid(5, 5, 9.0, 1.0, 5, 5, ArfConfig(1, 1, kappa=0.1, rho_max=9)).data
    lattice = np.linspace(-1, 1, 5)
    # vertical coordinate shifted by +0.08, horizontal by -0.08
    np.testing.assert_allclose(grid[1, :-1, 0], lattice[:-1] + 0.08, atol=1e-12)
    np.testing.assert_allclose(grid[0, 0, 1:], lattice[1:] - 0.08, atol=1e-12)
    assert np.all(grid[1, -1] == 1.0) and np.all(grid[0, :, 0] == -1.0)
    assert grid[1, -2, 0] == pytest.approx(0.58) and grid[0, 0, 1] == pytest.approx(-0.58)


@given(st.integers(0, 2 ** 31))
def test_grid_within_bounds(seed):
    rng = np.random.default_rng(seed)
    lam_u, lam_v = rng.uniform(1, 9, size=(2, 3))
    config = ArfConfig(1, 1, kappa=float(rng.uniform(0, 2)))
    grid = build_deformed_grid(discretize_scale(lam_u, 2), discretize_scale(lam_v, 2), lam_u, lam_v,
                               6, 5, config).data
    assert grid.shape == (3, 2, 6, 5)
    assert grid.min() >= -1.0 and grid.max() <= 1.0


def test_grid_rejects_even_sizes():
    with pytest.raises(ContractViolation):
        build_deformed_grid(4, 3, 5.0, 5.0, 6, 6, ArfConfig(1, 1))


# -- full layer ----------------------------------------------------------------------
def test_degenerate_equivalence(rng):
    worst = 0.0
    for i in range(50):
        _, layer = make_degenerate(2, 3, seed=i)
        x = rng.normal(size=(2, 6, 7))
        out = arf_apply(Tensor(x), layer).data
        ref = F.conv2d(Tensor(x), layer.kernel(3, 3)).data
        worst = max(worst, np.abs(out - ref).max())
    assert worst <= 1e-12


def test_zero_input_with_silent_bias_head():
    store, layer = make_layer(2, 3, seed=4)
    for p in (layer.bias_head.conv1.weight, layer.bias_head.conv2.weight):
        p.data[...] = 0.0
    out = arf_apply(Tensor(np.zeros((2, 5, 5))), layer).data
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("c_in, c_out", [(1, 1), (2, 3), (3, 2)])
def test_output_shape_for_every_kernel(c_in, c_out, rng):
    _, layer = make_layer(c_in, c_out)
    x = Tensor(rng.normal(size=(2, c_in, 5, 6)))
    for key in layer.config.bank_keys():
        layer.force_kernel = key
        assert arf_apply(x, layer).shape == (2, c_out, 5, 6)
    layer.force_kernel = None
    assert arf_apply(Tensor(x.data[0]), layer).shape == (c_out, 5, 6)


def test_channel_mismatch():
    _, layer = make_layer(2, 2)
    with pytest.raises(DimensionError):
        arf_apply(Tensor(np.zeros((3, 4, 4))), layer)


def test_batched_matches_single_in_eval(rng):
    _, layer = make_layer(2, 2, seed=2)
    x = rng.normal(size=(4, 2, 6, 6))
    batched = arf_apply(Tensor(x), layer).data
    for i in range(4):
        np.testing.assert_allclose(arf_apply(Tensor(x[i]), layer).data, batched[i], atol=1e-12)


def test_gradient_check_and_scale_path():
    assert check_arf() <= 1e-4
    store, layer = make_layer(2, 2, seed=3)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 6, 6)))
    (arf_apply(x, layer, training=True) ** 2).sum().backward()
    # the scale heads are reached only through the continuous grid offset
    for head in (layer.scale_u, layer.scale_v):
        assert np.abs(head.conv2.bias.grad).max() > 0


def test_frozen_bank_gets_no_gradient():
    store, layer = make_layer(2, 2, frozen_bank=True)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 6)))
    arf_apply(x, layer, training=True).sum().backward()
    assert all(k.grad is None for k in layer.bank.values())


def test_probe_records_sizes(rng):
    _, layer = make_layer(2, 2)
    probe = {}
    arf_apply(Tensor(rng.normal(size=(3, 2, 5, 5))), layer, probe=probe)
    n_u, n_v, lam_u, lam_v = probe["arf"]
    assert n_u.shape == (3,)
    np.testing.assert_array_equal(n_u, discretize_scale(lam_u, 2))
    np.testing.assert_array_equal(n_v, discretize_scale(lam_v, 2))
