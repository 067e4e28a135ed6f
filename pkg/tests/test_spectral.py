import numpy as np
import pytest
from hypothesis import given, strategies as st

from arfsfr.errors import DimensionError
from arfsfr.gradcheck import finite_diff_check
from arfsfr.layers import ParamStore
from arfsfr.spectral import (SpectralMask, apply_spectral_mask, dct2, dct2_naive, dct_matrix,
                             frequency_input, idct2)
from arfsfr.tensor import Tensor


def naive_loop(x):
    """Independent quadruple loop over one [H, W] plane."""
    h, w = x.shape
    out = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            au = np.sqrt(1 / h) if u == 0 else np.sqrt(2 / h)
            av = np.sqrt(1 / w) if v == 0 else np.sqrt(2 / w)
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += x[i, j] * np.cos(np.pi * (2 * i + 1) * u / (2 * h)) * np.cos(
                        np.pi * (2 * j + 1) * v / (2 * w))
            out[u, v] = au * av * total
    return out


def mask_with(template_value, channels=2):
    store = ParamStore(np.float64)
    m = SpectralMask(store, channels)
    m.template.data[...] = template_value
    return m


def test_constant_image_is_dc_only():
    out = dct2(Tensor(np.full((1, 2, 2), 1.5))).data[0]
    np.testing.assert_allclose(out, [[3.0, 0.0], [0.0, 0.0]], atol=1e-15)


def test_delta_image_coefficients():
    x = np.zeros((1, 2, 2))
    x[0, 0, 0] = 1.0
    np.testing.assert_allclose(dct2(Tensor(x)).data[0], 0.5, atol=1e-15)


def test_separable_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 8, 8))
    fast = dct2(Tensor(x)).data
    for c in range(2):
        np.testing.assert_allclose(fast[c], naive_loop(x[c]), rtol=0, atol=1e-12)
    np.testing.assert_allclose(dct2_naive(x), fast, rtol=0, atol=1e-12)


def test_dct_matrix_is_orthonormal():
    for n in (1, 2, 5, 16):
        d = dct_matrix(n)
        np.testing.assert_allclose(d @ d.T, np.eye(n), atol=1e-14)


def test_round_trip_every_shape(rng):
    for h in range(1, 17):
        for w in range(1, 17):
            x = rng.normal(size=(2, h, w))
            np.testing.assert_allclose(idct2(dct2(Tensor(x))).data, x, rtol=0, atol=1e-10)


def test_inverse_of_constant_case():
    coeffs = np.zeros((1, 2, 2))
    coeffs[0, 0, 0] = 2 * 0.7
    np.testing.assert_allclose(idct2(Tensor(coeffs)).data, 0.7, atol=1e-15)


def test_parseval(rng):
    x = rng.normal(size=(3, 16, 16))
    assert abs(np.linalg.norm(dct2(Tensor(x)).data) - np.linalg.norm(x)) <= 1e-10


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 5, 6))
    lhs = dct2(Tensor(a * x + b * y)).data
    rhs = a * dct2(Tensor(x)).data + b * dct2(Tensor(y)).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_rejects_vectors():
    with pytest.raises(DimensionError):
        dct2(Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        idct2(Tensor(np.ones(4)))


# -- mask -------------------------------------------------------------------
def test_zero_template_halves_coefficients(rng):
    f = rng.normal(size=(2, 8, 8))
    np.testing.assert_allclose(apply_spectral_mask(Tensor(f), mask_with(0.0)).data, 0.5 * f, atol=1e-15)


def test_large_template_suppresses_and_negative_passes(rng):
    f = rng.normal(size=(2, 8, 8))
    assert np.abs(apply_spectral_mask(Tensor(f), mask_with(40.0)).data).max() < 1e-15
    np.testing.assert_allclose(apply_spectral_mask(Tensor(f), mask_with(-40.0)).data, f, atol=1e-15)


def test_mask_entries_strictly_inside_unit_interval(rng):
    m = mask_with(0.0, 3)
    m.template.data[...] = rng.normal(0, 5, size=m.template.shape)
    values = m.mask(12, 9).data
    assert values.shape == (1, 3, 12, 9)
    assert np.all(values > 0) and np.all(values < 1)


def test_mask_channel_mismatch():
    with pytest.raises(DimensionError):
        apply_spectral_mask(Tensor(np.ones((3, 4, 4))), mask_with(0.0, 2))


def test_batched_mask_matches_per_sample(rng):
    m = mask_with(0.0)
    m.template.data[...] = rng.normal(size=m.template.shape)
    x = rng.normal(size=(3, 2, 8, 8))
    batched = frequency_input(Tensor(x), m).data
    for i in range(3):
        np.testing.assert_allclose(frequency_input(Tensor(x[i]), m).data, batched[i], atol=1e-14)


def test_chain_gradcheck(rng):
    m = mask_with(0.0)
    m.template.data[...] = rng.normal(size=m.template.shape)
    x = Tensor(rng.normal(size=(2, 8, 8)))
    weights = rng.normal(size=(2, 8, 8))
    err = finite_diff_check(lambda: (frequency_input(x, m) * weights).sum(), [x, m.template])
    assert err <= 1e-4
