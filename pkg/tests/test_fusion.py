import numpy as np
import pytest
from hypothesis import given, strategies as st

from arfsfr.errors import DimensionError
from arfsfr.fusion import FusionHead, fuse
from arfsfr.gradcheck import check_fuse
from arfsfr.layers import ParamStore
from arfsfr.tensor import Tensor


def make_head(channels=3, seed=0, scale=1.0):
    store = ParamStore(np.float64)
    head = FusionHead(store, channels, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for p in store.params.values():
        p.data = rng.normal(scale=scale, size=p.shape)
    return head


def test_equal_scores_average_the_branches(rng):
    head = make_head()
    head.conv3.weight.data[...] = 0.0
    head.conv3.bias.data[...] = 0.3
    s, f = rng.normal(size=(2, 3, 5, 5))
    fused, w_s, w_f = fuse(Tensor(s), Tensor(f), head)
    np.testing.assert_array_equal(w_s.data, 0.5)
    np.testing.assert_array_equal(w_f.data, 0.5)
    np.testing.assert_allclose(fused.data, (s + f) / 2, atol=1e-15)


def test_saturated_scores_select_spatial(rng):
    head = make_head()
    head.conv3.weight.data[...] = 0.0
    head.conv3.bias.data[...] = [500.0, -500.0]
    s, f = rng.normal(size=(2, 3, 4, 4))
    fused, w_s, _ = fuse(Tensor(s), Tensor(f), head)
    np.testing.assert_array_equal(w_s.data, 1.0)
    np.testing.assert_array_equal(fused.data, s)


def test_identical_branches_pass_through(rng):
    x = rng.normal(size=(3, 6, 6))
    fused, _, _ = fuse(Tensor(x), Tensor(x), make_head(scale=2.0))
    np.testing.assert_allclose(fused.data, x, atol=1e-12)


@given(st.integers(0, 2 ** 31))
def test_weights_and_envelope(seed):
    rng = np.random.default_rng(seed)
    head = make_head(2, seed % 7, scale=0.3)
    s, f = rng.normal(size=(2, 3, 2, 4, 4))
    fused, w_s, w_f = fuse(Tensor(s), Tensor(f), head)
    assert w_s.shape == (3, 4, 4)
    np.testing.assert_allclose(w_s.data + w_f.data, 1.0, atol=1e-6)
    assert np.all((w_s.data > 0) & (w_s.data < 1))
    assert np.all(fused.data >= np.minimum(s, f) - 1e-12)
    assert np.all(fused.data <= np.maximum(s, f) + 1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        fuse(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 5))), make_head())


def test_score_map_has_two_channels(rng):
    scores = make_head().scores(Tensor(rng.normal(size=(2, 6, 5, 7))))
    assert scores.shape == (2, 2, 5, 7)


def test_gradcheck():
    assert check_fuse() <= 1e-4
