import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from columbus import corruption as C
from columbus.attribution import AttributionMap, MapKind, Method
from columbus.errors import ConfigError, UsageError
from columbus.tensor import Tensor


def emap(values, level=0):
    return AttributionMap(level, MapKind.ELEMENTWISE, np.asarray(values, dtype=float), Method.SALIENCY)


def smap(values, level=1):
    return AttributionMap(level, MapKind.SPATIAL, np.asarray(values, dtype=float), Method.GRAD_CAM)


def sort_oracle(keys: np.ndarray, p: float) -> set[int]:
    """Indices chosen by a full sort on (-key, index)."""
    k = math.ceil(Decimal(repr(p)) * len(keys))
    order = sorted(range(len(keys)), key=lambda i: (-keys[i], i))
    return set(order[:k])


class TestTopPMask:
    def test_p_zero_empty(self, rng):
        m = C.top_p_mask(emap(rng.standard_normal((3, 1, 4, 4))), 0.0)
        assert not m.selected.any()

    def test_p_one_full(self, rng):
        m = C.top_p_mask(smap(rng.random((3, 4, 4))), 1.0)
        assert m.selected.all()

    def test_magnitude_ranking_example(self):
        m = C.top_p_mask(emap([[3.0, -5.0, 1.0, 2.0]]), 0.5)
        assert set(np.flatnonzero(m.selected[0])) == {0, 1}

    def test_ties_prefer_lowest_index(self):
        m = C.top_p_mask(emap([[1.0, 2.0, 2.0, -2.0, 0.5]]), 0.4)
        assert set(np.flatnonzero(m.selected[0])) == {1, 2}

    def test_spatial_expand_covers_channels(self, rng):
        m = C.top_p_mask(smap(rng.random((2, 3, 3))), 0.25)
        full = m.expand((2, 5, 3, 3))
        assert full.shape == (2, 5, 3, 3)
        for c in range(5):
            np.testing.assert_array_equal(full[:, c], m.selected)

    def test_count_is_exact_ceiling(self):
        assert C.count_for(0.3, 10) == 3
        assert C.count_for(0.35, 20) == 7
        assert C.count_for(1 / 3, 9) == 3
        assert C.count_for(0.01, 1024) == 11
        assert C.count_for(0.4, 5) == 2
        assert C.count_for(0.7, 10) == 7

    @settings(max_examples=200, deadline=None, derandomize=True)
    @given(
        st.lists(st.integers(-4, 4), min_size=1, max_size=40),
        st.floats(0.0, 1.0, allow_nan=False),
    )
    def test_matches_sort_oracle(self, ints, p):
        keys = np.array(ints, dtype=float)
        m = C.top_p_mask(emap(keys[None]), p)
        assert set(np.flatnonzero(m.selected[0])) == sort_oracle(np.abs(keys), p)


class TestCorruptInput:
    @pytest.fixture
    def images(self, rng):
        return rng.random((3, 1, 6, 6))

    def mask(self, X, p=0.3, seed=0):
        return C.top_p_mask(emap(np.random.default_rng(seed).standard_normal(X.shape)), p)

    def test_zero_full_mask(self, images):
        out = C.corrupt_input(images, C.top_p_mask(emap(np.ones(images.shape)), 1.0), C.CorruptionMethod(C.CorruptionKind.ZERO))
        assert np.all(out == 0.0)

    def test_fgsm_zero_epsilon_identity(self, images, rng):
        method = C.CorruptionMethod(C.CorruptionKind.FGSM, epsilon=0.0)
        out = C.corrupt_input(images, self.mask(images, 1.0), method, rng.standard_normal(images.shape))
        assert out.tobytes() == images.tobytes()

    def test_fgsm_steps_and_clamps(self):
        X = np.array([[[[0.95, 0.5, 0.02]]]])
        g = np.array([[[[1.0, -1.0, -1.0]]]])
        out = C.corrupt_input(X, C.top_p_mask(emap(np.ones(X.shape)), 1.0), C.CorruptionMethod(C.CorruptionKind.FGSM, epsilon=0.1), g)
        np.testing.assert_allclose(out, [[[[1.0, 0.4, 0.0]]]], atol=1e-15)

    def test_fgsm_needs_gradient(self, images):
        with pytest.raises(UsageError):
            C.corrupt_input(images, self.mask(images), C.CorruptionMethod(C.CorruptionKind.FGSM))

    def test_blur_single_bright_pixel(self):
        X = np.zeros((1, 1, 7, 7))
        X[0, 0, 3, 3] = 1.0
        sel = np.zeros(X.shape, dtype=bool)
        sel[0, 0, 3, 3] = True
        mask = C.FeatureMask(0, MapKind.ELEMENTWISE, sel)
        out = C.corrupt_input(X, mask, C.CorruptionMethod(C.CorruptionKind.GAUSSIAN_BLUR, sigma=1.0, kernel=3))
        # direct 2-D convolution oracle with the normalised discrete Gaussian
        r = np.arange(3) - 1
        k2 = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / 2.0)
        k2 /= k2.sum()
        padded = np.pad(X[0, 0], 1, mode="edge")
        direct = sum(k2[u, v] * padded[3 + u, 3 + v] for u in range(3) for v in range(3))
        assert abs(out[0, 0, 3, 3] - direct) < 1e-15
        assert abs(out[0, 0, 3, 3] - k2[1, 1]) < 1e-15
        sel_out = out.copy()
        sel_out[0, 0, 3, 3] = 0.0
        assert np.all(sel_out == 0.0)

    def test_blur_matches_direct_convolution(self, rng):
        X = rng.random((2, 2, 6, 5))
        blurred = C.gaussian_blur(X, 1.3, 5)
        r = np.arange(5) - 2
        k2 = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 1.3 ** 2))
        k2 /= k2.sum()
        padded = np.pad(X, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge")
        direct = np.zeros_like(X)
        for u in range(5):
            for v in range(5):
                direct += k2[u, v] * padded[:, :, u:u + 6, v:v + 5]
        np.testing.assert_allclose(blurred, direct, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("kind", C.INPUT_KINDS)
    def test_unmasked_pixels_bit_identical(self, images, rng, kind):
        mask = self.mask(images, 0.4)
        out = C.corrupt_input(images, mask, C.CorruptionMethod(kind), rng.standard_normal(images.shape), np.random.default_rng(0))
        keep = ~mask.selected
        assert out[keep].tobytes() == images[keep].tobytes()
        assert np.all((out >= 0) & (out <= 1))

    def test_random_value_deterministic(self, images):
        mask = self.mask(images, 0.5)
        method = C.CorruptionMethod(C.CorruptionKind.RANDOM_VALUE)
        a = C.corrupt_input(images, mask, method, rng=np.random.default_rng(3))
        b = C.corrupt_input(images, mask, method, rng=np.random.default_rng(3))
        assert a.tobytes() == b.tobytes()
        assert np.count_nonzero(a != images) == mask.selected.sum()

    def test_level_mismatch(self, images):
        mask = C.top_p_mask(emap(np.ones(images.shape), level=1), 0.5)
        with pytest.raises(UsageError):
            C.corrupt_input(images, mask, C.CorruptionMethod(C.CorruptionKind.ZERO))

    def test_dropout_is_not_an_input_method(self, images):
        with pytest.raises(UsageError):
            C.corrupt_input(images, self.mask(images), C.CorruptionMethod(C.CorruptionKind.TARGETED_DROPOUT))

    @pytest.mark.parametrize("kw", [dict(epsilon=-0.1), dict(kernel=4), dict(kernel=1)])
    def test_invalid_methods(self, kw):
        with pytest.raises(ConfigError):
            C.CorruptionMethod(C.CorruptionKind.FGSM, **kw)


class TestCorruptRepr:
    def test_empty_mask_unchanged(self, rng):
        R = rng.random((2, 3, 4, 4))
        out = C.corrupt_repr(Tensor(R), C.top_p_mask(emap(R, level=1), 0.0))
        assert out.data.tobytes() == R.tobytes()

    def test_full_mask_zero(self, rng):
        R = rng.random((2, 3, 4, 4))
        out = C.corrupt_repr(Tensor(R), C.top_p_mask(smap(rng.random((2, 4, 4))), 1.0))
        assert np.all(out.data == 0.0)

    def test_spatial_position_oracle(self, rng):
        R = rng.random((1, 2, 2, 2)) + 0.5
        sel = np.zeros((1, 2, 2), dtype=bool)
        sel[0, 0, 1] = True
        out = C.corrupt_repr(Tensor(R), C.FeatureMask(1, MapKind.SPATIAL, sel)).data
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    expected = 0.0 if (i, j) == (0, 1) else R[0, c, i, j]
                    assert out[0, c, i, j] == expected

    def test_idempotent(self, rng):
        R = rng.random((2, 3, 4, 4))
        mask = C.top_p_mask(emap(rng.standard_normal(R.shape), level=2), 0.3)
        once = C.corrupt_repr(Tensor(R), mask)
        twice = C.corrupt_repr(once, mask)
        assert once.data.tobytes() == twice.data.tobytes()

    def test_level_zero_rejected(self, rng):
        R = rng.random((1, 1, 2, 2))
        with pytest.raises(UsageError):
            C.corrupt_repr(Tensor(R), C.top_p_mask(emap(R, level=0), 0.5))


def test_zero_corruption_idempotent(rng):
    X = rng.random((2, 1, 5, 5))
    mask = C.top_p_mask(emap(rng.standard_normal(X.shape)), 0.3)
    method = C.CorruptionMethod(C.CorruptionKind.ZERO)
    once = C.corrupt_input(X, mask, method)
    assert C.corrupt_input(once, mask, method).tobytes() == once.tobytes()
