import logging

import numpy as np
import pytest

from columbus import alignment as AL
from columbus import tensor as T
from columbus.tensor import Tensor

from conftest import numerical_gradient, rel_err


class TestDomainStats:
    def test_identical_rows(self):
        s = AL.domain_stats(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
        assert np.all(s.covariance == 0.0)

    def test_hand_example(self):
        s = AL.domain_stats(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_array_equal(s.mean, [0.5, 0.5])
        np.testing.assert_array_equal(s.covariance, [[0.5, -0.5], [-0.5, 0.5]])

    def test_translation(self, rng):
        E = rng.standard_normal((6, 3))
        shift = rng.standard_normal(3)
        a, b = AL.domain_stats(E), AL.domain_stats(E + shift)
        np.testing.assert_allclose(b.mean, a.mean + shift, atol=1e-14)
        np.testing.assert_allclose(b.covariance, a.covariance, atol=1e-14)

    def test_symmetric(self, rng):
        c = AL.domain_stats(rng.standard_normal((9, 5))).covariance
        assert np.max(np.abs(c - c.T)) <= 1e-12

    def test_singleton_has_no_covariance(self):
        s = AL.domain_stats(np.array([[1.0, 2.0]]))
        assert s.covariance is None and s.count == 1


class TestAlignmentLoss:
    def test_identical_domains_zero(self, rng):
        E = rng.standard_normal((5, 3))
        stats = [AL.domain_stats(E, d) for d in range(3)]
        assert AL.alignment_loss(stats, 3) == 0.0

    def test_mean_shift_example(self):
        base = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        s1 = AL.domain_stats(base, 0)
        s2 = AL.domain_stats(base + np.array([1.0, 0.0]), 1)
        assert abs(AL.alignment_loss([s1, s2], 2) - 1.0) <= 1e-9

    def test_covariance_term_scaling(self):
        s1 = AL.DomainStats(0, np.zeros(2), np.eye(2), 5)
        s2 = AL.DomainStats(1, np.zeros(2), 2 * np.eye(2), 5)
        assert AL.alignment_loss([s1, s2], 2) == pytest.approx(2.0 / 16.0, abs=1e-15)

    def test_pair_average(self):
        stats = [AL.DomainStats(i, np.array([float(i)]), None, 1) for i in range(3)]
        # pairs: (0,1)=1, (0,2)=4, (1,2)=1
        assert AL.alignment_loss(stats, 1) == pytest.approx(2.0, abs=1e-15)

    def test_permutation_invariant(self, rng):
        stats = [AL.domain_stats(rng.standard_normal((4, 3)) + i, i) for i in range(4)]
        base = AL.alignment_loss(stats, 3)
        for perm in ([3, 2, 1, 0], [1, 3, 0, 2]):
            assert AL.alignment_loss([stats[i] for i in perm], 3) == base

    def test_single_domain_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert AL.alignment_loss([AL.domain_stats(np.ones((3, 2)))], 2) == 0.0
        assert "at least two domains" in caplog.text

    def test_nonnegative(self, rng):
        for _ in range(20):
            stats = [AL.domain_stats(rng.standard_normal((rng.integers(1, 6), 3)), i) for i in range(3)]
            assert AL.alignment_loss(stats, 3) >= 0.0


class TestPenalty:
    def test_value_matches_stats(self, rng):
        E = rng.standard_normal((9, 4))
        domains = np.array([2, 0, 1, 0, 2, 1, 1, 0, 2])
        stats = [AL.domain_stats(E[domains == d], d) for d in range(3)]
        assert AL.alignment_penalty(Tensor(E), domains).item() == AL.alignment_loss(stats, 4)

    def test_gradient_with_singleton_domain(self, rng):
        E = rng.standard_normal((7, 3))
        domains = np.array([0, 0, 0, 1, 1, 1, 2])
        t = Tensor(E.copy(), requires_grad=True)
        T.backward(AL.alignment_penalty(t, domains))
        num = numerical_gradient(lambda: AL.alignment_penalty(Tensor(E), domains).item(), E)
        assert rel_err(t.grad, num) <= 1e-4

    def test_one_domain_zero_gradient(self, rng):
        t = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        T.backward(AL.alignment_penalty(t, np.zeros(4, dtype=int)))
        assert np.all(t.grad == 0.0)
