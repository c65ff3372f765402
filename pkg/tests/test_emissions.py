"""Emission models: finite-difference derivative oracles and closed-form values."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import quad

from avem.emissions import BernoulliEmission, GaussianEmission, sigmoid, softplus


def fd_grad(fun, f, h=1e-5):
    d = f.shape[0]
    g = np.zeros(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        g[j] = (fun(f + e) - fun(f - e)) / (2 * h)
    return g


def fd_hess(fun, f, h=1e-4):
    d = f.shape[0]
    H = np.zeros((d, d))
    for j in range(d):
        ej = np.zeros(d)
        ej[j] = h
        for l in range(d):
            el = np.zeros(d)
            el[l] = h
            H[j, l] = (fun(f + ej + el) - fun(f + ej - el) - fun(f - ej + el) + fun(f - ej - el)) / (4 * h * h)
    return H


class TestGaussian:
    def test_standard_normal_value(self):
        em = GaussianEmission(mu=np.zeros((1, 1)), sigma2=np.array([1.0]))
        val = em.log_e(0, 0, np.zeros(1), np.zeros(1))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)

    def test_density_normalizes(self):
        em = GaussianEmission(mu=np.array([[0.3]]), sigma2=np.array([0.8]))
        f = np.array([0.5])
        total, _ = quad(lambda y: np.exp(em.log_e(0, 0, f, np.array([y]))), -20, 20)
        assert total == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_derivatives_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        K, p = 2, int(rng.integers(1, 4))
        em = GaussianEmission(mu=rng.normal(size=(K, p)), sigma2=rng.uniform(0.3, 2.0, size=K))
        k = int(rng.integers(K))
        f = rng.normal(size=p)
        row = rng.normal(size=p)
        fun = lambda x: em.log_e(k, 0, x, row)
        np.testing.assert_allclose(em.grad_f(k, 0, f, row), fd_grad(fun, f), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(em.hess_f(k, 0, f, row), fd_hess(fun, f), rtol=1e-4, atol=1e-5)

    def test_log_matrix_matches_pointwise(self):
        rng = np.random.default_rng(123)
        em = GaussianEmission(mu=rng.normal(size=(3, 2)), sigma2=rng.uniform(0.5, 2.0, size=3))
        data = rng.normal(size=(5, 2))
        f = rng.normal(size=2)
        M = em.log_matrix(f, data)
        for t in range(5):
            for k in range(3):
                assert M[t, k] == pytest.approx(em.log_e(k, t, f, data[t]), abs=1e-12)

    def test_log_matrix_batch_matches_stack(self):
        rng = np.random.default_rng(124)
        em = GaussianEmission(mu=rng.normal(size=(2, 3)), sigma2=rng.uniform(0.5, 2.0, size=2))
        data = rng.normal(size=(4, 6, 3))
        F = rng.normal(size=(4, 3))
        batch = em.log_matrix_batch(F, data)
        for b in range(4):
            np.testing.assert_allclose(batch[b], em.log_matrix(F[b], data[b]), atol=1e-13)

    def test_validation(self):
        with pytest.raises(ValueError, match="positive"):
            GaussianEmission(mu=np.zeros((2, 1)), sigma2=np.array([1.0, 0.0]))
        with pytest.raises(ValueError, match="per state"):
            GaussianEmission(mu=np.zeros((2, 1)), sigma2=np.array([1.0]))


class TestBernoulli:
    def test_pointwise_value(self):
        em = BernoulliEmission(beta=np.array([-1.5, 1.5]))
        f = np.array([0.4])
        eta = 1.5 + 0.4
        y1 = em.log_e(1, 0, f, np.array([1.0]))
        assert y1 == pytest.approx(eta - np.log1p(np.exp(eta)), abs=1e-12)
        y0 = em.log_e(1, 0, f, np.array([0.0]))
        assert y0 == pytest.approx(-np.log1p(np.exp(eta)), abs=1e-12)

    def test_extreme_logit_saturation(self):
        em = BernoulliEmission(beta=np.array([30.0]))
        val = em.log_e(0, 0, np.zeros(1), np.array([1.0]))
        assert np.isfinite(val)
        assert val == pytest.approx(-float(softplus(np.array(-30.0))), abs=1e-12)
        val0 = em.log_e(0, 0, np.zeros(1), np.array([0.0]))
        assert np.isfinite(val0)
        assert val0 == pytest.approx(-30.0, rel=1e-10)

    @pytest.mark.parametrize("seed", range(50))
    def test_derivatives_match_finite_differences(self, seed):
        rng = np.random.default_rng(10_000 + seed)
        em = BernoulliEmission(beta=rng.normal(size=2))
        k = int(rng.integers(2))
        f = rng.normal(size=1)
        row = np.array([float(rng.integers(2))])
        fun = lambda x: em.log_e(k, 0, x, row)
        np.testing.assert_allclose(em.grad_f(k, 0, f, row), fd_grad(fun, f), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(em.hess_f(k, 0, f, row), fd_hess(fun, f), rtol=1e-3, atol=1e-6)

    def test_log_matrix_batch_matches_stack(self):
        rng = np.random.default_rng(42)
        em = BernoulliEmission(beta=np.array([-1.0, 1.0]))
        data = rng.integers(0, 2, size=(3, 8, 1)).astype(float)
        F = rng.normal(size=(3, 1))
        batch = em.log_matrix_batch(F, data)
        for b in range(3):
            np.testing.assert_allclose(batch[b], em.log_matrix(F[b], data[b]), atol=1e-14)


def test_softplus_and_sigmoid_stable():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    sp = softplus(x)
    assert np.all(np.isfinite(sp))
    assert sp[0] == 0.0
    assert sp[-1] == 800.0
    s = sigmoid(x)
    assert np.all((s >= 0) & (s <= 1))
    assert s[2] == 0.5
