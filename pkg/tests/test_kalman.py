"""Filter/smoother against the dense joint-Gaussian oracle and closed forms."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from avem.base import NumericalError
from avem.kalman import (
    LgssmSpec,
    dense_joint_oracle,
    kalman_filter,
    reset_smoother_pass_count,
    rts_smoother,
    smoother_pass_count,
)


def random_spec(rng: np.random.Generator, q: int = 2, p: int = 3) -> LgssmSpec:
    G = rng.normal(scale=0.4, size=(q, q))
    H = rng.normal(size=(p, q))
    R = np.diag(rng.uniform(0.2, 1.5, size=p))
    m0 = rng.normal(size=q)
    A = rng.normal(size=(q, q))
    P0 = A @ A.T + 0.5 * np.eye(q)
    return LgssmSpec(G=G, H=H, R=R, m0=m0, P0=P0)


class TestScalarClosedForm:
    def test_static_scalar_filter(self):
        # G=0, H=1, R=r, m0=0, P0=1: every step has prior N(0, 1)
        r = 0.7
        spec = LgssmSpec(G=np.zeros((1, 1)), H=np.ones((1, 1)), R=np.array([[r]]),
                         m0=np.zeros(1), P0=np.eye(1))
        D = np.array([[1.0], [-2.0], [0.5]])
        filt = kalman_filter(spec, D)
        np.testing.assert_allclose(filt.m_filt[:, 0], D[:, 0] / (1 + r), rtol=1e-12)
        np.testing.assert_allclose(filt.P_filt[:, 0, 0], r / (1 + r), rtol=1e-12)

    def test_zero_loading_returns_prior(self):
        rng = np.random.default_rng(3)
        spec = random_spec(rng)
        spec.H = np.zeros_like(spec.H)
        D = rng.normal(size=(4, spec.p))
        filt = kalman_filter(spec, D)
        sm = rts_smoother(spec, filt)
        # prior marginals by propagation
        m, P = spec.m0, spec.P0
        for t in range(4):
            if t > 0:
                m = spec.G @ m
                P = spec.G @ P @ spec.G.T + np.eye(spec.q)
            np.testing.assert_allclose(sm.m_hat[t], m, atol=1e-12)
            np.testing.assert_allclose(sm.P_hat[t], P, atol=1e-12)

    def test_huge_noise_posterior_is_prior(self):
        rng = np.random.default_rng(4)
        spec = random_spec(rng)
        spec.R = 1e12 * np.eye(spec.p)
        D = rng.normal(size=(4, spec.p))
        sm = rts_smoother(spec, kalman_filter(spec, D))
        m, P = spec.m0, spec.P0
        for t in range(4):
            if t > 0:
                m = spec.G @ m
                P = spec.G @ P @ spec.G.T + np.eye(spec.q)
            np.testing.assert_allclose(sm.m_hat[t], m, atol=1e-4 * (1 + np.abs(m).max()))
            np.testing.assert_allclose(sm.P_hat[t], P, rtol=1e-4, atol=1e-4)


class TestDenseOracle:
    @pytest.mark.parametrize("seed", range(50))
    def test_smoother_matches_dense_conditioning(self, seed):
        rng = np.random.default_rng(2000 + seed)
        q, p, T = 2, 3, 5
        spec = random_spec(rng, q, p)
        D = rng.normal(size=(T, p))
        sm = rts_smoother(spec, kalman_filter(spec, D))
        mean, cov = dense_joint_oracle(spec, D)
        for t in range(T):
            np.testing.assert_allclose(sm.m_hat[t], mean[t * q:(t + 1) * q], atol=1e-8)
            np.testing.assert_allclose(
                sm.P_hat[t], cov[t * q:(t + 1) * q, t * q:(t + 1) * q], atol=1e-8
            )
        for t in range(T - 1):
            # Cov(U_{t+1}, U_t) block of the dense joint posterior
            np.testing.assert_allclose(
                sm.P_lag[t], cov[(t + 1) * q:(t + 2) * q, t * q:(t + 1) * q], atol=1e-8
            )

    def test_single_step_bayes_update(self):
        rng = np.random.default_rng(11)
        spec = random_spec(rng)
        D = rng.normal(size=(1, spec.p))
        sm = rts_smoother(spec, kalman_filter(spec, D))
        mean, cov = dense_joint_oracle(spec, D)
        np.testing.assert_allclose(sm.m_hat[0], mean, atol=1e-10)
        np.testing.assert_allclose(sm.P_hat[0], cov, atol=1e-10)

    def test_loglik_matches_joint_density(self):
        rng = np.random.default_rng(12)
        q, p, T = 2, 3, 5
        spec = random_spec(rng, q, p)
        D = rng.normal(size=(T, p))
        filt = kalman_filter(spec, D)
        # marginal density of stacked observations, assembled directly
        means = [spec.m0]
        covs = [spec.P0]
        for _ in range(1, T):
            means.append(spec.G @ means[-1])
            covs.append(spec.G @ covs[-1] @ spec.G.T + np.eye(q))
        Sigma = np.zeros((T * q, T * q))
        for t in range(T):
            Sigma[t * q:(t + 1) * q, t * q:(t + 1) * q] = covs[t]
            block = covs[t]
            for s in range(t + 1, T):
                block = spec.G @ block
                Sigma[s * q:(s + 1) * q, t * q:(t + 1) * q] = block
                Sigma[t * q:(t + 1) * q, s * q:(s + 1) * q] = block.T
        A = np.kron(np.eye(T), spec.H)
        S = A @ Sigma @ A.T + np.kron(np.eye(T), spec.R)
        ref = multivariate_normal.logpdf(D.reshape(-1), mean=A @ np.concatenate(means), cov=S)
        assert filt.loglik == pytest.approx(ref, abs=1e-8)

    def test_second_moment_identities(self):
        rng = np.random.default_rng(13)
        spec = random_spec(rng)
        D = rng.normal(size=(5, spec.p))
        sm = rts_smoother(spec, kalman_filter(spec, D))
        np.testing.assert_allclose(
            sm.Q_hat, sm.P_hat + sm.m_hat[:, :, None] * sm.m_hat[:, None, :], atol=1e-14
        )
        np.testing.assert_allclose(
            sm.Q_lag, sm.P_lag + sm.m_hat[1:, :, None] * sm.m_hat[:-1, None, :], atol=1e-14
        )

    def test_covariances_symmetric(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            spec = random_spec(rng)
            D = rng.normal(size=(6, spec.p))
            filt = kalman_filter(spec, D)
            sm = rts_smoother(spec, filt)
            for arr in (filt.P_pred, filt.P_filt, sm.P_hat):
                np.testing.assert_array_equal(arr, np.swapaxes(arr, 1, 2))


class TestErrors:
    def test_validation(self):
        with pytest.raises(ValueError, match="diagonal"):
            LgssmSpec(G=np.eye(2), H=np.eye(2), R=np.array([[1.0, 0.1], [0.1, 1.0]]),
                      m0=np.zeros(2), P0=np.eye(2))
        with pytest.raises(ValueError, match="positive"):
            LgssmSpec(G=np.eye(2), H=np.eye(2), R=np.diag([1.0, 0.0]),
                      m0=np.zeros(2), P0=np.eye(2))
        with pytest.raises(ValueError, match="symmetric"):
            LgssmSpec(G=np.eye(2), H=np.eye(2), R=np.eye(2),
                      m0=np.zeros(2), P0=np.array([[1.0, 0.3], [0.0, 1.0]]))

    def test_singular_innovation_reported(self):
        spec = LgssmSpec(G=np.eye(1), H=np.ones((1, 1)), R=np.eye(1),
                         m0=np.zeros(1), P0=np.eye(1))
        spec.H = np.zeros((1, 1))
        spec.R = np.zeros((1, 1))  # degrade after validation to force S = 0
        with pytest.raises(NumericalError, match="innovation"):
            kalman_filter(spec, np.zeros((2, 1)))

    def test_dense_oracle_size_guard(self):
        rng = np.random.default_rng(15)
        spec = random_spec(rng)
        with pytest.raises(ValueError, match="200"):
            dense_joint_oracle(spec, rng.normal(size=(101, spec.p)))


def test_smoother_pass_counter():
    rng = np.random.default_rng(16)
    spec = random_spec(rng)
    D = rng.normal(size=(3, spec.p))
    reset_smoother_pass_count()
    rts_smoother(spec, kalman_filter(spec, D))
    rts_smoother(spec, kalman_filter(spec, D))
    assert smoother_pass_count() == 2
