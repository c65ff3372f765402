"""Kalman filter, RTS smoother, and a dense joint-Gaussian cross-check.

State noise is fixed to the identity: U_t | U_{t-1} ~ N(G U_{t-1}, I_q).
Covariance recursions symmetrize after every update, and innovation systems
are solved through Cholesky factors rather than explicit inverses.  A
counter tracks smoother passes for the per-iteration cost claims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .base import NumericalError, symmetrize

_filter_pass_count = 0
_smoother_pass_count = 0


def smoother_pass_count() -> int:
    return _smoother_pass_count


def reset_smoother_pass_count() -> None:
    global _filter_pass_count, _smoother_pass_count
    _filter_pass_count = 0
    _smoother_pass_count = 0


@dataclass
class LgssmSpec:
    """One subject's linear-Gaussian state-space model (state noise = I_q)."""

    G: np.ndarray   # (q, q) transition
    H: np.ndarray   # (p, q) loading
    R: np.ndarray   # (p, p) diagonal observation covariance, positive diagonal
    m0: np.ndarray  # (q,) initial mean
    P0: np.ndarray  # (q, q) initial covariance, SPD

    def __post_init__(self) -> None:
        self.G = np.asarray(self.G, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.m0 = np.asarray(self.m0, dtype=float)
        self.P0 = np.asarray(self.P0, dtype=float)
        q = self.G.shape[0]
        p = self.H.shape[0]
        if self.G.shape != (q, q) or self.H.shape != (p, q):
            raise ValueError(f"shape mismatch: G {self.G.shape}, H {self.H.shape}")
        if self.R.shape != (p, p) or self.m0.shape != (q,) or self.P0.shape != (q, q):
            raise ValueError("shape mismatch in R, m0, or P0")
        if np.any(self.R[~np.eye(p, dtype=bool)] != 0.0):
            raise ValueError("R must be diagonal")
        if np.any(np.diag(self.R) <= 0.0):
            raise ValueError("R diagonal entries must be positive")
        if np.max(np.abs(self.P0 - self.P0.T)) > 1e-10:
            raise ValueError("P0 must be symmetric")

    @property
    def q(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.H.shape[0]


@dataclass
class FilterResult:
    m_pred: np.ndarray   # (T, q) one-step predicted means (row 0 is the prior)
    P_pred: np.ndarray   # (T, q, q)
    m_filt: np.ndarray   # (T, q)
    P_filt: np.ndarray   # (T, q, q)
    gains: np.ndarray    # (T, q, p)
    loglik: float        # log p(D | spec) from the innovations


@dataclass
class SmootherMoments:
    """Smoothed first/second moments; lag arrays are indexed so that
    P_lag[s] = Cov(U_{s+1}, U_s | D) and Q_lag[s] = E[U_{s+1} U_s^T | D]."""

    m_hat: np.ndarray    # (T, q)
    P_hat: np.ndarray    # (T, q, q)
    P_lag: np.ndarray    # (T-1, q, q)
    Q_hat: np.ndarray    # (T, q, q)   E[U_t U_t^T]
    Q_lag: np.ndarray    # (T-1, q, q)
    loglik: float


def kalman_filter(spec: LgssmSpec, D: np.ndarray) -> FilterResult:
    """Forward filtering pass over D with shape (T, p)."""
    global _filter_pass_count
    D = np.asarray(D, dtype=float)
    q, p = spec.q, spec.p
    if D.ndim != 2 or D.shape[1] != p or D.shape[0] < 1:
        raise ValueError(f"data has shape {D.shape}, expected (T, {p})")
    if not np.all(np.isfinite(D)):
        raise ValueError("data contains non-finite entries")
    _filter_pass_count += 1
    T = D.shape[0]
    Iq = np.eye(q)
    m_pred = np.empty((T, q))
    P_pred = np.empty((T, q, q))
    m_filt = np.empty((T, q))
    P_filt = np.empty((T, q, q))
    gains = np.empty((T, q, p))
    loglik = 0.0
    m, P = spec.m0, spec.P0
    for t in range(T):
        if t > 0:
            m = spec.G @ m_filt[t - 1]
            P = symmetrize(spec.G @ P_filt[t - 1] @ spec.G.T + Iq)
        m_pred[t], P_pred[t] = m, P
        S = symmetrize(spec.H @ P @ spec.H.T + spec.R)
        try:
            S_cf = cho_factor(S, lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"singular innovation covariance at t={t}") from exc
        innov = D[t] - spec.H @ m
        # K = P H^T S^{-1}, computed by solving S K^T = H P
        K = cho_solve(S_cf, spec.H @ P).T
        gains[t] = K
        m_filt[t] = m + K @ innov
        P_filt[t] = symmetrize((Iq - K @ spec.H) @ P)
        logdet_S = 2.0 * np.log(np.diag(S_cf[0])).sum()
        loglik -= 0.5 * (p * np.log(2.0 * np.pi) + logdet_S + innov @ cho_solve(S_cf, innov))
    return FilterResult(m_pred, P_pred, m_filt, P_filt, gains, float(loglik))


def rts_smoother(spec: LgssmSpec, filt: FilterResult) -> SmootherMoments:
    """Backward smoothing pass; also assembles lag-one cross moments."""
    global _smoother_pass_count
    _smoother_pass_count += 1
    T, q = filt.m_filt.shape
    m_hat = np.empty((T, q))
    P_hat = np.empty((T, q, q))
    P_lag = np.empty((max(T - 1, 0), q, q))
    m_hat[-1] = filt.m_filt[-1]
    P_hat[-1] = filt.P_filt[-1]
    for t in range(T - 2, -1, -1):
        # J_t = P_filt[t] G^T P_pred[t+1]^{-1}
        try:
            cf = cho_factor(filt.P_pred[t + 1], lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"singular predicted covariance at t={t + 1}") from exc
        J = cho_solve(cf, spec.G @ filt.P_filt[t]).T
        m_hat[t] = filt.m_filt[t] + J @ (m_hat[t + 1] - filt.m_pred[t + 1])
        P_hat[t] = symmetrize(filt.P_filt[t] + J @ (P_hat[t + 1] - filt.P_pred[t + 1]) @ J.T)
        P_lag[t] = P_hat[t + 1] @ J.T  # Cov(U_{t+1}, U_t)
    Q_hat = P_hat + m_hat[:, :, None] * m_hat[:, None, :]
    Q_lag = P_lag + m_hat[1:, :, None] * m_hat[:-1, None, :]
    return SmootherMoments(m_hat, P_hat, P_lag, Q_hat, Q_lag, filt.loglik)


def dense_joint_oracle(spec: LgssmSpec, D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean/covariance of the stacked state by direct Gaussian conditioning.

    Builds the (Tq)-dimensional joint prior of U_{1:T} and conditions on the
    stacked observations in one linear solve.  Refuses T*q > 200.  Returns
    (mean, cov) with shapes (Tq,) and (Tq, Tq); states stack time-major.
    """
    D = np.asarray(D, dtype=float)
    T = D.shape[0]
    q, p = spec.q, spec.p
    if T * q > 200:
        raise ValueError(f"dense oracle refused: T*q = {T * q} exceeds 200")
    if D.shape != (T, p):
        raise ValueError(f"data has shape {D.shape}, expected (T, {p})")
    # Prior marginals by propagating the dynamics.
    means = [spec.m0]
    covs = [spec.P0]
    for _ in range(1, T):
        means.append(spec.G @ means[-1])
        covs.append(symmetrize(spec.G @ covs[-1] @ spec.G.T + np.eye(q)))
    mu = np.concatenate(means)
    Sigma = np.zeros((T * q, T * q))
    for t in range(T):
        Sigma[t * q:(t + 1) * q, t * q:(t + 1) * q] = covs[t]
        block = covs[t]
        for s in range(t + 1, T):
            block = spec.G @ block  # Cov(U_s, U_t) = G^{s-t} Var(U_t)
            Sigma[s * q:(s + 1) * q, t * q:(t + 1) * q] = block
            Sigma[t * q:(t + 1) * q, s * q:(s + 1) * q] = block.T
    A = np.kron(np.eye(T), spec.H)                  # (Tp, Tq)
    R_full = np.kron(np.eye(T), spec.R)
    S_dd = symmetrize(A @ Sigma @ A.T + R_full)
    S_ud = Sigma @ A.T
    resid = D.reshape(-1) - A @ mu
    try:
        cf = cho_factor(S_dd, lower=True)
    except LinAlgError as exc:
        raise NumericalError("singular stacked observation covariance") from exc
    mean = mu + S_ud @ cho_solve(cf, resid)
    cov = symmetrize(Sigma - S_ud @ cho_solve(cf, S_ud.T))
    return mean, cov
