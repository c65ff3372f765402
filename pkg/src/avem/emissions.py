"""Emission models: per-state observation densities indexed by a random effect.

Each model exposes pointwise log densities plus gradient/Hessian in the random
effect f, and vectorized builders for the (T, K) emission log matrix that the
chain recursions consume.  `history` is accepted everywhere so conditionally
autoregressive emissions fit the same interface, but the bundled models ignore
it.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class EmissionModel(abc.ABC):
    """Contract shared by the per-state emission families."""

    #: True when the Gaussian-identity structure admits the closed-form q update.
    has_closed_form_gaussian: bool = False

    @property
    @abc.abstractmethod
    def n_states(self) -> int: ...

    @property
    @abc.abstractmethod
    def effect_dim(self) -> int: ...

    @abc.abstractmethod
    def log_e(self, k: int, t: int, f: np.ndarray, data_row: np.ndarray, history=None) -> float:
        """log e_{kt}(theta, f) for one observation row."""

    @abc.abstractmethod
    def grad_f(self, k: int, t: int, f: np.ndarray, data_row: np.ndarray, history=None) -> np.ndarray:
        """Gradient of log_e in f, shape (d,)."""

    @abc.abstractmethod
    def hess_f(self, k: int, t: int, f: np.ndarray, data_row: np.ndarray, history=None) -> np.ndarray:
        """Hessian of log_e in f, shape (d, d)."""

    def log_matrix(self, f: np.ndarray, data: np.ndarray) -> np.ndarray:
        """Emission log matrix (T, K) for one subject at effect value f."""
        T = data.shape[0]
        K = self.n_states
        out = np.empty((T, K))
        for t in range(T):
            for k in range(K):
                out[t, k] = self.log_e(k, t, f, data[t])
        return out

    def log_matrix_batch(self, F: np.ndarray, data: np.ndarray) -> np.ndarray:
        """Stacked log matrices (B, T, K); data is (B, T, p) and F is (B, d)."""
        return np.stack([self.log_matrix(F[b], data[b]) for b in range(data.shape[0])])


@dataclass
class GaussianEmission(EmissionModel):
    """D_t | U_t=k, f ~ N(mu_k + f, sigma2_k I_p); the effect dimension equals p."""

    mu: np.ndarray      # (K, p)
    sigma2: np.ndarray  # (K,)

    has_closed_form_gaussian = True

    def __post_init__(self) -> None:
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        if self.sigma2.shape != (self.mu.shape[0],):
            raise ValueError("sigma2 must have one entry per state")
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 entries must be positive")

    @property
    def n_states(self) -> int:
        return self.mu.shape[0]

    @property
    def effect_dim(self) -> int:
        return self.mu.shape[1]

    def log_e(self, k, t, f, data_row, history=None) -> float:
        p = self.effect_dim
        resid = data_row - f - self.mu[k]
        return float(-0.5 * (p * (LOG_2PI + np.log(self.sigma2[k])) + resid @ resid / self.sigma2[k]))

    def grad_f(self, k, t, f, data_row, history=None) -> np.ndarray:
        return (data_row - f - self.mu[k]) / self.sigma2[k]

    def hess_f(self, k, t, f, data_row, history=None) -> np.ndarray:
        return -np.eye(self.effect_dim) / self.sigma2[k]

    def log_matrix(self, f, data) -> np.ndarray:
        X = data - f  # (T, p)
        p = self.effect_dim
        sq = np.stack([((X - self.mu[k]) ** 2).sum(axis=1) for k in range(self.n_states)], axis=1)
        return -0.5 * (p * (LOG_2PI + np.log(self.sigma2))[None, :] + sq / self.sigma2[None, :])

    def log_matrix_batch(self, F, data) -> np.ndarray:
        X = data - F[:, None, :]  # (B, T, p)
        p = self.effect_dim
        sq = np.stack(
            [((X - self.mu[k]) ** 2).sum(axis=2) for k in range(self.n_states)], axis=2
        )  # (B, T, K)
        return -0.5 * (p * (LOG_2PI + np.log(self.sigma2))[None, None, :] + sq / self.sigma2[None, None, :])


@dataclass
class BernoulliEmission(EmissionModel):
    """Binary D_t with logit P(D_t=1 | U_t=k, f) = beta_k + f; scalar effect."""

    beta: np.ndarray  # (K,)

    def __post_init__(self) -> None:
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.ndim != 1:
            raise ValueError("beta must be a vector with one entry per state")

    @property
    def n_states(self) -> int:
        return self.beta.shape[0]

    @property
    def effect_dim(self) -> int:
        return 1

    def _eta(self, k: int, f: np.ndarray) -> float:
        return float(self.beta[k] + np.asarray(f).reshape(-1)[0])

    def log_e(self, k, t, f, data_row, history=None) -> float:
        eta = self._eta(k, f)
        y = float(np.asarray(data_row).reshape(-1)[0])
        return y * eta - float(softplus(np.array(eta)))

    def grad_f(self, k, t, f, data_row, history=None) -> np.ndarray:
        eta = self._eta(k, f)
        y = float(np.asarray(data_row).reshape(-1)[0])
        return np.array([y - float(sigmoid(np.array([eta]))[0])])

    def hess_f(self, k, t, f, data_row, history=None) -> np.ndarray:
        eta = self._eta(k, f)
        s = float(sigmoid(np.array([eta]))[0])
        return np.array([[-s * (1.0 - s)]])

    def log_matrix(self, f, data) -> np.ndarray:
        y = data[:, 0]  # (T,)
        eta = self.beta + float(np.asarray(f).reshape(-1)[0])  # (K,)
        return y[:, None] * eta[None, :] - softplus(eta)[None, :]

    def log_matrix_batch(self, F, data) -> np.ndarray:
        y = data[:, :, 0]  # (B, T)
        eta = self.beta[None, :] + F[:, :1]  # (B, K)
        return y[:, :, None] * eta[:, None, :] - softplus(eta)[:, None, :]
