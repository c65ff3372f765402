"""Log-space forward-backward recursions for a single hidden Markov chain.

All recursions run in the log domain with shift-exp reductions; there is no
rescaling-constant variant.  The per-sequence functions are thin wrappers over
batched kernels that process a stack of sequences with one Python loop over
time, which is what the fitting loops call.

A module-level counter tracks how many logical forward passes have run so that
the per-iteration pass-count claims of the fitters can be checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .base import NumericalError

_TINY = 1e-300  # clamp for probabilities entering log/division

_forward_pass_count = 0


def forward_pass_count() -> int:
    """Number of logical forward passes run since the last reset."""
    return _forward_pass_count


def reset_forward_pass_count() -> None:
    global _forward_pass_count
    _forward_pass_count = 0


@dataclass
class ChainParams:
    """Initial distribution and transition matrix of the hidden chain."""

    pi: np.ndarray     # (K,)
    Gamma: np.ndarray  # (K, K), rows sum to 1

    def __post_init__(self) -> None:
        self.pi = np.asarray(self.pi, dtype=float)
        self.Gamma = np.asarray(self.Gamma, dtype=float)
        K = self.pi.shape[0]
        if self.pi.ndim != 1 or self.Gamma.shape != (K, K):
            raise ValueError(f"chain shape mismatch: pi {self.pi.shape}, Gamma {self.Gamma.shape}")
        if np.any(self.pi < 0) or np.any(self.Gamma < 0):
            raise ValueError("chain probabilities must be nonnegative")
        if abs(self.pi.sum() - 1.0) > 1e-12:
            raise ValueError(f"pi sums to {self.pi.sum()!r}, expected 1 within 1e-12")
        rows = self.Gamma.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-12):
            raise ValueError(f"Gamma row sums {rows!r} must equal 1 within 1e-12")

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]


@dataclass
class StatePosterior:
    """Smoothed state marginals and pairwise marginals for one sequence."""

    zeta: np.ndarray          # (T, K) marginal state probabilities
    xi: np.ndarray            # (T-1, K, K) pairwise (t, t+1) probabilities
    log_marginal: float       # log p(D | f, theta) for the sequence


def _check_log_e(log_e: np.ndarray, K: int) -> np.ndarray:
    log_e = np.asarray(log_e, dtype=float)
    if log_e.ndim != 2 or log_e.shape[1] != K or log_e.shape[0] < 1:
        raise ValueError(f"emission log matrix has shape {log_e.shape}, expected (T, {K})")
    if not np.all(np.isfinite(log_e)):
        raise ValueError("emission log matrix contains non-finite entries")
    return log_e


def _log_matvec(log_v: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Stable log(exp(log_v) @ mat) along the last axis; mat has nonnegative entries."""
    m = np.max(log_v, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(log_v - shift) @ mat)
    return out + shift


def forward_batch(log_e: np.ndarray, chain: ChainParams) -> np.ndarray:
    """Forward recursion over a (B, T, K) stack of emission log matrices."""
    global _forward_pass_count
    B, T, K = log_e.shape
    _forward_pass_count += B
    with np.errstate(divide="ignore"):
        log_pi = np.log(chain.pi)
    log_alpha = np.empty((B, T, K))
    log_alpha[:, 0] = log_pi + log_e[:, 0]
    for t in range(1, T):
        log_alpha[:, t] = log_e[:, t] + _log_matvec(log_alpha[:, t - 1], chain.Gamma)
    return log_alpha


def backward_batch(log_e: np.ndarray, chain: ChainParams) -> np.ndarray:
    """Backward recursion over a (B, T, K) stack; terminal row is zero."""
    B, T, K = log_e.shape
    log_beta = np.zeros((B, T, K))
    for t in range(T - 2, -1, -1):
        log_beta[:, t] = _log_matvec(log_e[:, t + 1] + log_beta[:, t + 1], chain.Gamma.T)
    return log_beta


def posteriors_batch(
    log_e: np.ndarray, chain: ChainParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One forward-backward sweep per sequence in the stack.

    Returns (zeta, xi, log_marginal) with shapes (B, T, K), (B, T-1, K, K), (B,).
    """
    log_alpha = forward_batch(log_e, chain)
    log_beta = backward_batch(log_e, chain)
    log_marg = logsumexp(log_alpha[:, -1], axis=-1)
    if np.any(~np.isfinite(log_marg)):
        bad = int(np.flatnonzero(~np.isfinite(log_marg))[0])
        raise NumericalError(
            f"degenerate likelihood: all forward mass vanished for sequence {bad}"
        )
    zeta = np.exp(log_alpha + log_beta - log_marg[:, None, None])
    with np.errstate(divide="ignore"):
        log_Gamma = np.log(chain.Gamma)
    # xi[b, t, k, l] pairs times (t, t+1)
    xi = np.exp(
        log_alpha[:, :-1, :, None]
        + log_Gamma[None, None, :, :]
        + (log_e + log_beta)[:, 1:, None, :]
        - log_marg[:, None, None, None]
    )
    return zeta, xi, log_marg


def entropy_batch(zeta: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Entropy of each sequence's smoothed chain posterior, (B,).

    Uses the chain rule H(U_1) + sum_t H(U_{t+1} | U_t); 0 log 0 terms are
    dropped and marginals are clamped at 1e-300 before the xi/zeta ratio.
    """
    z1 = zeta[:, 0, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        h1 = -np.where(z1 > 0.0, z1 * np.log(np.clip(z1, _TINY, None)), 0.0).sum(axis=-1)
        denom = np.clip(zeta[:, :-1, :, None], _TINY, None)
        pair = np.where(
            xi > 0.0, xi * (np.log(np.clip(xi, _TINY, None)) - np.log(denom)), 0.0
        )
    return h1 - pair.sum(axis=(1, 2, 3))


def forward_pass(log_e: np.ndarray, chain: ChainParams) -> np.ndarray:
    """Log forward variables, shape (T, K).

    Row t holds log a_{kt} where a_{k1} = pi_k e_{k1} and
    a_{kt} = e_{kt} * sum_l a_{l,t-1} Gamma_{lk}.
    """
    log_e = _check_log_e(log_e, chain.n_states)
    return forward_batch(log_e[None], chain)[0]


def backward_pass(log_e: np.ndarray, chain: ChainParams) -> np.ndarray:
    """Log backward variables, shape (T, K); b_{kT} = 1."""
    log_e = _check_log_e(log_e, chain.n_states)
    return backward_batch(log_e[None], chain)[0]


def conditional_log_marginal(log_alpha: np.ndarray) -> float:
    """log p(D | f, theta) = logsumexp of the terminal forward row."""
    out = float(logsumexp(log_alpha[-1]))
    if not np.isfinite(out):
        raise NumericalError("degenerate likelihood: all forward mass vanished")
    return out


def state_posteriors(
    log_alpha: np.ndarray,
    log_beta: np.ndarray,
    chain: ChainParams,
    log_e: np.ndarray,
) -> StatePosterior:
    """Combine forward/backward variables into smoothed marginals.

    zeta_{kt} = a_{kt} b_{kt} / sum_j a_{jT} and
    xi_{klt} = a_{kt} Gamma_{kl} e_{l,t+1} b_{l,t+1} / sum_j a_{jT}.
    """
    log_e = _check_log_e(log_e, chain.n_states)
    log_marg = conditional_log_marginal(log_alpha)
    zeta = np.exp(log_alpha + log_beta - log_marg)
    with np.errstate(divide="ignore"):
        log_Gamma = np.log(chain.Gamma)
    xi = np.exp(
        log_alpha[:-1, :, None]
        + log_Gamma[None, :, :]
        + (log_e + log_beta)[1:, None, :]
        - log_marg
    )
    return StatePosterior(zeta=zeta, xi=xi, log_marginal=log_marg)


def posterior_entropy(post: StatePosterior) -> float:
    """Entropy of the smoothed chain posterior for one sequence."""
    return float(entropy_batch(post.zeta[None], post.xi[None])[0])
