"""Brute-force reference computations used by the test suite and `avem validate`.

These deliberately avoid the recursive algorithms they are used to check:
hidden-chain quantities come from full path enumeration, and the tilted
random-effect density is integrated on a dense grid.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp

from .hmm import ChainParams


def enumerate_chain_posteriors(
    log_e: np.ndarray, chain: ChainParams
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Posterior quantities by summing over all K^T state paths.

    Returns (zeta, xi, log_marginal, entropy).  Intended for K <= 4, T <= 8.
    """
    log_e = np.asarray(log_e, dtype=float)
    T, K = log_e.shape
    if K**T > 100_000:
        raise ValueError(f"path enumeration over K^T = {K**T} states refused")
    paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=int)  # (P, T)
    with np.errstate(divide="ignore"):
        log_pi = np.log(chain.pi)
        log_Gamma = np.log(chain.Gamma)
    logp = log_pi[paths[:, 0]] + log_e[np.arange(T), paths].sum(axis=1)
    for t in range(1, T):
        logp = logp + log_Gamma[paths[:, t - 1], paths[:, t]]
    log_marg = float(logsumexp(logp))
    w = np.exp(logp - log_marg)  # (P,)
    zeta = np.zeros((T, K))
    for t in range(T):
        for k in range(K):
            zeta[t, k] = w[paths[:, t] == k].sum()
    xi = np.zeros((max(T - 1, 0), K, K))
    for t in range(T - 1):
        for k in range(K):
            for l in range(K):
                xi[t, k, l] = w[(paths[:, t] == k) & (paths[:, t + 1] == l)].sum()
    pos = w > 0
    entropy = float(-(w[pos] * np.log(w[pos])).sum())
    return zeta, xi, log_marg, entropy


def grid_tilted_moments(
    log_tilted, lo: float, hi: float, n_points: int = 20001
) -> tuple[float, float]:
    """Mean and variance of a 1-d density proportional to exp(log_tilted(f)).

    log_tilted must accept a vector of grid points.  Trapezoid integration on
    [lo, hi]; the caller picks bounds wide enough to capture the mass.
    """
    f = np.linspace(lo, hi, n_points)
    lt = log_tilted(f)
    lt = lt - lt.max()
    w = np.exp(lt)
    z = np.trapezoid(w, f)
    mean = np.trapezoid(w * f, f) / z
    var = np.trapezoid(w * (f - mean) ** 2, f) / z
    return float(mean), float(var)
