"""Brute-force oracle suites behind the `validate` CLI command.

Each suite rebuilds the quantity under test from first principles (path
enumeration, dense Gaussian conditioning, grid integration) on a batch of
random instances and reports the worst deviation.  The acceptance tests call
these directly, so the CLI and the test suite share one implementation.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
from scipy.special import logsumexp

from .emissions import GaussianEmission
from .hmm import ChainParams, backward_pass, forward_pass, state_posteriors
from .kalman import LgssmSpec, dense_joint_oracle, kalman_filter, rts_smoother
from .mhmm import MhmmParams, e_step_local, update_q_closed_form, update_q_laplace

SUITES = ("oracle-hmm", "oracle-kalman", "oracle-estep")


def _enumerated_posteriors(chain: ChainParams, log_e: np.ndarray):
    """Smoothed marginals by summing over every state path."""
    T, K = log_e.shape
    with np.errstate(divide="ignore"):
        log_pi = np.log(chain.pi)
        log_G = np.log(chain.Gamma)
    paths = list(itertools.product(range(K), repeat=T))
    log_w = np.empty(len(paths))
    for idx, path in enumerate(paths):
        w = log_pi[path[0]] + log_e[0, path[0]]
        for t in range(1, T):
            w += log_G[path[t - 1], path[t]] + log_e[t, path[t]]
        log_w[idx] = w
    log_Z = float(logsumexp(log_w))
    w = np.exp(log_w - log_Z)
    zeta = np.zeros((T, K))
    xi = np.zeros((T - 1, K, K))
    for weight, path in zip(w, paths):
        for t, k in enumerate(path):
            zeta[t, k] += weight
        for t in range(T - 1):
            xi[t, path[t], path[t + 1]] += weight
    return zeta, xi, log_Z


def suite_oracle_hmm(n_cases: int = 100, seed: int = 0) -> dict:
    """Forward-backward vs exhaustive path enumeration (K <= 3, T <= 6)."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_cases):
        K = int(rng.integers(2, 4))
        T = int(rng.integers(2, 7))
        chain = ChainParams(pi=rng.dirichlet(np.ones(K)), Gamma=rng.dirichlet(np.ones(K), size=K))
        log_e = rng.normal(scale=1.5, size=(T, K))
        post = state_posteriors(forward_pass(log_e, chain), backward_pass(log_e, chain), chain, log_e)
        zeta_o, xi_o, log_Z = _enumerated_posteriors(chain, log_e)
        worst = max(worst,
                    float(np.max(np.abs(post.zeta - zeta_o))),
                    float(np.max(np.abs(post.xi - xi_o))),
                    abs(post.log_marginal - log_Z))
    return _result("oracle-hmm", n_cases, worst, 1e-10, start)


def suite_oracle_kalman(n_cases: int = 50, seed: int = 0) -> dict:
    """Smoother moments vs dense joint-Gaussian conditioning (q=2, p=3, T=5)."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    q, p, T = 2, 3, 5
    worst = 0.0
    for _ in range(n_cases):
        A = rng.normal(size=(q, q))
        spec = LgssmSpec(G=0.5 * rng.normal(size=(q, q)), H=rng.normal(size=(p, q)),
                         R=np.diag(rng.uniform(0.3, 1.2, p)), m0=rng.normal(size=q),
                         P0=A @ A.T + 0.5 * np.eye(q))
        D = rng.normal(size=(T, p))
        mom = rts_smoother(spec, kalman_filter(spec, D))
        mean, cov = dense_joint_oracle(spec, D)
        mean = mean.reshape(T, q)
        worst = max(worst, float(np.max(np.abs(mom.m_hat - mean))))
        for t in range(T):
            block = cov[t * q:(t + 1) * q, t * q:(t + 1) * q]
            worst = max(worst, float(np.max(np.abs(mom.P_hat[t] - block))))
        for s in range(T - 1):
            block = cov[(s + 1) * q:(s + 2) * q, s * q:(s + 1) * q]
            worst = max(worst, float(np.max(np.abs(mom.P_lag[s] - block))))
    return _result("oracle-kalman", n_cases, worst, 1e-8, start)


def suite_oracle_estep(n_cases: int = 25, seed: int = 0) -> dict:
    """Closed-form Gaussian q update vs dense-grid integration of the tilted
    objective (d=1), and Laplace vs closed form at double precision."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    K = 2
    worst = 0.0
    for _ in range(n_cases):
        G = np.full((K, K), 0.15)
        np.fill_diagonal(G, 0.85)
        params = MhmmParams(
            chain=ChainParams(pi=np.full(K, 1.0 / K), Gamma=G),
            emission=GaussianEmission(mu=rng.normal(size=(K, 1)), sigma2=rng.uniform(0.4, 2.0, K)),
            Sigma=np.array([[rng.uniform(0.3, 2.0)]]),
        )
        D = rng.normal(size=(12, 1))
        post = e_step_local(params, D, np.zeros(1))
        q_cf = update_q_closed_form(params, D, post)
        sd = float(np.sqrt(q_cf.Omega[0, 0]))
        grid = np.linspace(q_cf.nu[0] - 12 * sd, q_cf.nu[0] + 12 * sd, 20001)
        em = params.emission
        log_mats = em.log_matrix_batch(grid[:, None], np.broadcast_to(D, (grid.size,) + D.shape))
        log_t = -0.5 * grid**2 / params.Sigma[0, 0] + np.einsum("gtk,tk->g", log_mats, post.zeta)
        w = np.exp(log_t - log_t.max())
        w /= w.sum()
        mean = float(w @ grid)
        var = float(w @ (grid - mean) ** 2)
        worst = max(worst, abs(q_cf.nu[0] - mean), abs(q_cf.Omega[0, 0] - var))
        q_la = update_q_laplace(params, D, post, rng.normal(size=1))
        lap_dev = max(float(np.max(np.abs(q_la.nu - q_cf.nu))),
                      float(np.max(np.abs(q_la.Omega - q_cf.Omega))))
        if lap_dev > 1e-12:
            worst = max(worst, 1.0)  # force failure: laplace must match at double precision
    return _result("oracle-estep", n_cases, worst, 1e-6, start)


def _result(suite: str, n_cases: int, worst: float, tol: float, start: float) -> dict:
    return {
        "suite": suite,
        "n_cases": n_cases,
        "max_deviation": float(worst),
        "tolerance": tol,
        "passed": bool(worst < tol),
        "seconds": time.perf_counter() - start,
    }


def run_suite(name: str, seed: int = 0) -> list[dict]:
    """Run one named suite, or all of them."""
    table = {
        "oracle-hmm": suite_oracle_hmm,
        "oracle-kalman": suite_oracle_kalman,
        "oracle-estep": suite_oracle_estep,
    }
    if name == "all":
        return [fn(seed=seed) for fn in table.values()]
    if name not in table:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    return [table[name](seed=seed)]
