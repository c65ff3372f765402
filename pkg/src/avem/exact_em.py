"""Exact-EM baselines for mixed HMMs with isotropic effects (Sigma = tau2 I).

Both baselines marginalize the random effect over a node set: quadrature EM
(QEM) uses a tensor Gauss-Hermite grid rescaled by the current tau2, Monte
Carlo EM (MCEM) redraws nodes from N(0, tau2 I) each iteration.  Every
iteration runs one forward-backward pass per (subject, node) pair, so the cost
is n * J**d passes against AVEM's n.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .base import AvemConfig, FitReport, NumericalError, QFactor, rel_change, symmetrize
from .emissions import BernoulliEmission, EmissionModel, GaussianEmission, sigmoid
from .hmm import ChainParams, posteriors_batch
from .mhmm import MhmmParams, m_step_gamma, m_step_pi
from .quadrature import tensor_grid


@dataclass
class NodeSet:
    """Marginalization support: nodes (J, d) with prior log-weights (J,)."""

    nodes: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self) -> None:
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.log_weights.shape != (self.nodes.shape[0],):
            raise ValueError("log_weights must have one entry per node")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def gh_tensor_nodes(n_per_dim: int, d: int, tau2: float) -> NodeSet:
    """Tensor-product Gauss-Hermite nodes for N(0, tau2 I_d)."""
    nodes, weights = tensor_grid(n_per_dim, d)
    with np.errstate(divide="ignore"):
        return NodeSet(nodes=np.sqrt(tau2) * nodes, log_weights=np.log(weights))


def mc_nodes(rng: np.random.Generator, n_samples: int, d: int, tau2: float) -> NodeSet:
    """Monte Carlo node set: equal weights on fresh N(0, tau2 I_d) draws."""
    draws = rng.normal(0.0, np.sqrt(max(tau2, 0.0)), size=(n_samples, d))
    return NodeSet(nodes=draws, log_weights=np.full(n_samples, -np.log(n_samples)))


def posterior_weights(log_marg: np.ndarray, log_weights: np.ndarray):
    """Normalized node responsibilities and per-subject observed log-likelihood.

    log_marg has shape (n, J) with entries log p(D_i | f_j).
    """
    scored = log_marg + log_weights[None, :]
    total = logsumexp(scored, axis=1)
    if not np.all(np.isfinite(total)):
        raise NumericalError("all nodes have vanishing likelihood for some subject")
    return np.exp(scored - total[:, None]), total


def _isotropic_tau2(Sigma: np.ndarray) -> float:
    d = Sigma.shape[0]
    tau2 = float(Sigma[0, 0])
    if not np.allclose(Sigma, tau2 * np.eye(d), atol=1e-12):
        raise ValueError("exact-EM baselines require Sigma = tau2 * I")
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    return tau2


def _node_posteriors(params: MhmmParams, datasets, nodes: np.ndarray):
    """Chain posteriors and log-marginals for every (subject, node) pair.

    One batched forward-backward call per subject covering all J nodes.
    Returns (zetas, xis, log_marg) with per-subject arrays of shape
    (J, T_i, K), (J, T_i - 1, K, K) and a stacked (n, J) log-marginal.
    """
    em = params.emission
    J = nodes.shape[0]
    zetas, xis, logm = [], [], []
    for D in datasets:
        data_rep = np.broadcast_to(D, (J,) + D.shape)
        log_e = em.log_matrix_batch(nodes, data_rep)
        z, x, lm = posteriors_batch(log_e, params.chain)
        zetas.append(z)
        xis.append(x)
        logm.append(lm)
    return zetas, xis, np.stack(logm)


def _mixed_chain_stats(zetas, xis, W):
    """Node-averaged occupancy and transition statistics per subject."""
    zbar = [np.einsum("j,jtk->tk", W[i], z) for i, z in enumerate(zetas)]
    xbar = [np.einsum("j,jtkl->tkl", W[i], x) for i, x in enumerate(xis)]
    return zbar, xbar


def _gaussian_node_m_step(datasets, zetas, W, nodes, emission: GaussianEmission):
    K, p = emission.mu.shape
    num = np.zeros((K, p))
    den = np.zeros(K)
    X = [D[None] - nodes[:, None, :] for D in datasets]
    for i, z in enumerate(zetas):
        num += np.einsum("j,jtk,jtp->kp", W[i], z, X[i])
        den += np.einsum("j,jtk->k", W[i], z)
    mu = np.where(den[:, None] > 1e-12, num / np.maximum(den, 1e-12)[:, None], emission.mu)
    s_num = np.zeros(K)
    for i, z in enumerate(zetas):
        sq = ((X[i][:, :, None, :] - mu[None, None]) ** 2).sum(axis=-1)
        s_num += np.einsum("j,jtk->k", W[i], z * sq)
    sigma2 = np.where(den > 1e-12, s_num / np.maximum(p * den, 1e-12), emission.sigma2)
    return GaussianEmission(mu=mu, sigma2=np.maximum(sigma2, 1e-10))


def _bernoulli_node_m_step(datasets, zetas, W, nodes, emission: BernoulliEmission):
    K = emission.n_states
    J = nodes.shape[0]
    A = np.zeros((J, K))
    B = np.zeros((J, K))
    for i, z in enumerate(zetas):
        y = datasets[i][:, 0]
        A += W[i][:, None] * np.einsum("jtk,t->jk", z, y)
        B += W[i][:, None] * z.sum(axis=1)
    f = nodes[:, 0]
    beta = emission.beta.copy()
    for k in range(K):
        bk = beta[k]
        for _ in range(100):
            s = sigmoid(bk + f)
            grad = float(A[:, k].sum() - B[:, k] @ s)
            hess = -float(B[:, k] @ (s * (1.0 - s)))
            if abs(grad) < 1e-10 * max(1.0, abs(hess)):
                break
            bk -= float(np.clip(grad / hess, -4.0, 4.0))
            if abs(bk) > 30.0:
                bk = float(np.clip(bk, -30.0, 30.0))
                break
        beta[k] = bk
    return BernoulliEmission(beta=beta)


def _node_em_iteration(params: MhmmParams, datasets, node_set: NodeSet):
    """One EM sweep over the node-discretized marginal model."""
    zetas, xis, log_marg = _node_posteriors(params, datasets, node_set.nodes)
    W, per_subject_ll = posterior_weights(log_marg, node_set.log_weights)
    zbar, xbar = _mixed_chain_stats(zetas, xis, W)
    chain = ChainParams(pi=m_step_pi(zbar), Gamma=m_step_gamma(zbar, xbar))
    em = params.emission
    if isinstance(em, GaussianEmission):
        emission: EmissionModel = _gaussian_node_m_step(datasets, zetas, W, node_set.nodes, em)
    elif isinstance(em, BernoulliEmission):
        emission = _bernoulli_node_m_step(datasets, zetas, W, node_set.nodes, em)
    else:
        raise ValueError(f"no node M-step for {type(em).__name__}")
    d = node_set.nodes.shape[1]
    sq = (node_set.nodes**2).sum(axis=1)
    new_tau2 = float((W @ sq).mean() / d)
    f_hat = W @ node_set.nodes
    new_params = MhmmParams(chain=chain, emission=emission, Sigma=new_tau2 * np.eye(d))
    return new_params, float(per_subject_ll.sum()), W, f_hat


def _finish_report(params, W, node_set, f_hat, trace, start, extra):
    q_factors = []
    for i in range(W.shape[0]):
        dev = node_set.nodes - f_hat[i]
        Omega = symmetrize(np.einsum("j,jp,jq->pq", W[i], dev, dev))
        q_factors.append(QFactor(nu=f_hat[i].copy(), Omega=Omega + 1e-12 * np.eye(dev.shape[1])))
    return FitReport(
        params=params,
        q_factors=q_factors,
        anchors=node_set.nodes.copy(),
        elbo_trace=np.asarray(trace),
        n_iter=len(trace),
        wall_time_seconds=time.perf_counter() - start,
        f_hat=f_hat.copy(),
        extra=extra,
    )


def fit_qem(
    dataset,
    init: MhmmParams,
    config: AvemConfig | None = None,
    n_nodes: int | None = None,
    refresh_nodes: bool = True,
) -> FitReport:
    """EM with the random effect marginalized over a Gauss-Hermite tensor grid.

    The traced objective is the observed-data log-likelihood of the
    discretized model, sum_i log sum_j v_j p(D_i | f_j).  With
    refresh_nodes=True the grid is rescaled to the current tau2 estimate every
    iteration (the trace may then dip slightly); with False the grid from the
    initial tau2 is kept and the trace is a true EM objective.
    """
    config = config or AvemConfig()
    J = n_nodes or config.n_quad
    datasets = [np.asarray(D, dtype=float) for D in dataset]
    d = init.emission.effect_dim
    tau2 = _isotropic_tau2(init.Sigma)
    start = time.perf_counter()
    params = init
    node_set = gh_tensor_nodes(J, d, tau2)
    trace: list[float] = []
    converged = False
    W = None
    f_hat = None
    for it in range(config.max_iter):
        if refresh_nodes:
            node_set = gh_tensor_nodes(J, d, tau2)
        params, ll, W, f_hat = _node_em_iteration(params, datasets, node_set)
        tau2 = float(params.Sigma[0, 0])
        if not np.isfinite(ll):
            raise NumericalError(f"observed log-likelihood became non-finite at iteration {it + 1}")
        trace.append(ll)
        if it >= 1 and rel_change(trace[-2], trace[-1]) < config.rel_tol:
            converged = True
            break
    extra = {"converged": converged, "trace": "observed_loglik", "n_nodes": J**d,
             "refresh_nodes": refresh_nodes}
    return _finish_report(params, W, node_set, f_hat, trace, start, extra)


def fit_mcem(
    dataset,
    init: MhmmParams,
    config: AvemConfig | None = None,
    n_samples: int = 200,
) -> FitReport:
    """Monte Carlo EM: fresh N(0, tau2 I) nodes with equal weights each sweep.

    Draws are seeded from (config.seed, iteration), so runs are reproducible
    while nodes still change between iterations.
    """
    config = config or AvemConfig()
    datasets = [np.asarray(D, dtype=float) for D in dataset]
    d = init.emission.effect_dim
    tau2 = _isotropic_tau2(init.Sigma)
    start = time.perf_counter()
    params = init
    trace: list[float] = []
    converged = False
    node_set = None
    W = None
    f_hat = None
    for it in range(config.max_iter):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, it)))
        node_set = mc_nodes(rng, n_samples, d, tau2)
        params, ll, W, f_hat = _node_em_iteration(params, datasets, node_set)
        tau2 = float(params.Sigma[0, 0])
        if not np.isfinite(ll):
            raise NumericalError(f"observed log-likelihood became non-finite at iteration {it + 1}")
        trace.append(ll)
        if it >= 1 and rel_change(trace[-2], trace[-1]) < config.rel_tol:
            converged = True
            break
    extra = {"converged": converged, "trace": "observed_loglik", "n_samples": n_samples}
    return _finish_report(params, W, node_set, f_hat, trace, start, extra)
