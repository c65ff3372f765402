"""Anchored variational EM for hidden Markov models with subject random effects.

The variational family factorizes per subject into a Gaussian factor
q_i(f_i) = N(nu_i, Omega_i) and a chain factor fixed at the smoothed posterior
p(U_i | D_i, f0_i) evaluated at an anchor point f0_i.  Using the previous
variational mean as the anchor, each iteration needs exactly one
forward-backward pass per subject, followed by a closed-form (or Newton /
quadrature) update of q_i and closed-form parameter updates.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize

from .base import AvemConfig, DegeneracyWarning, FitReport, NumericalError, QFactor, rel_change, symmetrize
from .emissions import EmissionModel, GaussianEmission, BernoulliEmission, LOG_2PI, sigmoid
from .hmm import ChainParams, StatePosterior, entropy_batch, posteriors_batch
from .quadrature import gauss_hermite_standard, tensor_grid

_TINY = 1e-300


@dataclass
class MhmmParams:
    """Complete parameter block for a mixed hidden Markov model."""

    chain: ChainParams
    emission: EmissionModel
    Sigma: np.ndarray  # (d, d) random-effect covariance

    def __post_init__(self) -> None:
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        d = self.emission.effect_dim
        if self.Sigma.shape != (d, d):
            raise ValueError(f"Sigma has shape {self.Sigma.shape}, expected ({d}, {d})")
        if self.chain.n_states != self.emission.n_states:
            raise ValueError("chain and emission disagree on the number of states")
        if np.max(np.abs(self.Sigma - self.Sigma.T)) > 1e-10:
            raise ValueError("Sigma must be symmetric")


def _check_dataset(dataset, p: int) -> list[np.ndarray]:
    out = []
    for i, D in enumerate(dataset):
        D = np.asarray(D, dtype=float)
        if D.ndim != 2 or D.shape[1] != p or D.shape[0] < 1:
            raise ValueError(f"subject {i} data has shape {D.shape}, expected (T_i, {p})")
        if not np.all(np.isfinite(D)):
            raise ValueError(f"subject {i} data contains non-finite entries")
        out.append(D)
    if not out:
        raise ValueError("dataset is empty")
    return out


def _obs_dim(emission: EmissionModel) -> int:
    return emission.effect_dim if isinstance(emission, GaussianEmission) else 1


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def e_step_local(params: MhmmParams, data_i: np.ndarray, f0: np.ndarray) -> StatePosterior:
    """Forward-backward pass with emissions pinned at the anchor f0 (one pass)."""
    log_e = params.emission.log_matrix(np.asarray(f0, dtype=float), data_i)
    zeta, xi, logm = posteriors_batch(log_e[None], params.chain)
    return StatePosterior(zeta=zeta[0], xi=xi[0], log_marginal=float(logm[0]))


def _e_step_all(params: MhmmParams, datasets: list[np.ndarray], anchors: np.ndarray):
    """Posteriors for every subject; batched when all lengths agree.

    Returns (zetas, xis, log_margs, entropies) as lists / arrays per subject.
    """
    lengths = {D.shape[0] for D in datasets}
    if len(lengths) == 1:
        stack = np.stack(datasets)
        log_e = params.emission.log_matrix_batch(anchors, stack)
        zeta, xi, logm = posteriors_batch(log_e, params.chain)
        ent = entropy_batch(zeta, xi)
        return list(zeta), list(xi), np.asarray(logm), ent
    zetas, xis, logms, ents = [], [], [], []
    for i, D in enumerate(datasets):
        log_e = params.emission.log_matrix(anchors[i], D)
        zeta, xi, logm = posteriors_batch(log_e[None], params.chain)
        zetas.append(zeta[0])
        xis.append(xi[0])
        logms.append(float(logm[0]))
        ents.append(float(entropy_batch(zeta, xi)[0]))
    return zetas, xis, np.asarray(logms), np.asarray(ents)


# ---------------------------------------------------------------------------
# Variational factor updates
# ---------------------------------------------------------------------------

def gaussian_q_sums(zeta: np.ndarray, data: np.ndarray, emission: GaussianEmission):
    """Sufficient sums for the Gaussian-identity q update.

    Returns (prec_sum, lin) with prec_sum = sum_{t,k} zeta/sigma2_k and
    lin = sum_k sigma2_k^{-1} sum_t zeta_{tk} (D_t - mu_k).
    """
    prec_sum = float((zeta / emission.sigma2[None, :]).sum())
    lin = np.zeros(emission.effect_dim)
    for k in range(emission.n_states):
        lin += (zeta[:, k:k + 1] * (data - emission.mu[k])).sum(axis=0) / emission.sigma2[k]
    return prec_sum, lin


def gaussian_q_from_sums(Sigma: np.ndarray, prec_sum: float, lin: np.ndarray) -> QFactor:
    """Solve Omega^{-1} = Sigma^{-1} + prec_sum I, nu = Omega lin."""
    d = Sigma.shape[0]
    try:
        cf = cho_factor(Sigma, lower=True)
    except LinAlgError as exc:
        raise NumericalError("Sigma is not positive definite") from exc
    prec = cho_solve(cf, np.eye(d)) + prec_sum * np.eye(d)
    prec = symmetrize(prec)
    try:
        pf = cho_factor(prec, lower=True)
    except LinAlgError as exc:
        raise NumericalError("variational precision is not positive definite") from exc
    Omega = symmetrize(cho_solve(pf, np.eye(d)))
    nu = cho_solve(pf, lin)
    return QFactor(nu=nu, Omega=Omega)


def update_q_closed_form(params: MhmmParams, data_i: np.ndarray, post: StatePosterior) -> QFactor:
    """Exact Gaussian factor update for Gaussian-identity emissions."""
    em = params.emission
    if not isinstance(em, GaussianEmission):
        raise ValueError("closed-form q update requires a Gaussian emission")
    prec_sum, lin = gaussian_q_sums(post.zeta, data_i, em)
    return gaussian_q_from_sums(params.Sigma, prec_sum, lin)


def _tilted_value(emission: EmissionModel, zeta: np.ndarray, data: np.ndarray, f: np.ndarray) -> float:
    return float((zeta * emission.log_matrix(f, data)).sum())


def _tilted_grad_hess(emission: EmissionModel, zeta: np.ndarray, data: np.ndarray, f: np.ndarray):
    """Gradient/Hessian of sum_{t,k} zeta_{tk} log e_{tk}(f) in f."""
    if isinstance(emission, GaussianEmission):
        prec_sum, lin = gaussian_q_sums(zeta, data, emission)
        grad = lin - prec_sum * f
        hess = -prec_sum * np.eye(emission.effect_dim)
        return grad, hess
    if isinstance(emission, BernoulliEmission):
        a = (zeta * data[:, :1]).sum(axis=0)   # (K,) sum_t zeta y
        b = zeta.sum(axis=0)                    # (K,)
        s = sigmoid(emission.beta + float(f[0]))
        grad = np.array([float((a - b * s).sum())])
        hess = np.array([[-float((b * s * (1.0 - s)).sum())]])
        return grad, hess
    d = f.shape[0]
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for t in range(data.shape[0]):
        for k in range(emission.n_states):
            if zeta[t, k] == 0.0:
                continue
            grad += zeta[t, k] * emission.grad_f(k, t, f, data[t])
            hess += zeta[t, k] * emission.hess_f(k, t, f, data[t])
    return grad, hess


def update_q_laplace(
    params: MhmmParams,
    data_i: np.ndarray,
    post: StatePosterior,
    f0: np.ndarray,
    max_steps: int = 50,
    grad_tol: float = 1e-8,
) -> QFactor:
    """Gaussian factor from the mode and curvature of the tilted objective.

    The objective is l(f) = -f' Sigma^{-1} f / 2 + sum_{t,k} zeta_{tk} log e_{tk}(f),
    maximized by damped Newton starting from the anchor.
    """
    em = params.emission
    d = em.effect_dim
    try:
        cf = cho_factor(params.Sigma, lower=True)
    except LinAlgError as exc:
        raise NumericalError("Sigma is not positive definite") from exc
    Sigma_inv = cho_solve(cf, np.eye(d))

    def objective(f):
        return -0.5 * f @ Sigma_inv @ f + _tilted_value(em, post.zeta, data_i, f)

    f = np.asarray(f0, dtype=float).copy()
    value = objective(f)
    for _ in range(max_steps):
        tg, th = _tilted_grad_hess(em, post.zeta, data_i, f)
        grad = -Sigma_inv @ f + tg
        if np.max(np.abs(grad)) <= grad_tol:
            break
        neg_hess = symmetrize(Sigma_inv - th)
        try:
            hf = cho_factor(neg_hess, lower=True)
        except LinAlgError as exc:
            raise NumericalError("non-concave tilted objective in Newton step") from exc
        step = cho_solve(hf, grad)
        # accept ascent up to floating-point resolution of the objective, or the
        # final Newton increments near the mode stall on rounding noise
        slack = 64.0 * np.finfo(float).eps * max(1.0, abs(value))
        scale = 1.0
        for _ in range(30):
            cand = f + scale * step
            cand_value = objective(cand)
            if cand_value >= value - slack:
                f, value = cand, cand_value
                break
            scale *= 0.5
        else:
            raise NumericalError("Newton line search failed in Laplace update")
    else:
        raise NumericalError(f"Laplace Newton did not reach gradient tolerance in {max_steps} steps")
    _, th = _tilted_grad_hess(em, post.zeta, data_i, f)
    neg_hess = symmetrize(Sigma_inv - th)
    try:
        hf = cho_factor(neg_hess, lower=True)
    except LinAlgError as exc:
        raise NumericalError("Hessian at the Laplace mode is not negative definite") from exc
    Omega = symmetrize(cho_solve(hf, np.eye(d)))
    return QFactor(nu=f, Omega=Omega)


def gaussian_kl(q: QFactor, Sigma: np.ndarray, mean: np.ndarray | None = None) -> float:
    """KL(N(nu, Omega) || N(mean, Sigma)) in closed form; mean defaults to 0."""
    d = q.nu.shape[0]
    try:
        cf = cho_factor(Sigma, lower=True)
        of = cho_factor(q.Omega, lower=True)
    except LinAlgError as exc:
        raise NumericalError("non-PD covariance in KL computation") from exc
    delta = q.nu if mean is None else q.nu - mean
    tr = float(np.trace(cho_solve(cf, q.Omega)))
    quad = float(delta @ cho_solve(cf, delta))
    logdet_S = 2.0 * float(np.log(np.diag(cf[0])).sum())
    logdet_O = 2.0 * float(np.log(np.diag(of[0])).sum())
    return 0.5 * (tr - d + quad + logdet_S - logdet_O)


def quadrature_objective(
    params: MhmmParams, data_i: np.ndarray, post: StatePosterior, q: QFactor, n_quad: int
) -> float:
    """Per-subject variational objective with Gauss-Hermite emission expectations.

    L_i(nu, Omega) = sum_{t,k} zeta_{tk} E_q[log e_{tk}(f)] - KL(q || N(0, Sigma)),
    with the quadrature grid affinely mapped through the candidate (nu, Omega).
    """
    em = params.emission
    d = em.effect_dim
    nodes, weights = tensor_grid(n_quad, d)
    L = np.linalg.cholesky(q.Omega)
    F = q.nu[None, :] + nodes @ L.T  # (J, d)
    data_rep = np.broadcast_to(data_i, (F.shape[0],) + data_i.shape)
    log_mats = em.log_matrix_batch(F, data_rep)  # (J, T, K)
    e_term = float(np.einsum("j,jtk,tk->", weights, log_mats, post.zeta))
    return e_term - gaussian_kl(q, params.Sigma)


def update_q_quadrature(
    params: MhmmParams,
    data_i: np.ndarray,
    post: StatePosterior,
    prev_q: QFactor,
    n_quad: int,
) -> QFactor:
    """Maximize the quadrature objective over (nu, chol Omega) numerically."""
    d = params.emission.effect_dim
    tril = np.tril_indices(d)

    def unpack(x):
        nu = x[:d]
        L = np.zeros((d, d))
        L[tril] = x[d:]
        # positive diagonal through exp
        L[np.diag_indices(d)] = np.exp(np.diag(L))
        return QFactor(nu=nu, Omega=symmetrize(L @ L.T))

    def neg(x):
        try:
            return -quadrature_objective(params, data_i, post, unpack(x), n_quad)
        except NumericalError:
            return np.inf

    L0 = np.linalg.cholesky(prev_q.Omega)
    L0[np.diag_indices(d)] = np.log(np.diag(L0))
    x0 = np.concatenate([prev_q.nu, L0[tril]])
    res = minimize(neg, x0, method="BFGS", options={"maxiter": 500, "gtol": 1e-9})
    out = unpack(res.x)
    # keep whichever candidate scores better under the same objective
    if quadrature_objective(params, data_i, post, prev_q, n_quad) > -res.fun:
        return prev_q
    return out


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def m_step_pi(zetas: list[np.ndarray]) -> np.ndarray:
    """pi_k = average first-step marginal across subjects."""
    pi = np.mean([z[0] for z in zetas], axis=0)
    return pi / pi.sum()


def m_step_gamma(zetas: list[np.ndarray], xis: list[np.ndarray]) -> np.ndarray:
    """Gamma_{kl} = sum xi / sum zeta with row renormalization and a uniform
    fallback (plus DegeneracyWarning) for rows with no expected visits."""
    K = zetas[0].shape[1]
    num = np.zeros((K, K))
    den = np.zeros(K)
    for zeta, xi in zip(zetas, xis):
        if xi.shape[0] == 0:
            continue
        num += xi.sum(axis=0)
        den += zeta[:-1].sum(axis=0)
    Gamma = np.empty((K, K))
    for k in range(K):
        if den[k] <= 1e-12 or num[k].sum() <= 1e-12:
            warnings.warn(f"transition row {k} has no expected visits; using uniform", DegeneracyWarning)
            Gamma[k] = 1.0 / K
        else:
            row = num[k] / den[k]
            Gamma[k] = row / row.sum()
    return Gamma


def m_step_sigma(q_factors: list[QFactor]) -> np.ndarray:
    """Sigma = (1/n) sum_i (Omega_i + nu_i nu_i')."""
    acc = np.zeros_like(q_factors[0].Omega)
    for q in q_factors:
        acc += q.Omega + np.outer(q.nu, q.nu)
    return symmetrize(acc / len(q_factors))


def gaussian_mu_sums(datasets, zetas, q_factors, K: int, p: int):
    """Accumulate numerators/denominators of the location update."""
    num = np.zeros((K, p))
    den = np.zeros(K)
    for D, zeta, q in zip(datasets, zetas, q_factors):
        X = D - q.nu
        for k in range(K):
            num[k] += (zeta[:, k:k + 1] * X).sum(axis=0)
        den += zeta.sum(axis=0)
    return num, den


def gaussian_sigma2_sums(datasets, zetas, q_factors, mu: np.ndarray):
    """Accumulate sum_{i,t} zeta (||D - mu_k - nu_i||^2 + tr Omega_i) per state."""
    K = mu.shape[0]
    num = np.zeros(K)
    for D, zeta, q in zip(datasets, zetas, q_factors):
        X = D - q.nu
        tr = float(np.trace(q.Omega))
        for k in range(K):
            num[k] += float(zeta[:, k] @ (((X - mu[k]) ** 2).sum(axis=1) + tr))
    return num


def m_step_theta_e(
    datasets: list[np.ndarray],
    zetas: list[np.ndarray],
    q_factors: list[QFactor],
    emission: EmissionModel,
    n_quad: int = 20,
) -> EmissionModel:
    """Update emission parameters; closed form in the Gaussian case, Newton on
    the Gauss-Hermite expected complete-data objective otherwise."""
    K = emission.n_states
    if isinstance(emission, GaussianEmission):
        p = emission.effect_dim
        num, den = gaussian_mu_sums(datasets, zetas, q_factors, K, p)
        mu = np.empty((K, p))
        for k in range(K):
            if den[k] <= 1e-12:
                warnings.warn(f"state {k} has no expected occupancy; keeping old location", DegeneracyWarning)
                mu[k] = emission.mu[k]
            else:
                mu[k] = num[k] / den[k]
        s_num = gaussian_sigma2_sums(datasets, zetas, q_factors, mu)
        sigma2 = np.empty(K)
        for k in range(K):
            if den[k] <= 1e-12:
                sigma2[k] = emission.sigma2[k]
            else:
                sigma2[k] = max(s_num[k] / (p * den[k]), 1e-10)
        return GaussianEmission(mu=mu, sigma2=sigma2)
    if isinstance(emission, BernoulliEmission):
        x, w = gauss_hermite_standard(n_quad)
        n = len(datasets)
        a = np.zeros((n, K))
        b = np.zeros((n, K))
        F = np.empty((n, len(x)))
        for i, (D, zeta, q) in enumerate(zip(datasets, zetas, q_factors)):
            a[i] = (zeta * D[:, :1]).sum(axis=0)
            b[i] = zeta.sum(axis=0)
            F[i] = q.nu[0] + np.sqrt(q.Omega[0, 0]) * x
        beta = emission.beta.copy()
        for k in range(K):
            bk = beta[k]
            for _ in range(100):
                s = sigmoid(bk + F)          # (n, J)
                es = s @ w                   # (n,)
                ess = (s * (1.0 - s)) @ w
                grad = float(a[:, k].sum() - (b[:, k] * es).sum())
                hess = -float((b[:, k] * ess).sum())
                if abs(grad) < 1e-10 * max(1.0, abs(hess)):
                    break
                # clamp the step: with vanishing occupancy the optimum runs off
                # to +-inf and the raw Newton increment explodes
                bk -= float(np.clip(grad / hess, -4.0, 4.0))
                if abs(bk) > 30.0:
                    warnings.warn(f"logit for state {k} pinned at +-30", DegeneracyWarning)
                    bk = float(np.clip(bk, -30.0, 30.0))
                    break
            beta[k] = bk
        return BernoulliEmission(beta=beta)
    raise ValueError(f"no emission update implemented for {type(emission).__name__}")


# ---------------------------------------------------------------------------
# Objective assembly
# ---------------------------------------------------------------------------

def gaussian_expected_emission_term(
    zeta: np.ndarray, data: np.ndarray, emission: GaussianEmission, nu: np.ndarray, tr_Omega: float
) -> float:
    """sum_{t,k} zeta E_q[log e] for the Gaussian-identity emission."""
    p = emission.effect_dim
    X = data - nu
    sq = np.stack(
        [((X - emission.mu[k]) ** 2).sum(axis=1) + tr_Omega for k in range(emission.n_states)],
        axis=1,
    )
    per = -0.5 * (p * (LOG_2PI + np.log(emission.sigma2))[None, :] + sq / emission.sigma2[None, :])
    return float((zeta * per).sum())


def expected_emission_term(
    zeta: np.ndarray, data: np.ndarray, emission: EmissionModel, q: QFactor, n_quad: int = 20
) -> float:
    """Gauss-Hermite fallback for sum_{t,k} zeta E_q[log e]."""
    if isinstance(emission, GaussianEmission):
        return gaussian_expected_emission_term(zeta, data, emission, q.nu, float(np.trace(q.Omega)))
    d = emission.effect_dim
    nodes, weights = tensor_grid(n_quad, d)
    L = np.linalg.cholesky(q.Omega)
    F = q.nu[None, :] + nodes @ L.T
    data_rep = np.broadcast_to(data, (F.shape[0],) + data.shape)
    log_mats = emission.log_matrix_batch(F, data_rep)
    return float(np.einsum("j,jtk,tk->", weights, log_mats, zeta))


def chain_expected_term(zeta: np.ndarray, xi: np.ndarray, chain: ChainParams) -> float:
    """sum_k zeta_{k1} log pi_k + sum_{t,k,l} xi log Gamma, with 0 log 0 = 0."""
    with np.errstate(divide="ignore"):
        log_pi = np.log(np.clip(chain.pi, _TINY, None))
        log_Gamma = np.log(np.clip(chain.Gamma, _TINY, None))
    t1 = float(np.where(zeta[0] > 0.0, zeta[0] * log_pi, 0.0).sum())
    t2 = float(np.where(xi > 0.0, xi * log_Gamma[None], 0.0).sum()) if xi.shape[0] else 0.0
    return t1 + t2


def _assemble_elbo(params, datasets, zetas, xis, entropies, q_factors, n_quad: int) -> float:
    total = 0.0
    for D, zeta, xi, ent, q in zip(datasets, zetas, xis, entropies, q_factors):
        total += expected_emission_term(zeta, D, params.emission, q, n_quad)
        total += chain_expected_term(zeta, xi, params.chain)
        total -= gaussian_kl(q, params.Sigma)
        total += float(ent)
    return total


def anchored_elbo(
    params: MhmmParams,
    dataset,
    q_factors: list[QFactor],
    anchors: np.ndarray,
    n_quad: int = 20,
) -> float:
    """Evidence lower bound with the chain factor pinned at the anchors.

    Runs one forward-backward pass per subject at (params, anchors) and
    assembles expected complete-data terms, the Gaussian KL, and the chain
    posterior entropy.
    """
    datasets = _check_dataset(dataset, _obs_dim(params.emission))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    zetas, xis, _, ents = _e_step_all(params, datasets, anchors)
    return _assemble_elbo(params, datasets, zetas, xis, ents, q_factors, n_quad)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _resolve_method(config: AvemConfig, emission: EmissionModel) -> str:
    if config.e_step_method == "auto":
        return "closed_form" if emission.has_closed_form_gaussian else "laplace"
    if config.e_step_method == "closed_form" and not emission.has_closed_form_gaussian:
        raise ValueError("closed_form e_step_method requires a Gaussian-identity emission")
    return config.e_step_method


def fit_mhmm(dataset, init: MhmmParams, config: AvemConfig | None = None) -> FitReport:
    """Anchored variational EM driver.

    Anchors start at nu_i = 0 and are refreshed to the previous variational
    means, so each iteration costs one forward-backward pass per subject.  The
    traced objective is the anchored bound assembled from the iteration's
    cached chain posteriors together with the freshly updated q factors and
    parameters; the loop stops when its relative change drops below
    config.rel_tol.
    """
    config = config or AvemConfig()
    params = init
    em = params.emission
    datasets = _check_dataset(dataset, _obs_dim(em))
    n = len(datasets)
    d = em.effect_dim
    method = _resolve_method(config, em)

    start = time.perf_counter()
    nu = np.zeros((n, d))
    q_factors = [QFactor(nu=np.zeros(d), Omega=params.Sigma.copy()) for _ in range(n)]
    trace: list[float] = []
    anchors = nu.copy()
    converged = False
    for it in range(config.max_iter):
        anchors = nu.copy()
        zetas, xis, _, ents = _e_step_all(params, datasets, anchors)
        posts = [
            StatePosterior(zeta=z, xi=x, log_marginal=0.0) for z, x in zip(zetas, xis)
        ]
        new_q = []
        for i in range(n):
            if method == "closed_form":
                q = update_q_closed_form(params, datasets[i], posts[i])
            elif method == "laplace":
                q = update_q_laplace(params, datasets[i], posts[i], anchors[i])
            else:
                q = update_q_quadrature(params, datasets[i], posts[i], q_factors[i], config.n_quad)
            new_q.append(q)
        q_factors = new_q
        nu = np.stack([q.nu for q in q_factors])
        chain = ChainParams(pi=m_step_pi(zetas), Gamma=m_step_gamma(zetas, xis))
        emission = m_step_theta_e(datasets, zetas, q_factors, params.emission, config.n_quad)
        Sigma = m_step_sigma(q_factors)
        params = MhmmParams(chain=chain, emission=emission, Sigma=Sigma)
        elbo = _assemble_elbo(params, datasets, zetas, xis, ents, q_factors, config.n_quad)
        if not np.isfinite(elbo):
            raise NumericalError(f"objective became non-finite at iteration {it + 1}")
        trace.append(elbo)
        if it >= 1 and rel_change(trace[-2], trace[-1]) < config.rel_tol:
            converged = True
            break
    return FitReport(
        params=params,
        q_factors=q_factors,
        anchors=anchors,
        elbo_trace=np.asarray(trace),
        n_iter=len(trace),
        wall_time_seconds=time.perf_counter() - start,
        f_hat=nu.copy(),
        extra={"converged": converged, "e_step_method": method},
    )


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def farthest_point_centers(pooled: np.ndarray, K: int) -> np.ndarray:
    """Deterministic seeding: start from the point farthest from the pooled
    mean, then repeatedly take the point farthest from the chosen set, and
    finish with one assignment-and-average sweep."""
    center = pooled.mean(axis=0)
    first = int(np.argmax(((pooled - center) ** 2).sum(axis=1)))
    chosen = [first]
    for _ in range(1, K):
        dists = np.min(
            np.stack([((pooled - pooled[j]) ** 2).sum(axis=1) for j in chosen]), axis=0
        )
        chosen.append(int(np.argmax(dists)))
    seeds = pooled[chosen]
    labels = np.argmin(((pooled[:, None, :] - seeds[None]) ** 2).sum(axis=2), axis=1)
    centers = np.empty_like(seeds)
    for k in range(K):
        members = pooled[labels == k]
        centers[k] = members.mean(axis=0) if len(members) else seeds[k]
    return centers


def default_init_mhmm(dataset, K: int, emission_kind: str = "gaussian") -> MhmmParams:
    """Deterministic starting point: uniform pi, sticky Gamma (0.8 diagonal),
    farthest-point emission locations sorted by first coordinate descending,
    pooled variance, Sigma = I."""
    datasets = [np.asarray(D, dtype=float) for D in dataset]
    pooled = np.vstack(datasets)
    pi = np.full(K, 1.0 / K)
    Gamma = np.full((K, K), 0.2 / (K - 1)) if K > 1 else np.ones((1, 1))
    if K > 1:
        np.fill_diagonal(Gamma, 0.8)
    chain = ChainParams(pi=pi, Gamma=Gamma)
    if emission_kind == "gaussian":
        p = pooled.shape[1]
        centers = farthest_point_centers(pooled, K)
        order = np.argsort(-centers[:, 0])
        mu = centers[order]
        sigma2 = np.full(K, float(pooled.var(axis=0).mean()))
        emission: EmissionModel = GaussianEmission(mu=mu, sigma2=sigma2)
        Sigma = np.eye(p)
    elif emission_kind == "bernoulli":
        rate = float(np.clip(pooled[:, 0].mean(), 0.05, 0.95))
        base = np.log(rate / (1.0 - rate))
        offsets = np.linspace(1.0, -1.0, K) if K > 1 else np.zeros(1)
        emission = BernoulliEmission(beta=base + offsets)
        Sigma = np.eye(1)
    else:
        raise ValueError(f"unknown emission kind {emission_kind!r}")
    return MhmmParams(chain=chain, emission=emission, Sigma=Sigma)
