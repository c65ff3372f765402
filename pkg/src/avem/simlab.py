"""Scenario generators, scoring metrics, and the Monte Carlo harness.

Reproducibility contract: subject i of replicate r draws its own stream from
SeedSequence((seed, r, i)), and every generator consumes that stream in a
fixed order (effects first, then latent paths, then observation noise).
Consequences worth relying on:

* the first n subjects of a larger panel are bitwise identical to the
  n-subject panel (common random numbers across sample sizes), and
* changing only a variance knob rescales the effect draws without touching
  states or noise, so error comparisons across those knobs are paired.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np
from scipy.special import expit

from .base import AvemConfig, FitReport
from .emissions import BernoulliEmission, GaussianEmission
from .exact_em import fit_mcem, fit_qem
from .hmm import ChainParams
from .messm import (
    MessmParams,
    _column_of_entry,
    default_init_messm,
    fit_messm,
    unvec,
    unvecl,
    vec,
    vecl,
)
from .mhmm import MhmmParams, default_init_mhmm, fit_mhmm
from .partial import default_init_pavem, fit_pavem

VARIANTS = ("gaussian_mhmm", "bernoulli_mhmm", "messm", "localized")

# population blocks for the state-space scenario
MESSM_G = np.array([[0.70, -0.10], [0.10, 0.60]])
MESSM_H = np.array([[1.0, 0.0], [0.2, 0.9], [0.3, 0.4], [0.4, 0.2]])
MESSM_Q = 2
MESSM_P = 4


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of a simulation grid.

    K and d default per variant when left as None (gaussian_mhmm: K=3, d=2;
    bernoulli_mhmm and localized: K=2, d=1).  The messm variant has fixed
    latent/observation dimensions and ignores K and d.
    """

    variant: str
    n: int
    T: int
    seed: int = 0
    K: int | None = None
    d: int | None = None
    tau2: float = 1.0        # effect variance for gaussian/bernoulli
    t0: int = 10             # localized: transient window length
    tau_a2: float = 1.0      # localized: persistent effect variance
    tau_b2: float = 1.5      # localized: transient effect variance
    mu_sep: float = 1.5      # localized: state means are +-mu_sep
    sigma_g2: float = 0.05   # messm: transition-effect prior variance
    sigma_h2: float = 0.05   # messm: loading-effect prior variance
    obs_var: float = 0.25    # messm: observation noise variance (R diagonal)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n < 1 or self.T < 2:
            raise ValueError("need n >= 1 subjects and T >= 2 time points")
        if not (isinstance(self.seed, (int, np.integer)) and self.seed >= 0):
            raise ValueError("seed must be a nonnegative integer")
        for name in ("tau2", "tau_a2", "tau_b2", "sigma_g2", "sigma_h2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.obs_var <= 0:
            raise ValueError("obs_var must be positive")
        if self.t0 < 0:
            raise ValueError("t0 must be nonnegative")
        if self.variant == "gaussian_mhmm":
            self._fill("K", 3)
            self._fill("d", 2)
        elif self.variant == "bernoulli_mhmm":
            self._fill("K", 2)
            self._fill("d", 1)
            if self.d != 1:
                raise ValueError("bernoulli_mhmm uses a scalar intercept effect (d=1)")
        elif self.variant == "localized":
            self._fill("K", 2)
            self._fill("d", 1)
            if self.K != 2 or self.d != 1:
                raise ValueError("localized scenario is defined for K=2, d=1")
        if self.K is not None and self.K < 2:
            raise ValueError("need K >= 2 states")
        if self.d is not None and self.d < 1:
            raise ValueError("need d >= 1")

    def _fill(self, name: str, value: int) -> None:
        if getattr(self, name) is None:
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class MethodSpec:
    """A fitting method plus its knobs; label() names the result-table rows."""

    kind: str                # avem | pavem | qem | mcem
    n_nodes: int = 9         # quadrature nodes per effect dimension (qem, pavem)
    n_samples: int = 20      # Monte Carlo draws per iteration (mcem)
    max_iter: int = 200
    rel_tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.kind not in ("avem", "pavem", "qem", "mcem"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.n_nodes < 1 or self.n_samples < 1:
            raise ValueError("n_nodes and n_samples must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "avem":
            return "avem"
        if self.kind == "mcem":
            return f"mcem({self.n_samples})"
        return f"{self.kind}({self.n_nodes})"


# ---------------------------------------------------------------------------
# ground-truth containers
# ---------------------------------------------------------------------------

@dataclass
class MhmmTruth:
    chain: ChainParams
    mu: np.ndarray            # (K, d)
    sigma2: np.ndarray        # (K,)
    f: np.ndarray             # (n, d)
    states: list[np.ndarray]
    tau2: float


@dataclass
class BernoulliTruth:
    chain: ChainParams
    beta: np.ndarray          # (K,)
    f: np.ndarray             # (n, 1)
    states: list[np.ndarray]
    tau2: float


@dataclass
class MessmTruth:
    G: np.ndarray
    H: np.ndarray
    R_diag: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    gs: np.ndarray            # (n, q*q) per-subject transition vectors
    hs: np.ndarray            # (n, L) per-subject loading vectors
    latents: list[np.ndarray]


@dataclass
class LocalizedTruth:
    chain: ChainParams
    mu: np.ndarray            # (K,)
    sigma2: np.ndarray        # (K,)
    t0: int
    f_a: np.ndarray           # (n,)
    f_b: np.ndarray           # (n,)
    states: list[np.ndarray]


@dataclass
class ReplicateResult:
    """Scores for one fit; fields are None when not applicable to the model.

    rmse_mu covers the state-dependent location parameter (means for Gaussian
    emissions, logit intercepts for Bernoulli).  mse_f is the mean over
    subjects of the squared effect-estimate error; for the localized scenario
    it covers the persistent effect and mse_f_b the transient one.
    """

    rmse_mu: float | None = None
    rmse_sigma2: float | None = None
    gamma_abs_err: float | None = None
    mse_f: float | None = None
    mse_f_b: float | None = None
    rmse_G: float | None = None
    rmse_H: float | None = None
    rmse_R: float | None = None
    n_iter: int = 0
    wall_time: float | None = None

    def __post_init__(self) -> None:
        for fld in fields(self):
            val = getattr(self, fld.name)
            if val is not None and val < 0:
                raise ValueError(f"{fld.name} must be nonnegative, got {val!r}")


# ---------------------------------------------------------------------------
# chain construction and sampling
# ---------------------------------------------------------------------------

def stationary_distribution(Gamma: np.ndarray) -> np.ndarray:
    """Stationary law of an irreducible row-stochastic matrix.

    Solves pi (Gamma - I) = 0 with the last equation replaced by sum(pi) = 1.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    K = Gamma.shape[0]
    if Gamma.shape != (K, K) or np.any(Gamma < 0):
        raise ValueError("Gamma must be a square nonnegative matrix")
    if np.max(np.abs(Gamma.sum(axis=1) - 1.0)) > 1e-10:
        raise ValueError("Gamma rows must sum to 1")
    reach = np.linalg.matrix_power(np.eye(K, dtype=bool) | (Gamma > 0), K - 1) if K > 1 else None
    if K > 1 and not reach.all():
        raise ValueError("Gamma is reducible; no unique stationary distribution")
    A = Gamma.T - np.eye(K)
    A[-1, :] = 1.0
    b = np.zeros(K)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    return pi / pi.sum()


def sticky_chain(K: int, diag: float = 0.92) -> ChainParams:
    """Sticky transition matrix with the off-diagonal mass split evenly;
    initial distribution is the stationary one (uniform, by symmetry)."""
    Gamma = np.full((K, K), (1.0 - diag) / (K - 1))
    np.fill_diagonal(Gamma, diag)
    return ChainParams(pi=stationary_distribution(Gamma), Gamma=Gamma)


def state_mean_ladder(K: int) -> np.ndarray:
    """Equally spaced state locations from 1.5 down to -1.5."""
    return np.linspace(1.5, -1.5, K)


def _subject_rng(seed: int, replicate: int, subject: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, replicate, subject)))


def _sample_states(rng: np.random.Generator, chain: ChainParams, T: int) -> np.ndarray:
    cum_pi = np.cumsum(chain.pi)
    cum_rows = np.cumsum(chain.Gamma, axis=1)
    u = rng.random(T)
    K = chain.pi.shape[0]
    s = np.empty(T, dtype=np.int64)
    s[0] = min(int(np.searchsorted(cum_pi, u[0], side="right")), K - 1)
    for t in range(1, T):
        s[t] = min(int(np.searchsorted(cum_rows[s[t - 1]], u[t], side="right")), K - 1)
    return s


def _check_variant(spec: ScenarioSpec, expected: str) -> None:
    if spec.variant != expected:
        raise ValueError(f"spec has variant {spec.variant!r}, generator needs {expected!r}")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_gaussian_mhmm(spec: ScenarioSpec, replicate: int = 0):
    """Sticky-chain Gaussian panel with an additive N(0, tau2 I_d) subject shift."""
    _check_variant(spec, "gaussian_mhmm")
    chain = sticky_chain(spec.K)
    mu = np.repeat(state_mean_ladder(spec.K)[:, None], spec.d, axis=1)
    sigma2 = np.ones(spec.K)
    scale = np.sqrt(spec.tau2)
    datasets, states = [], []
    f = np.empty((spec.n, spec.d))
    for i in range(spec.n):
        rng = _subject_rng(spec.seed, replicate, i)
        f[i] = scale * rng.standard_normal(spec.d)
        s = _sample_states(rng, chain, spec.T)
        eps = rng.standard_normal((spec.T, spec.d))
        datasets.append(mu[s] + f[i][None, :] + eps)
        states.append(s)
    return datasets, MhmmTruth(chain=chain, mu=mu, sigma2=sigma2, f=f, states=states, tau2=spec.tau2)


def gen_bernoulli_mhmm(spec: ScenarioSpec, replicate: int = 0):
    """Binary panel with logit(p) = beta_state + f_i, f_i ~ N(0, tau2)."""
    _check_variant(spec, "bernoulli_mhmm")
    chain = sticky_chain(spec.K)
    beta = np.linspace(-1.5, 1.5, spec.K)
    scale = np.sqrt(spec.tau2)
    datasets, states = [], []
    f = np.empty((spec.n, 1))
    for i in range(spec.n):
        rng = _subject_rng(spec.seed, replicate, i)
        f[i] = scale * rng.standard_normal(1)
        s = _sample_states(rng, chain, spec.T)
        u = rng.random(spec.T)
        y = (u < expit(beta[s] + f[i, 0])).astype(float)
        datasets.append(y[:, None])
        states.append(s)
    return datasets, BernoulliTruth(chain=chain, beta=beta, f=f, states=states, tau2=spec.tau2)


def gen_messm(spec: ScenarioSpec, replicate: int = 0):
    """Linear-Gaussian panels whose transition/loading matrices are subject
    draws around the population blocks MESSM_G / MESSM_H."""
    _check_variant(spec, "messm")
    q, p = MESSM_Q, MESSM_P
    g_bar, h_bar = vec(MESSM_G), vecl(MESSM_H)
    R_diag = np.full(p, spec.obs_var)
    m0, P0 = np.zeros(q), np.eye(q)
    sg, sh = np.sqrt(spec.sigma_g2), np.sqrt(spec.sigma_h2)
    datasets, latents = [], []
    gs = np.empty((spec.n, q * q))
    hs = np.empty((spec.n, h_bar.shape[0]))
    for i in range(spec.n):
        rng = _subject_rng(spec.seed, replicate, i)
        gs[i] = g_bar + sg * rng.standard_normal(q * q)
        hs[i] = h_bar + sh * rng.standard_normal(h_bar.shape[0])
        G_i, H_i = unvec(gs[i], q), unvecl(hs[i], p, q)
        U = np.empty((spec.T, q))
        U[0] = m0 + rng.standard_normal(q)  # P0 = I
        W = rng.standard_normal((spec.T - 1, q))
        E = rng.standard_normal((spec.T, p))
        for t in range(1, spec.T):
            U[t] = G_i @ U[t - 1] + W[t - 1]
        datasets.append(U @ H_i.T + np.sqrt(R_diag) * E)
        latents.append(U)
    return datasets, MessmTruth(G=MESSM_G.copy(), H=MESSM_H.copy(), R_diag=R_diag, m0=m0, P0=P0,
                                gs=gs, hs=hs, latents=latents)


def gen_localized(spec: ScenarioSpec, replicate: int = 0):
    """Two-state univariate panel with a persistent shift f_a everywhere and a
    transient shift f_b on t < t0 only."""
    _check_variant(spec, "localized")
    chain = sticky_chain(2)
    mu = np.array([spec.mu_sep, -spec.mu_sep])
    sigma2 = np.ones(2)
    sa, sb = np.sqrt(spec.tau_a2), np.sqrt(spec.tau_b2)
    window = (np.arange(spec.T) < spec.t0).astype(float)
    datasets, states = [], []
    f_a = np.empty(spec.n)
    f_b = np.empty(spec.n)
    for i in range(spec.n):
        rng = _subject_rng(spec.seed, replicate, i)
        f_a[i] = sa * rng.standard_normal()
        f_b[i] = sb * rng.standard_normal()
        s = _sample_states(rng, chain, spec.T)
        eps = rng.standard_normal(spec.T)
        datasets.append((mu[s] + f_a[i] + window * f_b[i] + eps)[:, None])
        states.append(s)
    return datasets, LocalizedTruth(chain=chain, mu=mu, sigma2=sigma2, t0=spec.t0,
                                    f_a=f_a, f_b=f_b, states=states)


_GENERATORS = {
    "gaussian_mhmm": gen_gaussian_mhmm,
    "bernoulli_mhmm": gen_bernoulli_mhmm,
    "messm": gen_messm,
    "localized": gen_localized,
}


def generate(spec: ScenarioSpec, replicate: int = 0):
    if replicate < 0:
        raise ValueError("replicate must be nonnegative")
    return _GENERATORS[spec.variant](spec, replicate)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _best_permutation(loc_fit: np.ndarray, loc_true: np.ndarray) -> tuple[int, ...]:
    """Label permutation minimizing squared distance between state locations."""
    K = loc_true.shape[0]
    best, best_err = None, np.inf
    for perm in itertools.permutations(range(K)):
        err = float(((loc_fit[list(perm)] - loc_true) ** 2).sum())
        if err < best_err:
            best, best_err = perm, err
    return best


def _chain_of(params: Any) -> ChainParams:
    return params.chain


def score(fit: FitReport, truth) -> ReplicateResult:
    """Error metrics for one fit, with state labels and effect signs aligned.

    Label alignment permutes the fitted states to best match the true
    emission locations; sign alignment (messm) flips loading columns toward
    the true H.  A scalar fit scored against localized truth is charged the
    full transient effect (its implicit estimate is zero).
    """
    if isinstance(truth, (MhmmTruth, BernoulliTruth)):
        em = fit.params.emission
        chain = _chain_of(fit.params)
        if isinstance(truth, BernoulliTruth):
            perm = list(_best_permutation(em.beta[:, None], truth.beta[:, None]))
            rmse_mu = float(np.sqrt(np.mean((em.beta[perm] - truth.beta) ** 2)))
            rmse_sigma2 = None
        else:
            mu_fit = em.mu
            perm = list(_best_permutation(mu_fit, truth.mu))
            rmse_mu = float(np.sqrt(np.mean((mu_fit[perm] - truth.mu) ** 2)))
            rmse_sigma2 = float(np.sqrt(np.mean((em.sigma2[perm] - truth.sigma2) ** 2)))
        gamma_err = float(np.mean(np.abs(chain.Gamma[np.ix_(perm, perm)] - truth.chain.Gamma)))
        f_hat = fit.f_hat
        mse_f = float(((f_hat - truth.f) ** 2).sum(axis=1).mean())
        return ReplicateResult(rmse_mu=rmse_mu, rmse_sigma2=rmse_sigma2, gamma_abs_err=gamma_err,
                               mse_f=mse_f, n_iter=fit.n_iter, wall_time=fit.wall_time_seconds)

    if isinstance(truth, LocalizedTruth):
        em = fit.params.emission
        chain = _chain_of(fit.params)
        mu_fit = em.mu[:, 0]
        perm = list(_best_permutation(mu_fit[:, None], truth.mu[:, None]))
        rmse_mu = float(np.sqrt(np.mean((mu_fit[perm] - truth.mu) ** 2)))
        rmse_sigma2 = float(np.sqrt(np.mean((em.sigma2[perm] - truth.sigma2) ** 2)))
        gamma_err = float(np.mean(np.abs(chain.Gamma[np.ix_(perm, perm)] - truth.chain.Gamma)))
        f_a_hat = fit.f_hat[:, 0]
        f_b_hat = fit.f_hat[:, 1] if fit.f_hat.shape[1] > 1 else np.zeros_like(truth.f_b)
        return ReplicateResult(rmse_mu=rmse_mu, rmse_sigma2=rmse_sigma2, gamma_abs_err=gamma_err,
                               mse_f=float(np.mean((f_a_hat - truth.f_a) ** 2)),
                               mse_f_b=float(np.mean((f_b_hat - truth.f_b) ** 2)),
                               n_iter=fit.n_iter, wall_time=fit.wall_time_seconds)

    if isinstance(truth, MessmTruth):
        return _score_messm(fit, truth)
    raise TypeError(f"unknown truth container {type(truth).__name__}")


def _score_messm(fit: FitReport, truth: MessmTruth) -> ReplicateResult:
    params: MessmParams = fit.params
    q, p = params.q, params.p
    H_hat = unvecl(params.mu_h, p, q)
    # column signs are only identified up to a similarity flip; align on H
    flip = np.where((H_hat * truth.H).sum(axis=0) >= 0, 1.0, -1.0)
    F = np.diag(flip)
    G_al = F @ unvec(params.mu_g, q) @ F
    H_al = H_hat @ F
    rmse_G = float(np.sqrt(np.mean((G_al - truth.G) ** 2)))
    rmse_H = float(np.sqrt(np.mean((vecl(H_al) - vecl(truth.H)) ** 2)))
    rmse_R = float(np.sqrt(np.mean((params.R_diag - truth.R_diag) ** 2)))
    FF = np.kron(F, F)
    col = _column_of_entry(p, q)
    g_hat = fit.f_hat[:, : q * q] @ FF.T
    h_hat = fit.f_hat[:, q * q:] * flip[col][None, :]
    err = ((g_hat - truth.gs) ** 2).sum(axis=1) + ((h_hat - truth.hs) ** 2).sum(axis=1)
    return ReplicateResult(rmse_G=rmse_G, rmse_H=rmse_H, rmse_R=rmse_R,
                           mse_f=float(err.mean()), n_iter=fit.n_iter,
                           wall_time=fit.wall_time_seconds)


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

_ALLOWED = {
    "gaussian_mhmm": ("avem", "qem", "mcem"),
    "bernoulli_mhmm": ("avem", "qem", "mcem"),
    "messm": ("avem",),
    "localized": ("avem", "pavem"),
}


def fit_method(spec: ScenarioSpec, datasets, method: MethodSpec, replicate: int = 0,
               sign_align: bool = True) -> FitReport:
    """Fit one method to one generated panel with the spec's default inits."""
    if method.kind not in _ALLOWED[spec.variant]:
        raise ValueError(f"method {method.kind!r} does not apply to variant {spec.variant!r}")
    # MCEM redraws nodes every sweep; tie its stream to (seed, replicate)
    sub_seed = int(np.random.SeedSequence((spec.seed, replicate)).generate_state(1)[0])
    config = AvemConfig(max_iter=method.max_iter, rel_tol=method.rel_tol, seed=sub_seed)
    if spec.variant == "messm":
        return fit_messm(datasets, default_init_messm(datasets, MESSM_Q), config,
                         sign_align=sign_align)
    if method.kind == "pavem":
        init = default_init_pavem(datasets, spec.K, spec.t0)
        return fit_pavem(datasets, init, config, n_nodes=method.n_nodes)
    kind = "bernoulli" if spec.variant == "bernoulli_mhmm" else "gaussian"
    init = default_init_mhmm(datasets, spec.K, kind)
    if method.kind == "avem":
        return fit_mhmm(datasets, init, config)
    if method.kind == "qem":
        return fit_qem(datasets, init, config, n_nodes=method.n_nodes)
    return fit_mcem(datasets, init, config, n_samples=method.n_samples)


def _spec_columns(spec: ScenarioSpec) -> dict:
    return asdict(spec)


def _replicate_rows(spec: ScenarioSpec, replicate: int, methods: tuple, with_timing: bool,
                    sign_align: bool = True) -> list[dict]:
    datasets, truth = generate(spec, replicate)
    rows = []
    for method in methods:
        report = fit_method(spec, datasets, method, replicate, sign_align=sign_align)
        result = score(report, truth)
        row = _spec_columns(spec)
        row["replicate"] = replicate
        row["method"] = method.label
        row["converged"] = bool(report.extra.get("converged", False))
        for fld in fields(ReplicateResult):
            row[fld.name] = getattr(result, fld.name)
        if not with_timing:
            row.pop("wall_time")
        rows.append(row)
    return rows


def _replicate_rows_star(args):
    return _replicate_rows(*args)


def run_monte_carlo(specs, methods, n_reps: int, n_jobs: int = 1,
                    with_timing: bool = False, sign_align: bool = True) -> list[dict]:
    """Fit every method on every replicate of every spec.

    Returns one flat dict per (spec, replicate, method), in deterministic
    order regardless of n_jobs.  Replicates are independent jobs; wall_time
    columns are included only when with_timing is set, so default tables are
    reproducible byte for byte.
    """
    specs = list(specs)
    methods = tuple(methods)
    if not specs or not methods:
        raise ValueError("need at least one spec and one method")
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    jobs = [(spec, rep, methods, with_timing, sign_align)
            for spec in specs for rep in range(n_reps)]
    if n_jobs == 1:
        chunks = [_replicate_rows_star(job) for job in jobs]
    else:
        workers = n_jobs if n_jobs > 0 else None
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_replicate_rows_star, jobs))
    return [row for chunk in chunks for row in chunk]
