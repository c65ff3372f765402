"""Anchored variational EM for mixed-effects linear-Gaussian state-space models.

Each subject carries two Gaussian random effects: g_i = vec(G_i) perturbing
the state transition and h_i = vecl(H_i) perturbing the lower-triangular
observation loading.  The intractable coupling between effects and states is
broken by running one Kalman smoother per subject at anchor effects (the
previous variational means); given the smoothed moments both effect factors
have closed-form Gaussian updates because the complete-data log-density is
quadratic in g and in h separately.

Vectorization is column-major throughout: vec stacks matrix columns, and
vecl stacks the free (lower-triangular) entries column by column.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .base import AvemConfig, FitReport, NumericalError, QFactor, rel_change, symmetrize
from .kalman import LgssmSpec, kalman_filter, rts_smoother
from .mhmm import gaussian_kl

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# vectorization helpers
# ---------------------------------------------------------------------------

def vec(A: np.ndarray) -> np.ndarray:
    return np.asarray(A, dtype=float).ravel(order="F")


def unvec(v: np.ndarray, q: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((q, q), order="F")


def lower_dim(p: int, q: int) -> int:
    """Number of free entries of a (p, q) lower-triangular loading."""
    return p * q - q * (q - 1) // 2


def build_s_h(p: int, q: int) -> np.ndarray:
    """Selection matrix with vec(H) = S_H @ vecl(H) for lower-triangular H."""
    S = np.zeros((p * q, lower_dim(p, q)))
    idx = 0
    for c in range(q):
        for r in range(c, p):
            S[c * p + r, idx] = 1.0
            idx += 1
    return S


def vecl(H: np.ndarray) -> np.ndarray:
    p, q = H.shape
    return np.concatenate([H[c:, c] for c in range(q)])


def unvecl(h: np.ndarray, p: int, q: int) -> np.ndarray:
    H = np.zeros((p, q))
    idx = 0
    for c in range(q):
        H[c:, c] = h[idx:idx + (p - c)]
        idx += p - c
    return H


def _column_of_entry(p: int, q: int) -> np.ndarray:
    """For each free entry of vecl, the column of H it belongs to."""
    return np.concatenate([np.full(p - c, c, dtype=int) for c in range(q)])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class MessmParams:
    """Group-level parameters of the mixed state-space model."""

    mu_g: np.ndarray     # (q*q,) mean transition effect
    Sigma_g: np.ndarray  # (q*q, q*q)
    mu_h: np.ndarray     # (L,) mean loading effect, L = p*q - q*(q-1)/2
    Sigma_h: np.ndarray  # (L, L)
    R_diag: np.ndarray   # (p,) observation noise variances
    m0: np.ndarray       # (q,) initial state mean
    P0: np.ndarray       # (q, q) initial state covariance

    def __post_init__(self) -> None:
        for name in ("mu_g", "Sigma_g", "mu_h", "Sigma_h", "R_diag", "m0", "P0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        q = self.m0.shape[0]
        if self.mu_g.shape != (q * q,):
            raise ValueError(f"mu_g has shape {self.mu_g.shape}, expected ({q * q},)")
        if self.Sigma_g.shape != (q * q, q * q):
            raise ValueError("Sigma_g shape mismatch")
        p = self.R_diag.shape[0]
        L = lower_dim(p, q)
        if self.mu_h.shape != (L,) or self.Sigma_h.shape != (L, L):
            raise ValueError(f"loading effect must have {L} free entries")
        if self.P0.shape != (q, q) or np.max(np.abs(self.P0 - self.P0.T)) > 1e-10:
            raise ValueError("P0 must be a symmetric (q, q) matrix")
        if np.any(self.R_diag <= 0):
            raise ValueError("R_diag entries must be positive")

    @property
    def q(self) -> int:
        return self.m0.shape[0]

    @property
    def p(self) -> int:
        return self.R_diag.shape[0]


@dataclass
class SubjectEffects:
    """Variational factors for one subject's transition and loading effects."""

    q_g: QFactor
    q_h: QFactor


# ---------------------------------------------------------------------------
# anchored E-step
# ---------------------------------------------------------------------------

def anchored_smoother(params: MessmParams, D: np.ndarray, g_anchor: np.ndarray, h_anchor: np.ndarray):
    """Kalman smoother with the effects pinned at the anchors (one pass)."""
    q, p = params.q, params.p
    spec = LgssmSpec(
        G=unvec(g_anchor, q),
        H=unvecl(h_anchor, p, q),
        R=np.diag(params.R_diag),
        m0=params.m0,
        P0=params.P0,
    )
    return rts_smoother(spec, kalman_filter(spec, D))


def update_q_g(params: MessmParams, mom) -> QFactor:
    """Closed-form Gaussian factor for the transition effect.

    The expected complete-data objective is quadratic in g with precision
    Sigma_g^{-1} + sum_s Q_hat[s] (x) I_q and linear term
    Sigma_g^{-1} mu_g + sum_s vec(Q_lag[s]).
    """
    q = params.q
    try:
        cf = cho_factor(params.Sigma_g, lower=True)
    except LinAlgError as exc:
        raise NumericalError("Sigma_g is not positive definite") from exc
    prior_prec = cho_solve(cf, np.eye(q * q))
    Lam = prior_prec + np.kron(mom.Q_hat[:-1].sum(axis=0), np.eye(q))
    eta = prior_prec @ params.mu_g + vec(mom.Q_lag.sum(axis=0))
    Lam = symmetrize(Lam)
    try:
        lf = cho_factor(Lam, lower=True)
    except LinAlgError as exc:
        raise NumericalError("transition-effect precision is not positive definite") from exc
    return QFactor(nu=cho_solve(lf, eta), Omega=symmetrize(cho_solve(lf, np.eye(q * q))))


def update_q_h(params: MessmParams, D: np.ndarray, mom) -> QFactor:
    """Closed-form Gaussian factor for the loading effect."""
    q, p = params.q, params.p
    S = build_s_h(p, q)
    R_inv = np.diag(1.0 / params.R_diag)
    try:
        cf = cho_factor(params.Sigma_h, lower=True)
    except LinAlgError as exc:
        raise NumericalError("Sigma_h is not positive definite") from exc
    prior_prec = cho_solve(cf, np.eye(S.shape[1]))
    Lam = prior_prec + S.T @ np.kron(mom.Q_hat.sum(axis=0), R_inv) @ S
    eta = prior_prec @ params.mu_h + S.T @ vec(R_inv @ (D.T @ mom.m_hat))
    Lam = symmetrize(Lam)
    try:
        lf = cho_factor(Lam, lower=True)
    except LinAlgError as exc:
        raise NumericalError("loading-effect precision is not positive definite") from exc
    return QFactor(nu=cho_solve(lf, eta), Omega=symmetrize(cho_solve(lf, np.eye(S.shape[1]))))


# ---------------------------------------------------------------------------
# sign alignment
# ---------------------------------------------------------------------------

def _flip_subject(flip: np.ndarray, eff: SubjectEffects, mom, p: int, q: int):
    """Apply the similarity transform U -> F U, G -> F G F, H -> H F."""
    F = np.diag(flip)
    FF = np.kron(F, F)
    fh = flip[_column_of_entry(p, q)]
    q_g = QFactor(nu=FF @ eff.q_g.nu, Omega=symmetrize(FF @ eff.q_g.Omega @ FF))
    q_h = QFactor(nu=fh * eff.q_h.nu, Omega=symmetrize(eff.q_h.Omega * np.outer(fh, fh)))
    mom2 = type(mom)(
        m_hat=mom.m_hat * flip[None, :],
        P_hat=F @ mom.P_hat @ F,
        P_lag=F @ mom.P_lag @ F,
        Q_hat=F @ mom.Q_hat @ F,
        Q_lag=F @ mom.Q_lag @ F,
        loglik=mom.loglik,
    )
    return SubjectEffects(q_g=q_g, q_h=q_h), mom2


def _orientation_score(params: MessmParams, eff: SubjectEffects, mom) -> float:
    """Prior-coupled part of the subject bound; everything else is flip-invariant."""
    try:
        cf = cho_factor(params.P0, lower=True)
    except LinAlgError as exc:
        raise NumericalError("P0 is not positive definite") from exc
    delta = mom.m_hat[0] - params.m0
    init_quad = float(np.trace(cho_solve(cf, mom.P_hat[0]))) + float(delta @ cho_solve(cf, delta))
    return (
        -0.5 * init_quad
        - gaussian_kl(eff.q_g, params.Sigma_g, params.mu_g)
        - gaussian_kl(eff.q_h, params.Sigma_h, params.mu_h)
    )


def sign_align_subject(params: MessmParams, eff: SubjectEffects, mom):
    """Column-sign alignment of one subject against the group loading.

    Candidate flips come from the cosine between the subject's and the group's
    loading columns; a flip is kept only when it improves the prior-coupled
    terms, so alignment never lowers the bound.
    """
    p, q = params.p, params.q
    H_grp = unvecl(params.mu_h, p, q)
    H_sub = unvecl(eff.q_h.nu, p, q)
    flip = np.where(np.einsum("pc,pc->c", H_grp, H_sub) < 0.0, -1.0, 1.0)
    if np.all(flip > 0):
        return eff, mom, False
    eff2, mom2 = _flip_subject(flip, eff, mom, p, q)
    if _orientation_score(params, eff2, mom2) > _orientation_score(params, eff, mom):
        return eff2, mom2, True
    return eff, mom, False


# ---------------------------------------------------------------------------
# objective assembly
# ---------------------------------------------------------------------------

def _row_residual_sq(p: int, q: int, D: np.ndarray, eff: SubjectEffects, mom) -> np.ndarray:
    """Per-row sums E_q[(D_tj - (H u_t)_j)^2], accumulated in residual form.

    Second moments of a near-unit-root subject reach 1e18, so expanding the
    square into raw-moment traces cancels sixteen digits and leaves O(100)
    noise in the bound; subtracting the fitted values before squaring keeps
    the cancellation at observation scale.
    """
    S = build_s_h(p, q)
    H_bar = unvecl(eff.q_h.nu, p, q)
    resid = D - mom.m_hat @ H_bar.T  # (T, p)
    P_sum = mom.P_hat.sum(axis=0)
    Q_sum = mom.Q_hat.sum(axis=0)
    sq = np.empty(p)
    for j in range(p):
        # rows of vec(H) belonging to observation row j sit at positions c*p + j
        A_j = S[np.arange(q) * p + j, :]  # (q, L)
        var_mean = float(H_bar[j] @ P_sum @ H_bar[j])
        var_eff = float(np.trace(A_j.T @ Q_sum @ A_j @ eff.q_h.Omega))
        sq[j] = float((resid[:, j] ** 2).sum()) + var_mean + var_eff
    return sq


def _subject_data_term(params: MessmParams, D: np.ndarray, eff: SubjectEffects, mom) -> float:
    """E_q[log p(D | U, h)] with both expectations in closed form."""
    T = D.shape[0]
    sq = _row_residual_sq(params.p, params.q, D, eff, mom)
    total = -0.5 * T * (params.p * LOG_2PI + np.log(params.R_diag).sum())
    return total - 0.5 * float((sq / params.R_diag).sum())


def _subject_trans_term(params: MessmParams, eff: SubjectEffects, mom) -> float:
    """E_q[log p(U_2..T | U_1, g)] under q(U) q(g), in residual form."""
    q = params.q
    T = mom.m_hat.shape[0]
    G_bar = unvec(eff.q_g.nu, q)
    resid = mom.m_hat[1:] - mom.m_hat[:-1] @ G_bar.T
    P_past = mom.P_hat[:-1].sum(axis=0)
    P_lag = mom.P_lag.sum(axis=0)
    Q_past = mom.Q_hat[:-1].sum(axis=0)
    sq = (
        float((resid ** 2).sum())
        + float(np.trace(mom.P_hat[1:].sum(axis=0)))
        - 2.0 * float(np.trace(G_bar.T @ P_lag))
        + float(np.trace(G_bar @ P_past @ G_bar.T))
        + float(np.trace(np.kron(Q_past, np.eye(q)) @ eff.q_g.Omega))
    )
    return -0.5 * (T - 1) * q * LOG_2PI - 0.5 * sq


def _subject_init_term(params: MessmParams, mom) -> float:
    q = params.q
    try:
        cf = cho_factor(params.P0, lower=True)
    except LinAlgError as exc:
        raise NumericalError("P0 is not positive definite") from exc
    logdet = 2.0 * float(np.log(np.diag(cf[0])).sum())
    delta = mom.m_hat[0] - params.m0
    quad = float(np.trace(cho_solve(cf, mom.P_hat[0]))) + float(delta @ cho_solve(cf, delta))
    return -0.5 * (q * LOG_2PI + logdet + quad)


def gaussian_chain_entropy(mom) -> float:
    """Entropy of the smoothed Markov chain q(U_1..T)."""
    T, q = mom.m_hat.shape
    try:
        cf = cho_factor(mom.P_hat[0], lower=True)
    except LinAlgError as exc:
        raise NumericalError("smoothed covariance is not positive definite") from exc
    total = 0.5 * q * (1.0 + LOG_2PI) + float(np.log(np.diag(cf[0])).sum())
    for t in range(1, T):
        prev = cho_factor(mom.P_hat[t - 1], lower=True)
        C = mom.P_hat[t] - mom.P_lag[t - 1] @ cho_solve(prev, mom.P_lag[t - 1].T)
        C = symmetrize(C)
        try:
            cfc = cho_factor(C, lower=True)
        except LinAlgError as exc:
            raise NumericalError("conditional smoothed covariance lost definiteness") from exc
        total += 0.5 * q * (1.0 + LOG_2PI) + float(np.log(np.diag(cfc[0])).sum())
    return total


def _assemble_messm_elbo(params: MessmParams, datasets, effects, moments) -> float:
    total = 0.0
    for D, eff, mom in zip(datasets, effects, moments):
        total += _subject_data_term(params, D, eff, mom)
        total += _subject_trans_term(params, eff, mom)
        total += _subject_init_term(params, mom)
        total += gaussian_chain_entropy(mom)
        total -= gaussian_kl(eff.q_g, params.Sigma_g, params.mu_g)
        total -= gaussian_kl(eff.q_h, params.Sigma_h, params.mu_h)
    return total


def anchored_elbo_messm(params: MessmParams, dataset, effects, anchors_g, anchors_h) -> float:
    """Bound value with q(U) pinned at the anchors (one smoother per subject)."""
    datasets = [np.asarray(D, dtype=float) for D in dataset]
    moments = [
        anchored_smoother(params, D, anchors_g[i], anchors_h[i]) for i, D in enumerate(datasets)
    ]
    return _assemble_messm_elbo(params, datasets, effects, moments)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def m_step_messm(params: MessmParams, datasets, effects, moments) -> MessmParams:
    """Closed-form updates for effect priors, initial state, and noise."""
    n = len(datasets)
    p, q = params.p, params.q
    mu_g = np.mean([e.q_g.nu for e in effects], axis=0)
    Sigma_g = np.zeros_like(params.Sigma_g)
    for e in effects:
        dev = e.q_g.nu - mu_g
        Sigma_g += e.q_g.Omega + np.outer(dev, dev)
    Sigma_g = symmetrize(Sigma_g / n)
    mu_h = np.mean([e.q_h.nu for e in effects], axis=0)
    Sigma_h = np.zeros_like(params.Sigma_h)
    for e in effects:
        dev = e.q_h.nu - mu_h
        Sigma_h += e.q_h.Omega + np.outer(dev, dev)
    Sigma_h = symmetrize(Sigma_h / n)

    m0 = np.mean([mom.m_hat[0] for mom in moments], axis=0)
    P0 = np.zeros((q, q))
    for mom in moments:
        dev = mom.m_hat[0] - m0
        P0 += mom.P_hat[0] + np.outer(dev, dev)
    P0 = symmetrize(P0 / n)

    total_T = sum(D.shape[0] for D in datasets)
    r = np.zeros(p)
    for D, eff, mom in zip(datasets, effects, moments):
        r += _row_residual_sq(p, q, D, eff, mom)
    r = np.maximum(r / total_T, 1e-10)
    return MessmParams(
        mu_g=mu_g, Sigma_g=Sigma_g, mu_h=mu_h, Sigma_h=Sigma_h, R_diag=r, m0=m0, P0=P0
    )


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def fit_messm(
    dataset,
    init: MessmParams,
    config: AvemConfig | None = None,
    sign_align: bool = True,
) -> FitReport:
    """Anchored variational EM for the mixed state-space model.

    Anchors start at the prior means (mu_g, mu_h) and follow the variational
    means afterwards: one Kalman smoother pass per subject per iteration.
    With sign_align=True each subject is flipped onto the group loading's
    column orientation whenever that improves its prior-coupled terms.
    """
    config = config or AvemConfig()
    params = init
    datasets = []
    for i, D in enumerate(dataset):
        D = np.asarray(D, dtype=float)
        if D.ndim != 2 or D.shape[1] != params.p or D.shape[0] < 2:
            raise ValueError(f"subject {i} data has shape {D.shape}, expected (T_i>=2, {params.p})")
        if not np.all(np.isfinite(D)):
            raise ValueError(f"subject {i} data contains non-finite entries")
        datasets.append(D)
    if not datasets:
        raise ValueError("dataset is empty")
    n = len(datasets)
    start = time.perf_counter()
    anchors_g = np.tile(params.mu_g, (n, 1))
    anchors_h = np.tile(params.mu_h, (n, 1))
    effects = [
        SubjectEffects(
            q_g=QFactor(nu=params.mu_g.copy(), Omega=params.Sigma_g.copy()),
            q_h=QFactor(nu=params.mu_h.copy(), Omega=params.Sigma_h.copy()),
        )
        for _ in range(n)
    ]
    trace: list[float] = []
    converged = False
    n_flips = 0
    for it in range(config.max_iter):
        anchors_g = np.stack([e.q_g.nu for e in effects])
        anchors_h = np.stack([e.q_h.nu for e in effects])
        moments = [
            anchored_smoother(params, datasets[i], anchors_g[i], anchors_h[i]) for i in range(n)
        ]
        effects = [
            SubjectEffects(
                q_g=update_q_g(params, moments[i]),
                q_h=update_q_h(params, datasets[i], moments[i]),
            )
            for i in range(n)
        ]
        if sign_align:
            for i in range(n):
                effects[i], moments[i], flipped = sign_align_subject(params, effects[i], moments[i])
                n_flips += int(flipped)
        params = m_step_messm(params, datasets, effects, moments)
        elbo = _assemble_messm_elbo(params, datasets, effects, moments)
        if not np.isfinite(elbo):
            raise NumericalError(f"objective became non-finite at iteration {it + 1}")
        trace.append(elbo)
        if it >= 1 and rel_change(trace[-2], trace[-1]) < config.rel_tol:
            converged = True
            break
    f_hat = np.hstack(
        [np.stack([e.q_g.nu for e in effects]), np.stack([e.q_h.nu for e in effects])]
    )
    return FitReport(
        params=params,
        q_factors=effects,
        anchors=np.hstack([anchors_g, anchors_h]),
        elbo_trace=np.asarray(trace),
        n_iter=len(trace),
        wall_time_seconds=time.perf_counter() - start,
        f_hat=f_hat,
        extra={"converged": converged, "n_sign_flips": n_flips, "sign_align": sign_align},
    )


# ---------------------------------------------------------------------------
# homogeneous (no-effect) EM: initializer and small-variance reference
# ---------------------------------------------------------------------------

def fit_reduced_messm(
    dataset,
    init: LgssmSpec,
    max_iter: int = 100,
    rel_tol: float = 1e-8,
) -> tuple[LgssmSpec, np.ndarray]:
    """Exact EM for the homogeneous model shared by all subjects.

    This is the Sigma_g = Sigma_h = 0 limit of the mixed model; the traced
    observed log-likelihood is exactly monotone.  Returns the final spec and
    the trace.
    """
    datasets = [np.asarray(D, dtype=float) for D in dataset]
    spec = init
    q, p = init.q, init.p
    trace: list[float] = []
    for _ in range(max_iter):
        moments = []
        ll = 0.0
        for D in datasets:
            filt = kalman_filter(spec, D)
            ll += filt.loglik
            moments.append(rts_smoother(spec, filt))
        trace.append(ll)

        Q_past = sum(mom.Q_hat[:-1].sum(axis=0) for mom in moments)
        Q_lag = sum(mom.Q_lag.sum(axis=0) for mom in moments)
        G = np.linalg.solve(Q_past.T, Q_lag.T).T

        Q_all = sum(mom.Q_hat.sum(axis=0) for mom in moments)
        cross = sum(D.T @ mom.m_hat for D, mom in zip(datasets, moments))  # (p, q)
        H = np.zeros((p, q))
        for j in range(p):
            w = min(j + 1, q)
            H[j, :w] = np.linalg.solve(Q_all[:w, :w], cross[j, :w])

        total_T = sum(D.shape[0] for D in datasets)
        r = np.zeros(p)
        for D, mom in zip(datasets, moments):
            fitted = mom.m_hat @ H.T
            hqh_diag = np.einsum("pa,tab,pb->tp", H, mom.Q_hat, H)
            r += (D**2).sum(axis=0) - 2.0 * (D * fitted).sum(axis=0) + hqh_diag.sum(axis=0)
        r = np.maximum(r / total_T, 1e-10)

        m0 = np.mean([mom.m_hat[0] for mom in moments], axis=0)
        P0 = np.zeros((q, q))
        for mom in moments:
            dev = mom.m_hat[0] - m0
            P0 += mom.P_hat[0] + np.outer(dev, dev)
        P0 = symmetrize(P0 / len(moments))

        spec = LgssmSpec(G=G, H=H, R=np.diag(r), m0=m0, P0=P0)
        if len(trace) >= 2 and rel_change(trace[-2], trace[-1]) < rel_tol:
            break
    return spec, np.asarray(trace)


def _floored_cov(X: np.ndarray, floor: float) -> np.ndarray:
    """Sample covariance of rows with eigenvalues clamped below by floor."""
    C = np.atleast_2d(np.cov(X.T, bias=True)) if X.shape[0] > 1 else np.zeros((X.shape[1],) * 2)
    C = symmetrize(C)
    w, V = np.linalg.eigh(C)
    return symmetrize(V @ np.diag(np.maximum(w, floor)) @ V.T)


def default_init_messm(
    dataset,
    q: int,
    reduced_iters: int = 60,
    subject_iters: int = 40,
    cov_floor: float = 1e-3,
) -> MessmParams:
    """Deterministic starting point for the mixed fit.

    A pooled homogeneous EM run supplies the noise and initial-state blocks.
    The effect priors are moment-matched from per-subject homogeneous fits
    (each cold-started from the same neutral spec and sign-aligned onto the
    pooled loading), which keeps every subject's latent scale pinned by its
    own unit transition noise instead of the pooled blur.
    """
    datasets = [np.asarray(D, dtype=float) for D in dataset]
    p = datasets[0].shape[1]
    H0 = np.zeros((p, q))
    for c in range(q):
        H0[c, c] = 1.0
        H0[c + 1:, c] = 0.1
    # near-unit-root subject draws blow |y| up by orders of magnitude, hijack
    # every pooled least-squares step, and send their own cold fits into
    # numerical collapse, so the heuristics run on subjects of typical scale
    scales = np.array([np.median(np.abs(D)) for D in datasets])
    core = [D for D, s in zip(datasets, scales) if s <= 20.0 * np.median(scales)]
    pooled_var = np.vstack(core).var(axis=0)
    spec0 = LgssmSpec(
        G=0.3 * np.eye(q),
        H=H0,
        R=np.diag(np.maximum(pooled_var / 2.0, 1e-3)),
        m0=np.zeros(q),
        P0=np.eye(q),
    )
    spec, _ = fit_reduced_messm(core, spec0, max_iter=reduced_iters)
    g_rows, h_rows = [], []
    for D in core:
        try:
            sub, _ = fit_reduced_messm([D], spec0, max_iter=subject_iters)
        except NumericalError:
            continue
        flip = np.where(np.einsum("pc,pc->c", sub.H, spec.H) < 0.0, -1.0, 1.0)
        F = np.diag(flip)
        g_rows.append(vec(F @ sub.G @ F))
        h_rows.append(vecl(sub.H * flip[None, :]))
    g_rows = np.stack(g_rows)
    h_rows = np.stack(h_rows)
    # individual cold fits can still run away, so rows far from the median
    # estimate are dropped before taking means
    rows = np.hstack([g_rows, h_rows])
    dev = np.linalg.norm(rows - np.median(rows, axis=0), axis=1)
    cut = 10.0 * np.median(dev)
    keep = dev <= cut if cut > 0.0 else np.ones(len(rows), dtype=bool)
    return MessmParams(
        mu_g=g_rows[keep].mean(axis=0),
        Sigma_g=_floored_cov(g_rows[keep], cov_floor),
        mu_h=h_rows[keep].mean(axis=0),
        Sigma_h=_floored_cov(h_rows[keep], cov_floor),
        R_diag=np.diag(spec.R).copy(),
        m0=spec.m0.copy(),
        P0=spec.P0.copy(),
    )
