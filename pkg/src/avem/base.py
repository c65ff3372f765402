"""Shared containers, configuration, and error types."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a computation degenerates (underflow, singular solve, non-PD matrix)."""


class DegeneracyWarning(UserWarning):
    """Emitted when an M-step hits an empty state or transition row and falls back."""


@dataclass
class QFactor:
    """Gaussian variational factor q(f) = N(nu, Omega) for one subject."""

    nu: np.ndarray     # (d,)
    Omega: np.ndarray  # (d, d), symmetric positive definite

    def __post_init__(self) -> None:
        self.nu = np.asarray(self.nu, dtype=float)
        self.Omega = np.asarray(self.Omega, dtype=float)
        d = self.nu.shape[0]
        if self.nu.ndim != 1 or self.Omega.shape != (d, d):
            raise ValueError(f"QFactor shape mismatch: nu {self.nu.shape}, Omega {self.Omega.shape}")


@dataclass
class AvemConfig:
    """Knobs shared by the iterative fitters.

    e_step_method: "auto" resolves to "closed_form" when the emission model
    supports it and to "laplace" otherwise; "quadrature" is always opt-in.
    """

    max_iter: int = 500
    rel_tol: float = 1e-6
    e_step_method: str = "auto"   # auto | closed_form | laplace | quadrature
    n_quad: int = 9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.rel_tol >= 0:
            raise ValueError("rel_tol must be nonnegative")
        if self.n_quad < 1:
            raise ValueError("n_quad must be >= 1")
        allowed = {"auto", "closed_form", "laplace", "quadrature"}
        if self.e_step_method not in allowed:
            raise ValueError(f"e_step_method must be one of {sorted(allowed)}")


@dataclass
class FitReport:
    """Outcome of one model fit.

    elbo_trace holds one objective value per completed iteration, so
    len(elbo_trace) == n_iter.  f_hat stacks the per-subject random-effect
    point estimates used for scoring (variational means, or node-weighted
    posterior means for the exact-EM baselines).  extra carries
    method-specific things (grid factors, diagnostics).
    """

    params: Any
    q_factors: list[QFactor] | None
    anchors: np.ndarray | None       # (n, d) anchors from the final iteration
    elbo_trace: np.ndarray           # (n_iter,)
    n_iter: int
    wall_time_seconds: float
    f_hat: np.ndarray | None = None  # (n, d)
    extra: dict = field(default_factory=dict)


def rel_change(prev: float, new: float) -> float:
    """Relative change |new - prev| / max(|prev|, 1e-12) used in stopping rules."""
    return abs(new - prev) / max(abs(prev), 1e-12)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)
