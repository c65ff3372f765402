"""Gauss-Hermite rules rescaled for Gaussian expectations."""

from __future__ import annotations

import numpy as np


def gauss_hermite_standard(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights so that E[g(Z)] ~ sum w_j g(x_j) for Z ~ N(0, 1)."""
    if n < 1:
        raise ValueError("need at least one node")
    x, w = np.polynomial.hermite.hermgauss(n)
    return x * np.sqrt(2.0), w / np.sqrt(np.pi)


def gauss_hermite_scaled(n: int, mean: float, var: float) -> tuple[np.ndarray, np.ndarray]:
    """Rule for E[g(F)] with F ~ N(mean, var), var >= 0."""
    if var < 0:
        raise ValueError("variance must be nonnegative")
    x, w = gauss_hermite_standard(n)
    return mean + np.sqrt(var) * x, w


def tensor_grid(n_per_dim: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product rule for N(0, I_d): nodes (n^d, d), weights (n^d,)."""
    if n_per_dim**d > 1_000_000:
        raise ValueError(f"tensor rule with {n_per_dim}^{d} nodes refused")
    x, w = gauss_hermite_standard(n_per_dim)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.ones(n_per_dim**d)
    for wg in wgrids:
        weights = weights * wg.reshape(-1)
    return nodes, weights
