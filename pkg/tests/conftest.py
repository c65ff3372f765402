"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from avem.hmm import ChainParams


def random_chain(rng: np.random.Generator, K: int) -> ChainParams:
    """Random irreducible-ish chain with strictly positive entries."""
    pi = rng.dirichlet(np.full(K, 2.0))
    Gamma = rng.dirichlet(np.full(K, 2.0), size=K)
    return ChainParams(pi=pi, Gamma=Gamma)


def random_log_e(rng: np.random.Generator, T: int, K: int, scale: float = 2.0) -> np.ndarray:
    return rng.normal(scale=scale, size=(T, K))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240815)
