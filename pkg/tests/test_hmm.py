"""Forward-backward core against path-enumeration oracles and invariants."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avem.base import NumericalError
from avem.hmm import (
    ChainParams,
    backward_pass,
    conditional_log_marginal,
    forward_pass,
    forward_pass_count,
    posterior_entropy,
    posteriors_batch,
    reset_forward_pass_count,
    state_posteriors,
)
from avem.oracles import enumerate_chain_posteriors

from conftest import random_chain, random_log_e


def run_fb(log_e, chain):
    la = forward_pass(log_e, chain)
    lb = backward_pass(log_e, chain)
    return state_posteriors(la, lb, chain, log_e)


class TestTrivialValues:
    def test_forward_single_step_is_prior_times_emission(self):
        chain = ChainParams(pi=np.array([0.5, 0.5]), Gamma=np.array([[0.5, 0.5], [0.5, 0.5]]))
        log_e = np.zeros((1, 2))  # e == 1
        la = forward_pass(log_e, chain)
        np.testing.assert_allclose(np.exp(la[0]), [0.5, 0.5], atol=1e-15)

    def test_backward_uniform_chain_constant_emission(self):
        K, T, c = 3, 5, 0.7
        chain = ChainParams(pi=np.full(K, 1 / K), Gamma=np.full((K, K), 1 / K))
        log_e = np.full((T, K), np.log(c))
        lb = backward_pass(log_e, chain)
        for t in range(T):
            np.testing.assert_allclose(np.exp(lb[t]), c ** (T - 1 - t), rtol=1e-12)

    def test_single_state_chain(self):
        chain = ChainParams(pi=np.array([1.0]), Gamma=np.array([[1.0]]))
        log_e = np.array([[-1.0], [-2.0], [-0.5]])
        post = run_fb(log_e, chain)
        np.testing.assert_allclose(post.zeta, 1.0, atol=1e-15)
        assert post.log_marginal == pytest.approx(-3.5, abs=1e-12)
        assert posterior_entropy(post) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_everything_entropy_is_T_log_K(self):
        K, T = 2, 6
        chain = ChainParams(pi=np.full(K, 0.5), Gamma=np.full((K, K), 0.5))
        log_e = np.zeros((T, K))
        post = run_fb(log_e, chain)
        assert posterior_entropy(post) == pytest.approx(T * np.log(K), rel=1e-12)


class TestEnumerationOracle:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(1000 + seed)
        K = int(rng.integers(1, 4))
        T = int(rng.integers(1, 7))
        chain = random_chain(rng, K)
        log_e = random_log_e(rng, T, K)
        post = run_fb(log_e, chain)
        zeta_o, xi_o, logm_o, ent_o = enumerate_chain_posteriors(log_e, chain)
        np.testing.assert_allclose(post.zeta, zeta_o, atol=1e-10)
        np.testing.assert_allclose(post.xi, xi_o, atol=1e-10)
        assert post.log_marginal == pytest.approx(logm_o, abs=1e-10)
        assert posterior_entropy(post) == pytest.approx(ent_o, abs=1e-9)

    def test_entropy_with_sparse_transitions(self):
        # zero transition entries exercise the 0 log 0 conventions
        chain = ChainParams(pi=np.array([1.0, 0.0]), Gamma=np.array([[0.0, 1.0], [1.0, 0.0]]))
        rng = np.random.default_rng(7)
        log_e = random_log_e(rng, 4, 2)
        post = run_fb(log_e, chain)
        zeta_o, xi_o, logm_o, ent_o = enumerate_chain_posteriors(log_e, chain)
        np.testing.assert_allclose(post.zeta, zeta_o, atol=1e-12)
        np.testing.assert_allclose(post.xi, xi_o, atol=1e-12)
        # the deterministic alternating chain has a single possible path
        assert posterior_entropy(post) == pytest.approx(0.0, abs=1e-10)
        assert ent_o == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_marginal_consistency(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    T = int(rng.integers(2, 7))
    chain = random_chain(rng, K)
    post = run_fb(random_log_e(rng, T, K), chain)
    np.testing.assert_allclose(post.zeta.sum(axis=1), 1.0, atol=1e-10)
    # marginalizing xi recovers zeta on both sides of each pair
    np.testing.assert_allclose(post.xi.sum(axis=2), post.zeta[:-1], atol=1e-10)
    np.testing.assert_allclose(post.xi.sum(axis=1), post.zeta[1:], atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_shift_identity(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    T = int(rng.integers(1, 7))
    chain = random_chain(rng, K)
    log_e = random_log_e(rng, T, K)
    shifts = rng.normal(scale=3.0, size=T)
    post = run_fb(log_e, chain)
    post_s = run_fb(log_e + shifts[:, None], chain)
    assert post_s.log_marginal == pytest.approx(post.log_marginal + shifts.sum(), abs=1e-12)
    np.testing.assert_allclose(post_s.zeta, post.zeta, atol=1e-8)
    np.testing.assert_allclose(post_s.xi, post.xi, atol=1e-8)


def test_extreme_shift_stability(rng):
    # +-500 shifts per time step must leave posteriors essentially unchanged
    K, T = 3, 6
    chain = random_chain(rng, K)
    log_e = random_log_e(rng, T, K)
    shifts = rng.choice([-500.0, 500.0], size=T)
    post = run_fb(log_e, chain)
    post_s = run_fb(log_e + shifts[:, None], chain)
    np.testing.assert_allclose(post_s.zeta, post.zeta, atol=1e-8)
    np.testing.assert_allclose(post_s.xi, post.xi, atol=1e-8)
    assert post_s.log_marginal == pytest.approx(post.log_marginal + shifts.sum(), rel=1e-12)


class TestErrors:
    def test_non_finite_emission_rejected(self):
        chain = ChainParams(pi=np.array([0.5, 0.5]), Gamma=np.full((2, 2), 0.5))
        log_e = np.zeros((3, 2))
        log_e[1, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            forward_pass(log_e, chain)
        log_e[1, 0] = -np.inf
        with pytest.raises(ValueError, match="non-finite"):
            backward_pass(log_e, chain)

    def test_dimension_mismatch_rejected(self):
        chain = ChainParams(pi=np.array([0.5, 0.5]), Gamma=np.full((2, 2), 0.5))
        with pytest.raises(ValueError, match="shape"):
            forward_pass(np.zeros((3, 5)), chain)

    def test_degenerate_likelihood_reported(self):
        chain = ChainParams(pi=np.array([0.5, 0.5]), Gamma=np.full((2, 2), 0.5))
        log_e = np.zeros((2, 2))
        la = np.full((2, 2), -np.inf)
        lb = np.zeros((2, 2))
        with pytest.raises(NumericalError, match="degenerate"):
            state_posteriors(la, lb, chain, log_e)
        with pytest.raises(NumericalError, match="degenerate"):
            conditional_log_marginal(la)

    def test_invalid_chain_rejected(self):
        with pytest.raises(ValueError):
            ChainParams(pi=np.array([0.6, 0.6]), Gamma=np.full((2, 2), 0.5))
        with pytest.raises(ValueError):
            ChainParams(pi=np.array([0.5, 0.5]), Gamma=np.array([[0.9, 0.2], [0.5, 0.5]]))
        with pytest.raises(ValueError):
            ChainParams(pi=np.array([-0.5, 1.5]), Gamma=np.full((2, 2), 0.5))


def test_forward_pass_counter(rng):
    chain = random_chain(rng, 2)
    log_e = random_log_e(rng, 4, 2)
    reset_forward_pass_count()
    forward_pass(log_e, chain)
    assert forward_pass_count() == 1
    posteriors_batch(np.stack([log_e] * 5), chain)
    assert forward_pass_count() == 6


def test_batch_matches_per_sequence(rng):
    chain = random_chain(rng, 3)
    stack = np.stack([random_log_e(rng, 5, 3) for _ in range(4)])
    zeta, xi, logm = posteriors_batch(stack, chain)
    for b in range(4):
        post = run_fb(stack[b], chain)
        np.testing.assert_allclose(zeta[b], post.zeta, atol=1e-14)
        np.testing.assert_allclose(xi[b], post.xi, atol=1e-14)
        assert logm[b] == pytest.approx(post.log_marginal, abs=1e-13)
