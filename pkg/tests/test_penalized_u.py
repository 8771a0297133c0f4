import numpy as np
import pytest

import oracles
from slacc.datatypes import AdmmConfig, ConnectivityDataset, unvectorize_rows
from slacc.estep import posterior_moments
from slacc.penalized_u import (admm_solve, assemble_u_system, build_ustep_stats,
                               smooth_objective, soft_threshold, tlp_weights,
                               unpenalized_objective)


class TestTlpWeights:
    def test_small_entry_gets_inverse_width(self):
        assert tlp_weights(np.array([[0.2]]), 0.5)[0, 0] == pytest.approx(2.0)

    def test_large_entry_exempt(self):
        assert tlp_weights(np.array([[0.8]]), 0.5)[0, 0] == 0.0

    def test_default_width_arithmetic(self):
        from slacc.datatypes import FitConfig
        tau = FitConfig().default_tau(50, 5, 500)
        assert tau == pytest.approx(0.0525, abs=2e-4)

    def test_weight_support_complements_large_entries(self):
        rng = np.random.default_rng(0)
        U = rng.standard_normal((20, 3))
        tau = 0.7
        C = tlp_weights(U, tau)
        assert np.array_equal(C == 0.0, np.abs(U) > tau)

    def test_requires_positive_width(self):
        with pytest.raises(ValueError):
            tlp_weights(np.zeros((2, 2)), 0.0)


class TestSoftThreshold:
    def test_positive_shrink(self):
        assert soft_threshold(0.5, 0.3) == pytest.approx(0.2)

    def test_inside_band_is_zero(self):
        assert soft_threshold(-0.1, 0.3) == 0.0

    def test_zero_threshold_is_identity(self):
        x = np.linspace(-2, 2, 11)
        assert np.array_equal(soft_threshold(x, 0.0), x)

    def test_elementwise_thresholds(self):
        x = np.array([1.0, -1.0])
        k = np.array([0.25, 2.0])
        np.testing.assert_allclose(soft_threshold(x, k), [0.75, 0.0])


def _posterior_setup(seed, n=8, V=5, L=2, M=2, q=3):
    rng = np.random.default_rng(seed)
    theta = oracles.random_theta(V, L, q, M, rng)
    ds = oracles.random_dataset(n, V, q, M, rng)
    post = posterior_moments(theta, ds)
    return theta, ds, post


class TestSmoothObjective:
    def test_zero_scores_leave_weighted_data_energy(self):
        theta, ds, post = _posterior_setup(1)
        a0 = np.zeros_like(post.a_hat)
        Q0 = np.zeros_like(post.Q)
        val = unpenalized_objective(theta.U, theta.U, ds, a0, Q0, theta.phi2)
        expect = sum(np.sum(ds.matrices[j] ** 2) / (4 * theta.phi2[ds.sites[j]])
                     for j in range(ds.n))
        assert val == pytest.approx(expect, rel=1e-12)

    def test_perfect_rank1_fit_is_zero(self):
        u = np.array([0.6, 0.0, 0.8])
        Y = np.outer(u, u)[None]
        ds = ConnectivityDataset(Y, ["s"], np.zeros((1, 1)))
        a = np.array([[1.0]])
        Q = np.zeros((1, 1, 1))
        val = unpenalized_objective(u[:, None], u[:, None], ds, a, Q, np.array([1.0]))
        assert abs(val) < 1e-12

    def test_matches_literal_loop(self):
        rng = np.random.default_rng(2)
        theta, ds, post = _posterior_setup(2)
        for _ in range(5):
            U = rng.standard_normal(theta.U.shape)
            U_star = rng.standard_normal(theta.U.shape)
            got = unpenalized_objective(U, U_star, ds, post.a_hat, post.Q, theta.phi2)
            expect = oracles.smooth_u_objective_literal(U, U_star, ds, post.a_hat,
                                                        post.Q, theta.phi2)
            assert got == pytest.approx(expect, rel=1e-10)

    def test_monte_carlo_expectation(self):
        # the trace term is exactly E||Y - U diag(a + d) U^T||^2 over d ~ N(0, Q)
        rng = np.random.default_rng(3)
        V, L = 4, 2
        U = rng.standard_normal((V, L))
        Y = rng.standard_normal((V, V))
        Y = Y + Y.T
        a = rng.standard_normal(L)
        A = rng.standard_normal((L, L))
        Q = A @ A.T / 4
        ds = ConnectivityDataset(Y[None], ["s"], np.zeros((1, 1)))
        phi2 = np.array([1.0])
        val = unpenalized_objective(U, U, ds, a[None], Q[None], phi2)
        draws = []
        chol = np.linalg.cholesky(Q)
        for _ in range(20000):
            d = chol @ rng.standard_normal(L)
            R = Y - U @ np.diag(a + d) @ U.T
            draws.append(np.sum(R * R) / (4 * phi2[0]))
        mc = np.mean(draws)
        se = np.std(draws) / np.sqrt(len(draws))
        assert abs(val - mc) < 2 * se + 1e-9


class TestAssembleSystem:
    def test_single_subject_scalar_case(self):
        u_star = np.array([[0.3], [0.4]])
        Y = np.array([[[1.0, 0.5], [0.5, 2.0]]])
        ds = ConnectivityDataset(Y, ["s"], np.zeros((1, 1)))
        a = np.array([[1.5]])
        Qbar = np.array([[0.2]])
        phi2 = np.array([2.0])
        stats = build_ustep_stats(ds, a, Qbar[None], phi2)
        rho, eta = 1.3, 0.7
        Z = W = Lam = np.zeros((2, 1))
        K, rhs = assemble_u_system(u_star, stats, rho, eta, Z, W, Lam)
        w = 0.5 / phi2[0]
        sq = float(u_star[:, 0] @ u_star[:, 0])
        g = w * a[0, 0] ** 2 * sq
        expect_K = g + rho + eta + w * sq * Qbar[0, 0]
        assert K[0, 0] == pytest.approx(expect_K, rel=1e-12)
        expect_rhs = w * Y[0] @ u_star * a[0, 0] + eta * u_star
        np.testing.assert_allclose(rhs, expect_rhs, atol=1e-12)

    def test_zero_scores_zero_system(self):
        theta, ds, post = _posterior_setup(4)
        a0 = np.zeros_like(post.a_hat)
        stats = build_ustep_stats(ds, a0, post.Q, theta.phi2)
        K, rhs = assemble_u_system(theta.U, stats, 1.0, 1.0,
                                   np.zeros_like(theta.U), np.zeros_like(theta.U),
                                   np.zeros_like(theta.U))
        np.testing.assert_allclose(K, 2.0 * np.eye(theta.L)
                                   + stats.w_sum * (theta.U.T @ theta.U) * stats.Qbar,
                                   atol=1e-12)
        assert np.allclose(rhs, theta.U)  # only the eta*(U* - Lambda) term survives

    def test_columnwise_h_matches_literal_sum(self):
        theta, ds, post = _posterior_setup(5)
        stats = build_ustep_stats(ds, post.a_hat, post.Q, theta.phi2)
        U_star = np.random.default_rng(0).standard_normal(theta.U.shape)
        Z = W = Lam = np.zeros_like(theta.U)
        _, rhs = assemble_u_system(U_star, stats, 0.0, 0.0, Z, W, Lam)
        H_literal = np.zeros_like(theta.U)
        for j in range(ds.n):
            w = 0.5 / theta.phi2[ds.sites[j]]
            H_literal += w * ds.matrices[j] @ U_star @ np.diag(post.a_hat[j])
        np.testing.assert_allclose(rhs, H_literal, atol=1e-10)

    def test_hadamard_identity_for_g(self):
        rng = np.random.default_rng(6)
        theta, ds, post = _posterior_setup(6)
        stats = build_ustep_stats(ds, post.a_hat, post.Q, theta.phi2)
        M = rng.standard_normal((theta.L, theta.L))
        M = M @ M.T
        literal = np.zeros((theta.L, theta.L))
        for j in range(ds.n):
            w = 0.5 / theta.phi2[ds.sites[j]]
            Pi = np.diag(post.a_hat[j])
            literal += w * Pi @ M @ Pi
        np.testing.assert_allclose(stats.A2 * M, literal, atol=1e-12)


class TestAdmmSolve:
    def test_huge_penalty_annihilates(self):
        theta, ds, post = _posterior_setup(7)
        U, info = admm_solve(theta.U, ds, post.a_hat, post.Q, theta.phi2,
                             lam=1e6, tau=10.0, admm=AdmmConfig())
        assert np.all(U == 0.0)

    def test_noiseless_rank1_recovery(self):
        rng = np.random.default_rng(8)
        u = rng.standard_normal(5)
        u /= np.linalg.norm(u)
        Y = 3.0 * np.outer(u, u)
        ds = ConnectivityDataset(Y[None], ["s"], np.zeros((1, 1)))
        a = np.array([[3.0]])
        Q = np.zeros((1, 1, 1))
        start = (u + 0.05 * rng.standard_normal(5))[:, None]
        U, info = admm_solve(start, ds, a, Q, np.array([1.0]), lam=0.0, tau=0.1,
                             admm=AdmmConfig(max_iter=2000, primal_tol=1e-9, dual_tol=1e-9))
        assert info.converged
        assert np.linalg.norm(Y - U @ np.array([[3.0]]) @ U.T) < 1e-6

    def test_matches_gradient_descent_oracle_at_zero_penalty(self):
        rng = np.random.default_rng(9)
        theta, ds, post = _posterior_setup(9, n=10, V=5, L=2)
        start = theta.U + 0.01 * rng.standard_normal(theta.U.shape)
        U, info = admm_solve(start, ds, post.a_hat, post.Q, theta.phi2,
                             lam=0.0, tau=0.1, admm=AdmmConfig(max_iter=1000))
        assert info.converged
        U_gd = oracles.gd_minimize_unpenalized(U, ds, post.a_hat, post.Q, theta.phi2)
        assert np.linalg.norm(U - U_gd) < 1e-4

    def test_consensus_and_stationarity_at_zero_penalty(self):
        theta, ds, post = _posterior_setup(10, n=12, V=5, L=2)
        U, info = admm_solve(theta.U, ds, post.a_hat, post.Q, theta.phi2,
                             lam=0.0, tau=0.1, admm=AdmmConfig(max_iter=1000))
        assert info.converged
        assert info.primal_residual < 1e-6 * np.sqrt(U.size)
        eps = 1e-6
        g0 = unpenalized_objective(U, U, ds, post.a_hat, post.Q, theta.phi2)
        grad = np.zeros_like(U)
        for idx in np.ndindex(*U.shape):
            Up = U.copy()
            Up[idx] += eps
            gp = unpenalized_objective(Up, Up, ds, post.a_hat, post.Q, theta.phi2)
            grad[idx] = (gp - g0) / eps
        assert np.linalg.norm(grad) < 1e-3  # finite-difference noise floor

    def test_exact_zero_policy(self):
        theta, ds, post = _posterior_setup(11)
        U, info = admm_solve(theta.U, ds, post.a_hat, post.Q, theta.phi2,
                             lam=50.0, tau=2.0, admm=AdmmConfig())
        assert np.any(U == 0.0)
        assert U[U != 0].size == 0 or np.min(np.abs(U[U != 0])) > 0

    def test_objective_tail_flat_on_random_instances(self):
        for seed in range(5):
            theta, ds, post = _posterior_setup(20 + seed)
            U, info = admm_solve(theta.U, ds, post.a_hat, post.Q, theta.phi2,
                                 lam=1.0, tau=0.3, admm=AdmmConfig(max_iter=1000))
            assert info.converged and not info.fell_back

    def test_fallback_preserves_input_on_nonfinite(self):
        theta, ds, post = _posterior_setup(12)
        bad_a = post.a_hat.copy()
        bad_a[0, 0] = 1e160  # detonates the quadratic terms
        U, info = admm_solve(theta.U, ds, bad_a, post.Q, theta.phi2,
                             lam=0.0, tau=0.1, admm=AdmmConfig(max_iter=50))
        if info.fell_back:
            assert np.array_equal(U, theta.U)
