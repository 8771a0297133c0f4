"""Penalized M-step for the loading matrix: TLP-weighted consensus ADMM.

The bilinear subproblem in U is split with an auxiliary copy U* (consensus
constraint U = U*) plus sparsity variables Z, Z*. Each half-update is an
L x L linear solve; Z and Z* are elementwise soft-thresholds with weights
frozen at the previous EM iterate (one-step linearization of the truncated
lasso). A dead ADMM run (non-finite values or a rising objective tail)
falls back to the incoming iterate so the outer EM stays well-defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def tlp_weights(U_prev, tau):
    """Linearized truncated-lasso weights: (1/tau) * 1{|u| <= tau}."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    U_prev = np.asarray(U_prev, dtype=float)
    return np.where(np.abs(U_prev) <= tau, 1.0 / tau, 0.0)


def soft_threshold(x, kappa):
    """sign(x) * max(|x| - kappa, 0); kappa may be an array of thresholds."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)


@dataclass
class UStepSufficientStats:
    """Data aggregates the ADMM needs; assembled once per EM iteration.

    A2 = sum_ij w_ij a_ij a_ij^T, F[l] = sum_ij w_ij a_ijl Y_ij,
    Qbar = weighted average posterior covariance, w_sum = sum_ij w_ij,
    y_fro_w = sum_ij w_ij ||Y_ij||_F^2. The subject weight is
    w_ij = 1/(2 phi2_i): the Frobenius norm counts every off-diagonal pair
    twice, so this is the scale at which the smooth term matches the
    vectorized likelihood (and at which the log(n) penalty has the strength
    that delivers the intended support recovery).
    """

    A2: np.ndarray
    F: np.ndarray
    Qbar: np.ndarray
    w_sum: float
    y_fro_w: float
    w_mean: float


def build_ustep_stats(dataset, a_hat, Q, phi2):
    a_hat = np.asarray(a_hat, dtype=float)
    w = 0.5 / np.asarray(phi2, dtype=float)[dataset.sites]
    wa = w[:, None] * a_hat
    A2 = wa.T @ a_hat
    F = np.tensordot(wa.T, dataset.matrices, axes=1)
    w_sum = float(np.sum(w))
    Qbar = np.zeros_like(np.asarray(Q)[0])
    for i, n_i in enumerate(dataset.site_sizes):
        Qbar += (0.5 * n_i / phi2[i]) * Q[i]
    Qbar /= w_sum
    y_fro_w = float(w @ np.einsum("nvw,nvw->n", dataset.matrices, dataset.matrices))
    return UStepSufficientStats(A2=A2, F=F, Qbar=Qbar, w_sum=w_sum,
                                y_fro_w=y_fro_w, w_mean=float(np.mean(w)))


def _cross_term(F, A, B):
    # sum_l A[:, l]^T F[l] B[:, l]
    return float(np.einsum("vl,lvw,wl->", A, F, B))


def smooth_objective(U, U_star, stats):
    """f(U, U*): the quadratic part of the split objective."""
    cross = _cross_term(stats.F, U, U_star)
    gram = U_star.T @ U_star
    quad = float(np.sum(stats.A2 * (gram * (U.T @ U))))
    A = U_star.T @ U
    trace = stats.w_sum * float(np.sum((A * A) * stats.Qbar))
    return 0.5 * stats.y_fro_w - cross + 0.5 * quad + 0.5 * trace


def unpenalized_objective(U, U_star, dataset, a_hat, Q, phi2):
    """Evaluate the smooth objective on raw data (monitoring and tests).

    Passing U_star = U and halving gives the unsplit objective value whose
    minimizer the lambda = 0 path must match.
    """
    stats = build_ustep_stats(dataset, a_hat, Q, phi2)
    return smooth_objective(np.asarray(U, float), np.asarray(U_star, float), stats)


def assemble_u_system(U_star, stats, rho, eta, Z, W, Lambda):
    """Linear system of the U half-update: U K = RHS.

    K = A2 (x) (U*^T U*) + (rho+eta) I + w_sum (U*^T U* (x) Qbar), where (x)
    is the elementwise product; the Hadamard form of the first term is exact
    because diag(a) M diag(a) = (a a^T) (x) M.
    """
    gram = U_star.T @ U_star
    L = gram.shape[0]
    K = stats.A2 * gram + (rho + eta) * np.eye(L) + stats.w_sum * (gram * stats.Qbar)
    H = np.einsum("lvw,wl->vl", stats.F, U_star)
    rhs = H + rho * (Z - W) + eta * (U_star - Lambda)
    return K, rhs


@dataclass
class AdmmState:
    """Working variables of the consensus ADMM (scaled dual form)."""

    U: np.ndarray
    U_star: np.ndarray
    Z: np.ndarray
    Z_star: np.ndarray
    W: np.ndarray
    W_star: np.ndarray
    Lambda: np.ndarray
    rho: float
    eta: float
    lam: float
    C: np.ndarray
    C_star: np.ndarray


@dataclass
class AdmmInfo:
    converged: bool
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    fell_back: bool = False


_TAIL_SLACK = 1e-8
_TAIL_LEN = 10
_STALL_CHECK = 50


def _tail_flat(objectives):
    tail = objectives[-_TAIL_LEN:]
    return all(cur - prev <= _TAIL_SLACK * (1.0 + abs(prev))
               for prev, cur in zip(tail[:-1], tail[1:]))


def admm_solve(U_init, dataset, a_hat, Q, phi2, lam, tau, admm=None):
    """Solve the penalized loading subproblem; returns (U, AdmmInfo).

    ``lam`` is the per-side penalty weight. Truncated-lasso weights are
    computed once from ``U_init`` (the previous EM iterate) and kept fixed
    across ADMM iterations. The returned matrix is the symmetrized consensus
    (U + U*)/2 with exact zeros wherever both Z and Z* are zero.
    """
    from .datatypes import AdmmConfig

    if lam < 0:
        raise ValueError("lam must be nonnegative")
    cfg = admm if admm is not None else AdmmConfig()
    U0 = np.asarray(U_init, dtype=float)
    V, L = U0.shape
    with np.errstate(over="ignore", invalid="ignore"):
        stats = build_ustep_stats(dataset, a_hat, Q, phi2)

    # default penalty parameter tracks the data-term curvature (~diag of A2),
    # not just the weights; a rho far below it makes the dual steps crawl
    curvature = float(np.trace(stats.A2)) / max(L, 1)
    rho = cfg.rho if cfg.rho is not None else max(1.0, curvature)
    eta = cfg.eta if cfg.eta is not None else max(1.0, curvature)
    primal_tol = cfg.primal_tol if cfg.primal_tol is not None else 1e-6 * np.sqrt(V * L)
    dual_tol = cfg.dual_tol if cfg.dual_tol is not None else 1e-6 * np.sqrt(V * L)

    C = tlp_weights(U0, tau)
    st = AdmmState(U=U0.copy(), U_star=U0.copy(), Z=U0.copy(), Z_star=U0.copy(),
                   W=np.zeros_like(U0), W_star=np.zeros_like(U0), Lambda=np.zeros_like(U0),
                   rho=rho, eta=eta, lam=lam, C=C, C_star=C.copy())
    thresh = (lam / rho) * st.C
    thresh_star = (lam / rho) * st.C_star

    with np.errstate(over="ignore", invalid="ignore"):  # divergence handled by fallback
        return _admm_iterate(st, stats, cfg, rho, eta, lam, thresh, thresh_star,
                             primal_tol, dual_tol, U0)


def _admm_iterate(st, stats, cfg, rho, eta, lam, thresh, thresh_star,
                  primal_tol, dual_tol, U0):
    L = st.U.shape[1]
    objectives = []
    converged = False
    primal = dual = np.inf
    stall_primal = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        K, rhs = assemble_u_system(st.U_star, stats, rho, eta, st.Z, st.W, st.Lambda)
        st.U = np.linalg.solve(K, rhs.T).T

        gram = st.U.T @ st.U
        K_star = stats.A2 * gram + (rho + eta) * np.eye(L) + stats.w_sum * (gram * stats.Qbar)
        H_star = np.einsum("lvw,wl->vl", stats.F, st.U)
        rhs_star = H_star + rho * (st.Z_star - st.W_star) + eta * (st.U + st.Lambda)
        st.U_star = np.linalg.solve(K_star, rhs_star.T).T

        Z_prev, Z_star_prev = st.Z, st.Z_star
        st.Z = soft_threshold(st.U + st.W, thresh)
        st.Z_star = soft_threshold(st.U_star + st.W_star, thresh_star)

        st.W = st.W + st.U - st.Z
        st.W_star = st.W_star + st.U_star - st.Z_star
        st.Lambda = st.Lambda + st.U - st.U_star

        primal = max(np.linalg.norm(st.U - st.Z), np.linalg.norm(st.U_star - st.Z_star),
                     np.linalg.norm(st.U - st.U_star))
        dual = max(np.linalg.norm(st.Z - Z_prev), np.linalg.norm(st.Z_star - Z_star_prev))

        if it % _STALL_CHECK == 0:
            # a stalled residual signals an alternation limit cycle; heavier
            # anchoring damps it (scaled duals shrink with the penalty raise)
            if primal > 0.9 * stall_primal:
                rho, eta = 2.0 * rho, 2.0 * eta
                st.rho, st.eta = rho, eta
                st.W, st.W_star, st.Lambda = 0.5 * st.W, 0.5 * st.W_star, 0.5 * st.Lambda
                thresh, thresh_star = 0.5 * thresh, 0.5 * thresh_star
            stall_primal = primal

        obj = (smooth_objective(st.U, st.U_star, stats)
               + lam * float(np.sum(st.C * np.abs(st.Z)))
               + lam * float(np.sum(st.C_star * np.abs(st.Z_star))))
        if not np.isfinite(obj) or not np.isfinite(primal):
            return U0.copy(), AdmmInfo(False, it, float(primal), float(dual),
                                       float(obj), fell_back=True)
        objectives.append(obj)

        # converged means small residuals AND a settled objective: the value may
        # legitimately climb while the duals push the iterate onto the sparse
        # facet, so a still-moving tail postpones the declaration
        if primal < primal_tol and dual < dual_tol and _tail_flat(objectives):
            converged = True
            break

    U_out = 0.5 * (st.U + st.U_star)
    U_out[(st.Z == 0.0) & (st.Z_star == 0.0)] = 0.0
    return U_out, AdmmInfo(converged, it, float(primal), float(dual), float(objectives[-1]))
