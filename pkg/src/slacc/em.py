"""Penalized EM driver: initialization, annealed loop, canonical form.

The fit runs in two phases. A warm start performs unpenalized EM from the
spectral initializer until the loadings stabilize (or a cap); the penalized
phase then ramps the penalty weight linearly from 0 to its ceiling over
``anneal_iters`` iterations and holds it there. Convergence is declared on
||U^(t) - U^(t-1)||_F, and only once the ramp has finished, so a still-rising
penalty cannot masquerade as non-convergence.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .datatypes import (ConnectivityDataset, DataValidationError, FitConfig,
                        NumericalFitError, ParameterSet, pattern_matrix, validate)
from .estep import posterior_moments
from .likelihood import PatternProjections, nll_parts
from .mstep import update_beta, update_phi2, update_sigma2
from .penalized_u import admm_solve

logger = logging.getLogger(__name__)

_UNIT_NORM_TOL = 1e-12
_SIGN_ENTRY_TOL = 1e-9


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    phase: str
    lam: float
    nll: float
    delta_u: float
    nnz: int
    admm_iterations: int
    admm_converged: bool
    admm_fell_back: bool


@dataclass(frozen=True)
class FitResult:
    theta: ParameterSet
    a_hat: np.ndarray
    Q: np.ndarray
    trace: tuple
    converged: bool
    iterations: int
    nll: float
    loglik_total: float
    config: FitConfig
    resolved: dict
    dropped_columns: int = 0


def _joint_diagonalize(mats, max_sweeps=50, tol=1e-12):
    """Orthogonal transform approximately diagonalizing a stack of symmetric
    matrices (Jacobi sweeps with the closed-form pairwise angle)."""
    A = np.array(mats, dtype=float)
    L = A.shape[1]
    R = np.eye(L)
    for _ in range(max_sweeps):
        biggest = 0.0
        for p in range(L - 1):
            for q in range(p + 1, L):
                h1 = A[:, p, p] - A[:, q, q]
                h2 = A[:, p, q] + A[:, q, p]
                G = np.array([[h1 @ h1, h1 @ h2], [h2 @ h1, h2 @ h2]])
                _, evecs = np.linalg.eigh(G)
                x, y = evecs[:, -1]
                if x < 0:
                    x, y = -x, -y
                r = np.hypot(x, y)
                if r <= 0:
                    continue
                c = np.sqrt((x + r) / (2 * r))
                s = y / np.sqrt(2 * r * (x + r))
                if abs(s) < tol:
                    continue
                biggest = max(biggest, abs(s))
                Mp, Mq = A[:, :, p].copy(), A[:, :, q].copy()
                A[:, :, p], A[:, :, q] = c * Mp + s * Mq, -s * Mp + c * Mq
                Mp, Mq = A[:, p, :].copy(), A[:, q, :].copy()
                A[:, p, :], A[:, q, :] = c * Mp + s * Mq, -s * Mp + c * Mq
                Rp, Rq = R[:, p].copy(), R[:, q].copy()
                R[:, p], R[:, q] = c * Rp + s * Rq, -s * Rp + c * Rq
        if biggest < 1e-10:
            break
    return R, A


def hosvd_init(dataset, L, seed=0):
    """Spectral initializer: top-L eigenvectors of sum_ij Y_ij Y_ij^T.

    This equals the leading left singular vectors of the region-mode
    unfolding of the stacked data tensor (the two region modes coincide by
    symmetry). The eigenbasis is then rotated within its span to jointly
    diagonalize the projected subject matrices: the eigen decomposition
    leaves the basis arbitrary up to rotation when the factor strengths
    overlap, and handing the EM a mixed basis parks it on a rotation saddle
    it can take hundreds of iterations to escape. Columns below numerical
    rank are padded with seeded random orthonormal completions. Sign
    convention: the largest-magnitude coordinate of each column is positive.
    """
    if L > dataset.V:
        raise DataValidationError(f"L={L} exceeds V={dataset.V}")
    if L == 0:
        return np.zeros((dataset.V, 0))
    T = dataset.matrices
    G = np.tensordot(T, T, axes=([0, 2], [0, 2]))
    eigvals, eigvecs = np.linalg.eigh(G)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    rank = int(np.sum(eigvals > max(eigvals[0], 0.0) * 1e-12)) if eigvals[0] > 0 else 0
    U0 = eigvecs[:, :min(L, rank)]
    if U0.shape[1] < L:
        warnings.warn(f"numerical rank {U0.shape[1]} below requested L={L}; "
                      "padding with random orthonormal columns")
        rng = np.random.default_rng(seed)
        extra = rng.standard_normal((dataset.V, L - U0.shape[1]))
        full, _ = np.linalg.qr(np.hstack([U0, extra]))
        U0 = full[:, :L]
    if L > 1:
        projected = np.einsum("vk,nvw,wl->nkl", U0, T, U0, optimize=True)
        R, diag = _joint_diagonalize(projected)
        strength = np.einsum("nll->l", diag * diag)
        order = np.argsort(strength)[::-1]
        U0 = (U0 @ R)[:, order]
    signs = np.sign(U0[np.argmax(np.abs(U0), axis=0), np.arange(L)])
    signs[signs == 0] = 1.0
    return U0 * signs


def anneal_schedule(t, config, lambda_max=None):
    """Penalty weight at penalized-phase iteration t: linear ramp then hold."""
    lam_max = lambda_max if lambda_max is not None else config.lambda_max
    if lam_max is None:
        raise ValueError("lambda_max must be resolved before scheduling")
    if t <= 0 or lam_max == 0.0:
        return 0.0
    if config.anneal_iters == 0:
        return lam_max
    return lam_max * min(1.0, t / config.anneal_iters)


def canonicalize(theta, a_hat=None):
    """Map parameters to the identifiable representative.

    Columns of U get unit norm (compensating B by c^2, sigma2 by c^4 and the
    scores by c^2), a positive leading entry (no compensation needed since
    u u^T is sign-invariant), and a sort by site-0 variance descending with
    ties broken by sparsity then column index. Zero columns are dropped with
    a warning.
    """
    U = np.array(theta.U, dtype=float)
    B = np.array(theta.B, dtype=float)
    sigma2 = np.array(theta.sigma2, dtype=float)
    a = None if a_hat is None else np.array(a_hat, dtype=float)

    norms = np.linalg.norm(U, axis=0)
    keep = norms > _UNIT_NORM_TOL
    if not np.all(keep):
        warnings.warn(f"dropping {int(np.sum(~keep))} zero loading column(s)")
        U, B, sigma2 = U[:, keep], B[:, keep], sigma2[:, keep]
        norms = norms[keep]
        if a is not None:
            a = a[:, keep]

    for l in range(U.shape[1]):
        c = norms[l]
        if abs(c - 1.0) > _UNIT_NORM_TOL:  # skip near-unit columns so the map is bit-stable
            U[:, l] /= c
            B[:, l] *= c ** 2
            sigma2[:, l] *= c ** 4
            if a is not None:
                a[:, l] *= c ** 2
        nz = np.flatnonzero(np.abs(U[:, l]) > _SIGN_ENTRY_TOL)
        if nz.size and U[nz[0], l] < 0:
            U[:, l] = -U[:, l]

    order = sorted(range(U.shape[1]),
                   key=lambda l: (-sigma2[0, l], int(np.count_nonzero(U[:, l])), l))
    U, B, sigma2 = U[:, order], B[:, order], sigma2[:, order]
    if a is not None:
        a = a[:, order]
    theta_c = ParameterSet(U=U, B=B, sigma2=sigma2, phi2=theta.phi2)
    return theta_c, a


def _initial_parameters(dataset, U0, floor):
    """Method-of-moments start: least-squares scores, OLS coefficients,
    per-site residual variances."""
    S = pattern_matrix(U0, dataset.diagonal_mode)
    StS = S.T @ S
    YS = dataset.vectors @ S
    L = U0.shape[1]
    a0, *_ = np.linalg.lstsq(StS, YS.T, rcond=None)
    a0 = a0.T
    X = dataset.covariates
    B0, *_ = np.linalg.lstsq(X, a0, rcond=None)
    resid = a0 - X @ B0
    M = dataset.n_sites
    sigma2 = np.empty((M, L))
    phi2 = np.empty(M)
    fit_sq = (dataset.vector_sq_norms
              - 2.0 * np.einsum("nl,nl->n", a0, YS)
              + np.einsum("nl,lk,nk->n", a0, StS, a0))
    for i, members in enumerate(dataset.site_members):
        sigma2[i] = np.mean(resid[members] ** 2, axis=0)
        phi2[i] = np.mean(fit_sq[members]) / dataset.p
    sigma2 = np.maximum(sigma2, floor)
    phi2 = np.maximum(phi2, floor)
    return ParameterSet(U=U0, B=B0, sigma2=sigma2, phi2=phi2)


def _relative_change(new, old):
    return float(np.linalg.norm(new - old) / (1.0 + np.linalg.norm(old)))


def _expected_fit_piece(dataset, proj, a_hat, Q, phi2):
    """Loading-dependent part of the expected complete-data objective,
    in the exact vector metric the likelihood uses."""
    fit_sq = (dataset.vector_sq_norms
              - 2.0 * np.einsum("nl,nl->n", a_hat, proj.YS)
              + np.einsum("nl,lk,nk->n", a_hat, proj.StS, a_hat))
    total = 0.0
    for i, members in enumerate(dataset.site_members):
        if len(members) == 0:
            continue
        total += (float(np.sum(fit_sq[members]))
                  + len(members) * float(np.sum(proj.StS * Q[i]))) / (2.0 * phi2[i])
    return total


def _rescale_columns(U, B, sigma2):
    """Unit-normalize loading columns, compensating B and sigma2.

    A pure reparameterization (the likelihood is flat along u -> c u,
    beta -> beta/c^2, sigma2 -> sigma2/c^4), applied every iteration: the
    linearized sparsity penalty is scale-sensitive, and without this the
    penalized iterates drift along the scale ridge (loadings shrink through
    the truncation width while the variances inflate without bound).
    """
    norms = np.linalg.norm(U, axis=0)
    scale = np.where(norms > 0, norms, 1.0)
    return U / scale, B * scale ** 2, sigma2 * scale ** 4


def fit(dataset, L, config=None, fix_U=None, force=False):
    """Run the penalized EM on a dataset with a fixed number of factors.

    Parameters
    ----------
    dataset : ConnectivityDataset
    L : number of latent factors (ignored when ``fix_U`` is given)
    config : FitConfig; ``lambda_max=0`` in the config disables the penalty
        entirely (single unpenalized phase)
    fix_U : optional V x L loading matrix held fixed throughout (only the
        regression/variance parameters and posterior moments iterate)
    force : proceed despite validation violations (they are logged)
    """
    config = config if config is not None else FitConfig()
    if fix_U is not None:
        fix_U = np.asarray(fix_U, dtype=float)
        L = fix_U.shape[1]
    report = validate(dataset, L)
    if not report.ok:
        if not force:
            raise DataValidationError(str(report))
        for v in report.violations:
            logger.warning("proceeding despite: %s", v)
    if L < 1:
        raise DataValidationError("fit requires at least one factor")

    n = dataset.n
    lambda_max = config.default_lambda_max(n)
    tau = config.default_tau(dataset.V, L, n)
    resolved = {
        "L": int(L), "tau": float(tau), "lambda_max": float(lambda_max),
        "em_tol": config.em_tol, "max_em_iter": config.max_em_iter,
        "anneal_iters": config.anneal_iters, "warmup_iters": config.warmup_iters,
        "variance_floor": config.variance_floor, "seed": config.seed,
        "fixed_U": fix_U is not None,
    }

    U0 = fix_U if fix_U is not None else hosvd_init(dataset, L, config.seed)
    theta = _initial_parameters(dataset, U0, config.variance_floor)

    trace = []
    converged = False
    last_nll = np.inf
    last_total = np.inf

    if fix_U is not None or lambda_max == 0.0:
        phases = [("warmup", config.max_em_iter, False)]
    else:
        phases = [("warmup", config.warmup_iters, False),
                  ("penalized", config.max_em_iter, True)]

    for phase, cap, penalized in phases:
        for t in range(1, cap + 1):
            lam_t = anneal_schedule(t, config, lambda_max) if penalized else 0.0
            proj = PatternProjections(theta.U, dataset)
            post = posterior_moments(theta, dataset, projections=proj)

            u_rejected = False
            if fix_U is None:
                U_new, info = admm_solve(theta.U, dataset, post.a_hat, post.Q,
                                         theta.phi2, lam_t, tau, admm=config.admm)
                admm_iters, admm_ok, admm_fb = info.iterations, info.converged, info.fell_back
                if lam_t == 0.0:
                    # the inner solver works in the Frobenius metric, which weighs
                    # the diagonal differently than the likelihood; near
                    # stationarity its exact minimizer can still nudge the true
                    # expected objective up, so guard the unpenalized phases
                    proj_cand = PatternProjections(U_new, dataset)
                    q_new = _expected_fit_piece(dataset, proj_cand, post.a_hat,
                                                post.Q, theta.phi2)
                    q_old = _expected_fit_piece(dataset, proj, post.a_hat,
                                                post.Q, theta.phi2)
                    if q_new > q_old:
                        U_new, u_rejected = theta.U, True
            else:
                U_new = theta.U
                admm_iters, admm_ok, admm_fb = 0, True, False

            B_new = update_beta(post.a_hat, dataset.covariates, theta.sigma2, dataset.sites)
            sigma2_new = update_sigma2(post.a_hat, post.Q, B_new, dataset.covariates,
                                       dataset.sites, config.variance_floor)
            proj_new = proj if (fix_U is not None or u_rejected) \
                else PatternProjections(U_new, dataset)
            phi2_new = update_phi2(dataset, None, post.a_hat, post.Q,
                                   config.variance_floor, projections=proj_new)

            if fix_U is None and not u_rejected:
                U_new, B_new, sigma2_new = _rescale_columns(U_new, B_new, sigma2_new)

            delta_u = float(np.linalg.norm(U_new - theta.U))
            if fix_U is not None or u_rejected:
                delta = max(_relative_change(B_new, theta.B),
                            _relative_change(sigma2_new, theta.sigma2),
                            _relative_change(phi2_new, theta.phi2))
            else:
                delta = delta_u

            theta = ParameterSet(U=U_new, B=B_new, sigma2=sigma2_new, phi2=phi2_new)
            try:
                last_nll, last_total = nll_parts(theta, dataset, projections=proj_new)
            except NumericalFitError as err:
                raise NumericalFitError("negative log-likelihood became non-finite",
                                        trace=tuple(trace)) from err

            rec = IterationRecord(
                iteration=len(trace) + 1, phase=phase, lam=float(lam_t),
                nll=float(last_nll), delta_u=delta_u,
                nnz=int(np.count_nonzero(theta.U)),
                admm_iterations=admm_iters, admm_converged=admm_ok,
                admm_fell_back=admm_fb)
            trace.append(rec)
            logger.debug("iter=%d phase=%s lambda=%.6g nll=%.10g dU=%.3e nnz=%d",
                         rec.iteration, phase, lam_t, last_nll, delta_u, rec.nnz)

            ramp_done = (not penalized) or lam_t >= lambda_max
            if ramp_done and delta < config.em_tol:
                if penalized or fix_U is not None or lambda_max == 0.0:
                    converged = True
                break

    # a factor whose variance collapsed to the floor with vanished coefficients
    # explains nothing and its unit column is arbitrary (identifiability needs
    # strictly positive variances); zero it so canonicalization drops it
    dead = (np.all(theta.sigma2 <= 4.0 * config.variance_floor, axis=0)
            & (np.abs(theta.B).max(axis=0) < 1e-8))
    if np.any(dead):
        U_pruned = theta.U.copy()
        U_pruned[:, dead] = 0.0
        theta = theta.replace(U=U_pruned)
    theta_c, _ = canonicalize(theta)
    dropped = theta.L - theta_c.L
    post = posterior_moments(theta_c, dataset)
    nll_val, total = nll_parts(theta_c, dataset)
    return FitResult(theta=theta_c, a_hat=post.a_hat, Q=post.Q, trace=tuple(trace),
                     converged=converged, iterations=len(trace), nll=float(nll_val),
                     loglik_total=float(-total), config=config, resolved=resolved,
                     dropped_columns=int(dropped))
