"""Closed-form M-step updates for the regression and variance parameters."""

from __future__ import annotations

import numpy as np

from .likelihood import PatternProjections


def update_beta(a_hat, X, sigma2, sites):
    """Weighted least squares per factor: column l of B solves
    (sum_ij x x^T / sigma2_il) b = sum_ij x a_ijl / sigma2_il."""
    a_hat = np.asarray(a_hat, dtype=float)
    X = np.asarray(X, dtype=float)
    n, L = a_hat.shape
    q = X.shape[1]
    B = np.empty((q, L))
    for l in range(L):
        w = 1.0 / np.asarray(sigma2, dtype=float)[sites, l]
        Xw = X * w[:, None]
        gram = Xw.T @ X
        rhs = Xw.T @ a_hat[:, l]
        try:
            B[:, l] = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as err:
            raise ValueError("weighted Gram matrix is singular; covariate matrix is rank-deficient") from err
    return B


def update_sigma2(a_hat, Q, B, X, sites, variance_floor=1e-8):
    """Site-specific latent variances: diagonal of the conditional
    second-moment average (residual outer products plus Q_i), floored."""
    a_hat = np.asarray(a_hat, dtype=float)
    resid = a_hat - np.asarray(X, dtype=float) @ B
    M, L = np.asarray(Q).shape[0], a_hat.shape[1]
    sigma2 = np.empty((M, L))
    for i in range(M):
        members = np.flatnonzero(sites == i)
        sigma2[i] = np.mean(resid[members] ** 2, axis=0) + np.diag(Q[i])
    return np.maximum(sigma2, variance_floor)


def update_phi2(dataset, S, a_hat, Q, variance_floor=1e-8, projections=None):
    """Residual variance per site:
    (1/(n_i p)) sum_j ||y_ij - S a_hat_ij||^2 + tr((S^T S) Q_i)/p, floored."""
    a_hat = np.asarray(a_hat, dtype=float)
    p = dataset.p
    if projections is not None:
        StS, YS = projections.StS, projections.YS
    else:
        StS = S.T @ S
        YS = dataset.vectors @ S
    fit_sq = (dataset.vector_sq_norms
              - 2.0 * np.einsum("nl,nl->n", a_hat, YS)
              + np.einsum("nl,lk,nk->n", a_hat, StS, a_hat))
    phi2 = np.empty(dataset.n_sites)
    for i, members in enumerate(dataset.site_members):
        phi2[i] = np.mean(fit_sq[members]) / p + np.trace(StS @ Q[i]) / p
    return np.maximum(phi2, variance_floor)
