"""Posterior moments of the latent scores given data and current parameters."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .datatypes import NumericalFitError, PosteriorMoments, pattern_matrix
from .likelihood import PatternProjections


def posterior_site_covariance(theta, site, diagonal_mode="include", StS=None):
    """Q_i = (S^T S / phi2_i + D_i^{-1})^{-1}; shared by all subjects of a site."""
    if np.any(theta.sigma2[site] <= 0) or theta.phi2[site] <= 0:
        raise NumericalFitError("posterior covariance requires positive sigma2 and phi2")
    if StS is None:
        S = pattern_matrix(theta.U, diagonal_mode)
        StS = S.T @ S
    prec = StS / float(theta.phi2[site]) + np.diag(1.0 / theta.sigma2[site])
    chol = cho_factor(prec, lower=True)
    Q = cho_solve(chol, np.eye(theta.L))
    return 0.5 * (Q + Q.T)


def posterior_moments(theta, dataset, projections=None):
    """Posterior means a_hat (n x L) and per-site covariances Q (M x L x L).

    a_hat_ij = Q_i (D_i^{-1} B^T x_ij + S^T y_ij / phi2_i).
    """
    proj = projections if projections is not None else PatternProjections(theta.U, dataset)
    n, L, M = dataset.n, theta.L, dataset.n_sites
    a_hat = np.empty((n, L))
    Q = np.empty((M, L, L))
    for i, members in enumerate(dataset.site_members):
        Q[i] = posterior_site_covariance(theta, i, dataset.diagonal_mode, StS=proj.StS)
        prior_mean = dataset.covariates[members] @ theta.B
        rhs = prior_mean / theta.sigma2[i] + proj.YS[members] / float(theta.phi2[i])
        a_hat[members] = rhs @ Q[i]
    return PosteriorMoments(a_hat=a_hat, Q=Q)
