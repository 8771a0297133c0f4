"""Observed-data Gaussian likelihood with low-rank covariance algebra.

Each site's covariance is S diag(sigma2_i) S^T + phi2_i * I_p with S the
p x L matrix of vectorized rank-1 patterns. All inverses and determinants
go through the L x L capacitance matrix (phi2 * D^{-1} + S^T S), so the cost
scales with L rather than p. A dense O(p^3) path exists only in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .datatypes import NumericalFitError, pattern_matrix

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SiteCovarianceRep:
    """Implicit representation of Sigma_i = S D_i S^T + phi2_i I_p.

    Stores the Cholesky factor of the capacitance C_i = phi2_i D_i^{-1} + S^T S,
    which is shared by every subject of the site.
    """

    S: np.ndarray
    d: np.ndarray
    phi2: float

    def __post_init__(self):
        if np.any(np.asarray(self.d) <= 0) or self.phi2 <= 0:
            raise NumericalFitError("site covariance requires positive sigma2 and phi2")
        object.__setattr__(self, "_StS", self.S.T @ self.S)
        C = self.phi2 * np.diag(1.0 / self.d) + self._StS
        object.__setattr__(self, "_chol", cho_factor(C, lower=True))

    @property
    def p(self):
        return self.S.shape[0]

    @property
    def L(self):
        return self.S.shape[1]

    def log_det(self):
        """log|Sigma_i| via the matrix determinant lemma."""
        chol_diag = np.diag(self._chol[0])
        logdet_C = 2.0 * float(np.sum(np.log(chol_diag)))
        return (self.p - self.L) * math.log(self.phi2) + float(np.sum(np.log(self.d))) + logdet_C

    def inv_quad(self, r):
        """r^T Sigma_i^{-1} r through the Woodbury identity."""
        Str = self.S.T @ r
        return (float(r @ r) - float(Str @ cho_solve(self._chol, Str))) / self.phi2

    def inv_quad_from_stats(self, r_sq, Str):
        """Same quadratic form from cached ||r||^2 and S^T r (rows of Str)."""
        sol = cho_solve(self._chol, Str.T)
        return (r_sq - np.einsum("nl,ln->n", Str, sol)) / self.phi2


class PatternProjections:
    """Per-loading-matrix caches shared across the E-step, M-step and nll.

    Holds S, S^T S and the n x L projections Y S of the vectorized data.
    """

    def __init__(self, U, dataset):
        self.S = pattern_matrix(U, dataset.diagonal_mode)
        self.StS = self.S.T @ self.S
        self.YS = dataset.vectors @ self.S


def mean_vector(theta, x, diagonal_mode="include"):
    """Model mean of the vectorized matrix for covariate row x: S B^T x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (theta.q,):
        raise ValueError(f"covariate row must have length q={theta.q}, got shape {x.shape}")
    S = pattern_matrix(theta.U, diagonal_mode)
    return S @ (theta.B.T @ x)


def nll_parts(theta, dataset, projections=None):
    """(scaled, total) negative log-likelihood of the dataset.

    ``scaled`` is 0.5*log(2*pi) + (sum of per-site log-det and quadratic
    terms)/(p*n); ``total`` is the plain total negative log-likelihood
    (n*p/2)*log(2*pi) + brace term, i.e. scaled = total/(p*n). The total
    feeds the information criterion; the scaled value is what fits report.
    """
    if theta.n_sites != dataset.n_sites:
        raise ValueError(f"theta has {theta.n_sites} sites, dataset has {dataset.n_sites}")
    n, p, L = dataset.n, dataset.p, theta.L

    if L == 0:
        brace = 0.0
        for i, members in enumerate(dataset.site_members):
            phi2 = float(theta.phi2[i])
            sq = dataset.vector_sq_norms[members]
            brace += 0.5 * len(members) * p * math.log(phi2) + 0.5 * float(np.sum(sq)) / phi2
        total = 0.5 * n * p * LOG_2PI + brace
        return total / (p * n), total

    proj = projections if projections is not None else PatternProjections(theta.U, dataset)
    brace = 0.0
    for i, members in enumerate(dataset.site_members):
        rep = SiteCovarianceRep(proj.S, theta.sigma2[i], float(theta.phi2[i]))
        M = dataset.covariates[members] @ theta.B           # n_i x L prior means
        # r = y - S m; reuse ||y||^2 and Y S so no p-vector is ever formed
        Str = proj.YS[members] - M @ proj.StS
        r_sq = (dataset.vector_sq_norms[members]
                - 2.0 * np.einsum("nl,nl->n", M, proj.YS[members])
                + np.einsum("nl,lk,nk->n", M, proj.StS, M))
        quads = rep.inv_quad_from_stats(r_sq, Str)
        brace += 0.5 * len(members) * rep.log_det() + 0.5 * float(np.sum(quads))
    total = 0.5 * n * p * LOG_2PI + brace
    if not np.isfinite(total):
        raise NumericalFitError("negative log-likelihood is not finite")
    return total / (p * n), total


def nll(theta, dataset):
    """Scaled observed-data negative log-likelihood (per-coordinate units)."""
    return nll_parts(theta, dataset)[0]


def log_likelihood_total(theta, dataset):
    """Unscaled total log-likelihood (sum over subjects), for EBIC."""
    return -nll_parts(theta, dataset)[1]
