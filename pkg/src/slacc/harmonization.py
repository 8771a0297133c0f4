"""Batch-free reconstruction: remove site effects, keep covariate effects.

The fitted mean x^T beta_l is re-expressed as alpha_l + z^T theta_l +
gamma_il with the site offsets gamma centered to zero (unweighted across
sites, as the constraint is stated), latent scores are rescaled from the
site-specific spread to a pooled spread, and residuals are rescaled to a
pooled noise level. Pooled scales are size-weighted root means; the
centering/pooling asymmetry (unweighted vs weighted) is intentional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datatypes import DataValidationError, pattern_matrix, unvectorize_rows
from .estep import posterior_site_covariance
from .likelihood import PatternProjections


@dataclass(frozen=True)
class DesignSpec:
    """Declares which covariate columns are biological and which encode sites.

    ``site_columns[i]`` is the one-hot column of site code i; an optional
    global intercept column may be declared for externally built designs.
    """

    biological_columns: tuple
    site_columns: tuple
    intercept_column: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "biological_columns", tuple(int(c) for c in self.biological_columns))
        object.__setattr__(self, "site_columns", tuple(int(c) for c in self.site_columns))
        cols = list(self.biological_columns) + list(self.site_columns)
        if self.intercept_column is not None:
            cols.append(int(self.intercept_column))
        if len(set(cols)) != len(cols):
            raise DataValidationError("design columns overlap")

    @property
    def has_intercept(self):
        return self.intercept_column is not None

    @property
    def n_sites(self):
        return len(self.site_columns)

    @property
    def q(self):
        return len(self.biological_columns) + len(self.site_columns) + (1 if self.has_intercept else 0)

    def check_against(self, q):
        cols = list(self.biological_columns) + list(self.site_columns)
        if self.intercept_column is not None:
            cols.append(self.intercept_column)
        if sorted(cols) != list(range(q)):
            raise DataValidationError(
                f"design columns {sorted(cols)} do not partition the q={q} covariates")


@dataclass(frozen=True)
class HarmonizedOutput:
    """Corrected scores, rescaled residuals, reconstructed matrices, and the
    pooled scales used."""

    a_h: np.ndarray
    E_h: np.ndarray
    Y_h: np.ndarray
    sigma_h: np.ndarray
    phi_h: float


def decompose_coefficients(B, design, site_sizes):
    """Split x^T beta_l into (alpha_l, z^T theta_l, gamma_il) with sum_i gamma_il = 0.

    The split is exact: for a subject of site i, alpha + z^T theta + gamma_i
    reproduces x^T beta to rounding.
    """
    B = np.asarray(B, dtype=float)
    M = len(site_sizes)
    if design.n_sites != M:
        raise DataValidationError(f"design encodes {design.n_sites} sites, expected {M}")
    design.check_against(B.shape[0])
    site_effects = B[list(design.site_columns), :]          # M x L
    mean_effect = site_effects.mean(axis=0)                 # unweighted, so gamma sums to 0
    gamma = site_effects - mean_effect
    alpha = mean_effect.copy()
    if design.has_intercept:
        alpha = alpha + B[design.intercept_column, :]
    theta_z = B[list(design.biological_columns), :]
    return alpha, theta_z, gamma


def pooled_scales(sigma2, phi2, site_sizes):
    """Size-weighted root-mean scales: sigma_h_l = sqrt(sum n_i sigma2_il / n)."""
    sigma2 = np.asarray(sigma2, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    w = np.asarray(site_sizes, dtype=float)
    n = w.sum()
    if n <= 0:
        raise ValueError("site sizes must sum to a positive count")
    sigma_h = np.sqrt(w @ sigma2 / n)
    phi_h = float(np.sqrt(w @ phi2 / n))
    return sigma_h, phi_h


def harmonize_scores(a_hat, theta_fit, design, dataset, site_sizes=None, sites=None):
    """Corrected latent scores per the affine map
    a_h = (sigma_h / sigma_i)(a - alpha - z^T theta - gamma_i) + alpha + z^T theta.

    ``site_sizes`` are the counts the pooled scales are built from (training
    counts; defaults to the given dataset's). ``sites`` optionally remaps each
    subject to a model site code (external data).
    """
    a_hat = np.asarray(a_hat, dtype=float)
    codes = dataset.sites if sites is None else np.asarray(sites, dtype=int)
    sizes = dataset.site_sizes if site_sizes is None else np.asarray(site_sizes)
    if np.any(codes >= theta_fit.n_sites):
        raise DataValidationError("subject mapped to a site unknown to the fitted model")
    alpha, theta_z, gamma = decompose_coefficients(theta_fit.B, design, sizes)
    sigma_h, _ = pooled_scales(theta_fit.sigma2, theta_fit.phi2, sizes)
    z = dataset.covariates[:, list(design.biological_columns)]
    base = alpha[None, :] + z @ theta_z
    centered = a_hat - base - gamma[codes]
    scale = sigma_h[None, :] / np.sqrt(theta_fit.sigma2[codes])
    return scale * centered + base


def harmonize_residuals(dataset, theta_fit, a_hat, site_sizes=None, sites=None):
    """Residual matrices Y - sum_l a_l u_l u_l^T, rescaled by phi_h / phi_i.

    With the diagonal excluded, residual diagonals stay zero.
    """
    a_hat = np.asarray(a_hat, dtype=float)
    codes = dataset.sites if sites is None else np.asarray(sites, dtype=int)
    sizes = dataset.site_sizes if site_sizes is None else np.asarray(site_sizes)
    _, phi_h = pooled_scales(theta_fit.sigma2, theta_fit.phi2, sizes)
    S = pattern_matrix(theta_fit.U, dataset.diagonal_mode)
    evec = dataset.vectors - a_hat @ S.T
    evec = evec * (phi_h / np.sqrt(theta_fit.phi2[codes]))[:, None]
    return unvectorize_rows(evec, dataset.V, dataset.diagonal_mode)


def _posterior_with_codes(theta_fit, dataset, codes):
    proj = PatternProjections(theta_fit.U, dataset)
    n, L = dataset.n, theta_fit.L
    a_hat = np.empty((n, L))
    for i in np.unique(codes):
        members = np.flatnonzero(codes == i)
        Q_i = posterior_site_covariance(theta_fit, i, dataset.diagonal_mode, StS=proj.StS)
        prior_mean = dataset.covariates[members] @ theta_fit.B
        rhs = prior_mean / theta_fit.sigma2[i] + proj.YS[members] / float(theta_fit.phi2[i])
        a_hat[members] = rhs @ Q_i
    return a_hat, proj


def harmonize_external(theta_fit, design, new_dataset, train_site_labels=None,
                       train_site_sizes=None):
    """Score and harmonize a dataset under an already-fitted model.

    ``new_dataset`` may be the training data itself or held-out subjects;
    its sites must all have been seen in training (matched by label when
    ``train_site_labels`` is given, by code otherwise) and its covariates
    must use the model's column layout. Pooled scales use
    ``train_site_sizes`` when provided, else the new data's counts.
    """
    L = theta_fit.L
    if new_dataset.n == 0:
        sizes = train_site_sizes if train_site_sizes is not None else np.ones(theta_fit.n_sites, dtype=int)
        sigma_h, phi_h = pooled_scales(theta_fit.sigma2, theta_fit.phi2, sizes)
        V = new_dataset.V
        return HarmonizedOutput(a_h=np.zeros((0, L)), E_h=np.zeros((0, V, V)),
                                Y_h=np.zeros((0, V, V)), sigma_h=sigma_h, phi_h=phi_h)
    if new_dataset.q != theta_fit.q:
        raise DataValidationError(
            f"dataset has q={new_dataset.q} covariates, model expects {theta_fit.q}")
    if theta_fit.V != new_dataset.V:
        raise DataValidationError(f"dataset has V={new_dataset.V}, model expects {theta_fit.V}")

    if train_site_labels is not None:
        lookup = {lab: i for i, lab in enumerate(train_site_labels)}
        unseen = [lab for lab in new_dataset.site_labels if lab not in lookup]
        if unseen:
            raise DataValidationError(f"site(s) not seen during fitting: {unseen}")
        codes = np.array([lookup[new_dataset.site_labels[c]] for c in new_dataset.sites])
    else:
        codes = np.asarray(new_dataset.sites)
        if codes.max(initial=0) >= theta_fit.n_sites:
            raise DataValidationError("site code exceeds the fitted model's site count")

    sizes = train_site_sizes
    if sizes is None:
        sizes = np.bincount(codes, minlength=theta_fit.n_sites)
    sizes = np.asarray(sizes)

    a_hat, proj = _posterior_with_codes(theta_fit, new_dataset, codes)
    a_h = harmonize_scores(a_hat, theta_fit, design, new_dataset,
                           site_sizes=sizes, sites=codes)
    sigma_h, phi_h = pooled_scales(theta_fit.sigma2, theta_fit.phi2, sizes)
    evec = new_dataset.vectors - a_hat @ proj.S.T
    evec = evec * (phi_h / np.sqrt(theta_fit.phi2[codes]))[:, None]
    yvec_h = a_h @ proj.S.T + evec
    V = new_dataset.V
    E_h = unvectorize_rows(evec, V, new_dataset.diagonal_mode)
    Y_h = unvectorize_rows(yvec_h, V, new_dataset.diagonal_mode)
    return HarmonizedOutput(a_h=a_h, E_h=E_h, Y_h=Y_h, sigma_h=sigma_h, phi_h=phi_h)
