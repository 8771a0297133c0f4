"""Estimator-style front end so the model composes with sklearn pipelines.

``fit`` learns the sparse loading patterns and site parameters from stacks
of symmetric matrices; ``transform`` returns harmonized matrices for the
same or new subjects (sites must have been seen in training). Biological
covariates are passed as a keyword; site one-hot columns are generated
internally so the coefficient decomposition always knows which columns
encode sites.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .datatypes import ConnectivityDataset, DataValidationError, FitConfig
from .em import fit as fit_model
from .harmonization import (DesignSpec, _posterior_with_codes, decompose_coefficients,
                            harmonize_external, pooled_scales)
from .likelihood import nll
from .model_selection import select_L


def _site_onehot(labels, order):
    lookup = {lab: i for i, lab in enumerate(order)}
    unseen = sorted({str(lab) for lab in labels if lab not in lookup})
    if unseen:
        raise DataValidationError(f"site(s) not seen during fitting: {unseen}")
    codes = np.array([lookup[lab] for lab in labels])
    hot = np.zeros((len(labels), len(order)))
    hot[np.arange(len(labels)), codes] = 1.0
    return hot, codes


class SLACC(BaseEstimator, TransformerMixin):
    """Sparse latent covariate-driven factorization of symmetric matrices.

    Parameters
    ----------
    n_factors : fixed number of latent factors; when None, chosen by the
        extended information criterion over ``factor_grid``
    factor_grid : candidate factor counts for selection (required when
        ``n_factors`` is None)
    gamma : weight of the dimension-adaptive penalty term in selection
    diagonal_mode : "include" or "exclude" diagonal entries
    config : FitConfig overriding all tolerances/schedules (None -> defaults
        with ``seed``)
    seed : seed used when ``config`` is None
    symmetrize : symmetrize inputs instead of rejecting rounding asymmetry
    """

    def __init__(self, n_factors=None, factor_grid=None, gamma=0.5,
                 diagonal_mode="include", config=None, seed=0, symmetrize=False):
        self.n_factors = n_factors
        self.factor_grid = factor_grid
        self.gamma = gamma
        self.diagonal_mode = diagonal_mode
        self.config = config
        self.seed = seed
        self.symmetrize = symmetrize

    def _effective_config(self):
        return self.config if self.config is not None else FitConfig(seed=self.seed)

    def _build_dataset(self, X, sites, covariates, site_order=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise DataValidationError(f"X must stack matrices to (n, V, V); got shape {X.shape}")
        sites = list(sites)
        if covariates is None:
            bio = np.zeros((len(sites), 0))
        else:
            bio = np.atleast_2d(np.asarray(covariates, dtype=float))
            if bio.shape[0] != len(sites):
                raise DataValidationError("covariates and sites disagree on n")
        if site_order is None:
            site_order = list(dict.fromkeys(sites))
        hot, _ = _site_onehot(sites, site_order)
        design = DesignSpec(biological_columns=tuple(range(bio.shape[1])),
                            site_columns=tuple(range(bio.shape[1], bio.shape[1] + len(site_order))))
        dataset = ConnectivityDataset(X, sites, np.hstack([bio, hot]),
                                      diagonal_mode=self.diagonal_mode,
                                      symmetrize=self.symmetrize,
                                      site_order=site_order)
        return dataset, design, tuple(site_order)

    def fit(self, X, y=None, *, sites, covariates=None):
        dataset, design, order = self._build_dataset(X, sites, covariates)
        config = self._effective_config()
        if self.n_factors is None:
            if not self.factor_grid:
                raise ValueError("provide n_factors or a factor_grid to select from")
            sel = select_L(dataset, self.factor_grid, gamma=self.gamma, config=config)
            self.selection_ = sel
            result = sel.best_fit
        else:
            self.selection_ = None
            result = fit_model(dataset, int(self.n_factors), config=config)
        self.result_ = result
        self.theta_ = result.theta
        self.U_ = result.theta.U
        self.B_ = result.theta.B
        self.sigma2_ = result.theta.sigma2
        self.phi2_ = result.theta.phi2
        self.scores_ = result.a_hat
        self.design_ = design
        self.site_labels_ = order
        self.site_sizes_ = np.asarray(dataset.site_sizes)
        self.n_factors_ = result.theta.L
        self.n_regions_ = dataset.V
        alpha, theta_z, gamma_site = decompose_coefficients(self.B_, design, self.site_sizes_)
        self.alpha_, self.coef_bio_, self.site_offsets_ = alpha, theta_z, gamma_site
        self.pooled_sigma_, self.pooled_phi_ = pooled_scales(
            self.sigma2_, self.phi2_, self.site_sizes_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "theta_"):
            raise NotFittedError("this SLACC instance is not fitted yet")

    def _harmonize(self, X, sites, covariates):
        self._check_fitted()
        dataset, _, _ = self._build_dataset(X, sites, covariates, site_order=self.site_labels_)
        return harmonize_external(self.theta_, self.design_, dataset,
                                  train_site_labels=self.site_labels_,
                                  train_site_sizes=self.site_sizes_)

    def transform(self, X, *, sites, covariates=None):
        """Harmonized matrices (n, V, V) for subjects from training sites."""
        return self._harmonize(X, sites, covariates).Y_h

    def harmonize(self, X, *, sites, covariates=None):
        """Full harmonization output (scores, residuals, matrices, scales)."""
        return self._harmonize(X, sites, covariates)

    def latent_scores(self, X, *, sites, covariates=None, harmonized=False):
        """Posterior latent scores under the fitted model; optionally the
        site-corrected version."""
        if harmonized:
            return self._harmonize(X, sites, covariates).a_h
        self._check_fitted()
        dataset, _, _ = self._build_dataset(X, sites, covariates, site_order=self.site_labels_)
        a_hat, _ = _posterior_with_codes(self.theta_, dataset, dataset.sites)
        return a_hat

    def score(self, X, y=None, *, sites, covariates=None):
        """Mean per-coordinate log-likelihood (higher is better)."""
        self._check_fitted()
        dataset, _, _ = self._build_dataset(X, sites, covariates, site_order=self.site_labels_)
        return -float(nll(self.theta_, dataset))
