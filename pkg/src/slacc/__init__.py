"""Sparse latent covariate-driven factorization of symmetric connectivity
matrices, with penalized-EM estimation, information-criterion rank selection,
and multi-site harmonization."""

from .datatypes import (AdmmConfig, ConnectivityDataset, DataValidationError,
                        FitConfig, NumericalFitError, ParameterSet,
                        PosteriorMoments, ValidationReport, n_pairs,
                        pattern_matrix, rank1_vector, unvectorize,
                        unvectorize_rows, validate, vectorize)
from .em import FitResult, anneal_schedule, canonicalize, fit, hosvd_init
from .estep import posterior_moments, posterior_site_covariance
from .estimator import SLACC
from .harmonization import (DesignSpec, HarmonizedOutput, decompose_coefficients,
                            harmonize_external, harmonize_residuals,
                            harmonize_scores, pooled_scales)
from .likelihood import SiteCovarianceRep, log_likelihood_total, mean_vector, nll, nll_parts
from .model_selection import degrees_of_freedom, ebic, select_L
from .mstep import update_beta, update_phi2, update_sigma2
from .penalized_u import (admm_solve, assemble_u_system, soft_threshold,
                          tlp_weights, unpenalized_objective)
from .simulation import (AlignmentMap, ScenarioSpec, align, generate_dataset,
                         make_true_U, metrics, run_simulation1, run_simulation2,
                         site_f_statistics)

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "AlignmentMap", "ConnectivityDataset", "DataValidationError",
    "DesignSpec", "FitConfig", "FitResult", "HarmonizedOutput",
    "NumericalFitError", "ParameterSet", "PosteriorMoments", "SLACC",
    "ScenarioSpec", "SiteCovarianceRep", "ValidationReport", "align",
    "anneal_schedule", "admm_solve", "assemble_u_system", "canonicalize",
    "decompose_coefficients", "degrees_of_freedom", "ebic", "fit",
    "generate_dataset", "harmonize_external", "harmonize_residuals",
    "harmonize_scores", "hosvd_init", "log_likelihood_total", "make_true_U",
    "mean_vector", "metrics", "n_pairs", "nll", "nll_parts", "pattern_matrix",
    "pooled_scales", "posterior_moments", "posterior_site_covariance",
    "rank1_vector", "run_simulation1", "run_simulation2", "select_L",
    "site_f_statistics", "soft_threshold", "tlp_weights", "unpenalized_objective",
    "unvectorize", "unvectorize_rows", "update_beta", "update_phi2",
    "update_sigma2", "validate", "vectorize",
]
