"""Core data containers and the symmetric-matrix vectorization operator.

Everything downstream (likelihood, EM updates, harmonization, file I/O)
shares one canonical vectorization: row-major upper-triangle order
(0,0),(0,1),...,(0,V-1),(1,1),...,(V-1,V-1). With ``diagonal_mode="exclude"``
the (v,v) entries are dropped and ignored by every likelihood/residual
computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SYMMETRY_TOL = 1e-10

DIAGONAL_MODES = ("include", "exclude")


class DataValidationError(ValueError):
    """Raised when input data violates a structural requirement."""


class NumericalFitError(RuntimeError):
    """Raised when an estimation routine produces non-finite values."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def _check_mode(diagonal_mode):
    if diagonal_mode not in DIAGONAL_MODES:
        raise ValueError(f"diagonal_mode must be one of {DIAGONAL_MODES}, got {diagonal_mode!r}")


def n_pairs(V, diagonal_mode="include"):
    """Length p of the vectorized upper triangle for a V x V matrix."""
    _check_mode(diagonal_mode)
    return V * (V + 1) // 2 if diagonal_mode == "include" else V * (V - 1) // 2


def triu_index_pairs(V, diagonal_mode="include"):
    """(rows, cols) index arrays of the canonical upper-triangle ordering."""
    _check_mode(diagonal_mode)
    return np.triu_indices(V, k=0 if diagonal_mode == "include" else 1)


def vectorize(Y, diagonal_mode="include"):
    """Map a symmetric V x V matrix to its length-p upper-triangle vector."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
        raise DataValidationError(f"expected a square matrix, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise DataValidationError("matrix contains non-finite entries")
    if np.max(np.abs(Y - Y.T), initial=0.0) > SYMMETRY_TOL:
        raise DataValidationError("matrix is not symmetric within tolerance 1e-10")
    rows, cols = triu_index_pairs(Y.shape[0], diagonal_mode)
    return Y[rows, cols]


def unvectorize(y, V, diagonal_mode="include"):
    """Inverse of :func:`vectorize`; exclude mode fills the diagonal with 0."""
    y = np.asarray(y, dtype=float)
    p = n_pairs(V, diagonal_mode)
    if y.shape != (p,):
        raise DataValidationError(f"expected vector of length {p} for V={V}, {diagonal_mode}; got shape {y.shape}")
    Y = np.zeros((V, V))
    rows, cols = triu_index_pairs(V, diagonal_mode)
    Y[rows, cols] = y
    Y[cols, rows] = y
    return Y


def unvectorize_rows(vecs, V, diagonal_mode="include"):
    """Unvectorize a stack of row vectors into (n, V, V) symmetric matrices."""
    vecs = np.asarray(vecs, dtype=float)
    p = n_pairs(V, diagonal_mode)
    if vecs.ndim != 2 or vecs.shape[1] != p:
        raise DataValidationError(f"expected (n, {p}) rows for V={V}, {diagonal_mode}; got {vecs.shape}")
    rows, cols = triu_index_pairs(V, diagonal_mode)
    out = np.zeros((vecs.shape[0], V, V))
    out[:, rows, cols] = vecs
    out[:, cols, rows] = vecs
    return out


def rank1_vector(u, diagonal_mode="include"):
    """Vectorized symmetric rank-1 pattern: entry k is u[v]*u[v'] for pair k."""
    u = np.asarray(u, dtype=float)
    rows, cols = triu_index_pairs(u.shape[0], diagonal_mode)
    return u[rows] * u[cols]


def pattern_matrix(U, diagonal_mode="include"):
    """Stack rank1_vector(u_l) columns into the p x L pattern matrix."""
    U = np.asarray(U, dtype=float)
    rows, cols = triu_index_pairs(U.shape[0], diagonal_mode)
    return U[rows, :] * U[cols, :]


class ConnectivityDataset:
    """n symmetric V x V matrices with per-subject site codes and covariates.

    Immutable after construction. Site labels are mapped to integer codes
    0..M-1 in first-appearance order; ``covariates`` is the full n x q design
    matrix (biological columns plus any site encoding the caller includes).

    Parameters
    ----------
    matrices : array-like, shape (n, V, V) or sequence of (V, V)
    sites : sequence of hashable site labels (or integer codes)
    covariates : array-like, shape (n, q)
    diagonal_mode : "include" or "exclude"
    symmetrize : if True, replace each matrix by (Y + Y.T)/2 instead of
        rejecting asymmetry beyond tolerance (real files carry rounding noise)
    site_order : optional explicit label-to-code ordering (labels absent from
        ``sites`` are allowed and keep empty groups); used to score new data
        under a fitted model's site indexing
    """

    def __init__(self, matrices, sites, covariates, diagonal_mode="include",
                 symmetrize=False, site_order=None):
        _check_mode(diagonal_mode)
        Y = np.array(matrices, dtype=float)
        if Y.ndim != 3 or Y.shape[1] != Y.shape[2]:
            raise DataValidationError(f"matrices must stack to (n, V, V); got shape {Y.shape}")
        n = Y.shape[0]
        if not np.all(np.isfinite(Y)):
            bad = int(np.where(~np.isfinite(Y).all(axis=(1, 2)))[0][0])
            raise DataValidationError(f"matrix for subject index {bad} contains non-finite entries")
        asym = np.abs(Y - Y.transpose(0, 2, 1)).max(axis=(1, 2))
        if symmetrize:
            Y = 0.5 * (Y + Y.transpose(0, 2, 1))
        elif asym.max() > SYMMETRY_TOL:
            bad = int(np.argmax(asym))
            raise DataValidationError(
                f"matrix for subject index {bad} is asymmetric (max |Y - Y.T| = {asym[bad]:.3e} > 1e-10)")
        if diagonal_mode == "exclude":
            idx = np.arange(Y.shape[1])
            Y[:, idx, idx] = 0.0

        labels = list(sites)
        if len(labels) != n:
            raise DataValidationError(f"sites has {len(labels)} entries for {n} subjects")
        if site_order is None:
            order = []
            seen = {}
            for lab in labels:
                if lab not in seen:
                    seen[lab] = len(order)
                    order.append(lab)
        else:
            order = list(site_order)
            seen = {lab: i for i, lab in enumerate(order)}
            unknown = sorted({str(lab) for lab in labels if lab not in seen})
            if unknown:
                raise DataValidationError(f"site(s) outside the declared ordering: {unknown}")
        codes = np.array([seen[lab] for lab in labels], dtype=int)

        X = np.array(covariates, dtype=float)
        if X.ndim != 2 or X.shape[0] != n:
            raise DataValidationError(f"covariates must be (n, q) with n={n}; got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataValidationError("covariates contain non-finite entries")

        for arr in (Y, codes, X):
            arr.flags.writeable = False
        self.matrices = Y
        self.sites = codes
        self.covariates = X
        self.diagonal_mode = diagonal_mode
        self.site_labels = tuple(order)

    @property
    def n(self):
        return self.matrices.shape[0]

    @property
    def V(self):
        return self.matrices.shape[1]

    @property
    def q(self):
        return self.covariates.shape[1]

    @property
    def n_sites(self):
        return len(self.site_labels)

    @property
    def p(self):
        return n_pairs(self.V, self.diagonal_mode)

    @cached_property
    def site_sizes(self):
        counts = np.bincount(self.sites, minlength=self.n_sites)
        counts.flags.writeable = False
        return counts

    @cached_property
    def site_members(self):
        """Tuple of index arrays, one per site code."""
        return tuple(np.flatnonzero(self.sites == i) for i in range(self.n_sites))

    @cached_property
    def vectors(self):
        """n x p matrix of canonical upper-triangle vectors."""
        rows, cols = triu_index_pairs(self.V, self.diagonal_mode)
        v = self.matrices[:, rows, cols]
        v.flags.writeable = False
        return v

    @cached_property
    def vector_sq_norms(self):
        sq = np.einsum("np,np->n", self.vectors, self.vectors)
        sq.flags.writeable = False
        return sq

    def subset(self, idx):
        """New dataset restricted to subject indices ``idx`` (labels kept)."""
        idx = np.asarray(idx, dtype=int)
        return ConnectivityDataset(
            self.matrices[idx],
            [self.site_labels[c] for c in self.sites[idx]],
            self.covariates[idx],
            diagonal_mode=self.diagonal_mode,
        )


@dataclass(frozen=True)
class ParameterSet:
    """Model parameters: loadings U (V x L), regression B (q x L),
    latent variances sigma2 (M x L), residual variances phi2 (M,)."""

    U: np.ndarray
    B: np.ndarray
    sigma2: np.ndarray
    phi2: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        B = np.asarray(self.B, dtype=float)
        sigma2 = np.asarray(self.sigma2, dtype=float)
        phi2 = np.asarray(self.phi2, dtype=float)
        L = U.shape[1] if U.ndim == 2 else -1
        if U.ndim != 2:
            raise DataValidationError(f"U must be 2-d, got shape {U.shape}")
        if B.ndim != 2 or B.shape[1] != L:
            raise DataValidationError(f"B must be (q, L={L}), got shape {B.shape}")
        if sigma2.ndim != 2 or sigma2.shape[1] != L:
            raise DataValidationError(f"sigma2 must be (M, L={L}), got shape {sigma2.shape}")
        if phi2.ndim != 1 or phi2.shape[0] != sigma2.shape[0]:
            raise DataValidationError(f"phi2 must be (M={sigma2.shape[0]},), got shape {phi2.shape}")
        if L > 0 and (np.any(sigma2 <= 0) or np.any(phi2 <= 0)):
            raise DataValidationError("sigma2 and phi2 must be strictly positive (apply the variance floor)")
        if L == 0 and np.any(phi2 <= 0):
            raise DataValidationError("phi2 must be strictly positive")
        for arr, name in ((U, "U"), (B, "B"), (sigma2, "sigma2"), (phi2, "phi2")):
            if not np.all(np.isfinite(arr)):
                raise DataValidationError(f"{name} contains non-finite entries")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def V(self):
        return self.U.shape[0]

    @property
    def L(self):
        return self.U.shape[1]

    @property
    def q(self):
        return self.B.shape[0]

    @property
    def n_sites(self):
        return self.sigma2.shape[0]

    def replace(self, **kwargs):
        vals = {"U": self.U, "B": self.B, "sigma2": self.sigma2, "phi2": self.phi2}
        vals.update(kwargs)
        return ParameterSet(**vals)


@dataclass(frozen=True)
class PosteriorMoments:
    """Posterior means of the latent scores (n x L) and per-site posterior
    covariances Q (M x L x L); Q depends on the site only, never the subject."""

    a_hat: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        a_hat = np.asarray(self.a_hat, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        if a_hat.ndim != 2:
            raise DataValidationError(f"a_hat must be (n, L), got shape {a_hat.shape}")
        if Q.ndim != 3 or Q.shape[1] != Q.shape[2] or Q.shape[1] != a_hat.shape[1]:
            raise DataValidationError(f"Q must be (M, L, L) with L={a_hat.shape[1]}, got shape {Q.shape}")
        for arr, name in ((a_hat, "a_hat"), (Q, "Q")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class AdmmConfig:
    """Consensus-ADMM settings for the penalized loading update.

    ``rho``/``eta`` default to max(1, mean subject weight); the tolerances
    default to 1e-6 * sqrt(V*L).
    """

    rho: float | None = None
    eta: float | None = None
    max_iter: int = 200
    primal_tol: float | None = None
    dual_tol: float | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("admm max_iter must be >= 1")
        for name in ("rho", "eta", "primal_tol", "dual_tol"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"admm {name} must be positive")


@dataclass(frozen=True)
class FitConfig:
    """All tolerances and schedules of the penalized EM fit.

    ``tau`` defaults to 0.5*sqrt(log(V*L)/n) at fit time; ``lambda_max``
    defaults to log(n)/2 (the per-side penalty weight).
    """

    max_em_iter: int = 500
    em_tol: float = 1e-4
    tau: float | None = None
    lambda_max: float | None = None
    anneal_iters: int = 20
    # the unpenalized warm start can spend hundreds of iterations escaping a
    # factor-rotation saddle; a tight cap hands the penalty a mixed basis
    warmup_iters: int = 300
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    seed: int = 0
    variance_floor: float = 1e-8

    def __post_init__(self):
        if self.em_tol <= 0 or self.variance_floor <= 0:
            raise ValueError("em_tol and variance_floor must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_max is not None and self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")
        if self.max_em_iter < 1 or self.warmup_iters < 0:
            raise ValueError("iteration caps must be positive")
        if not 0 <= self.anneal_iters <= self.max_em_iter:
            raise ValueError("anneal_iters must satisfy 0 <= anneal_iters <= max_em_iter")

    def default_tau(self, V, L, n):
        if self.tau is not None:
            return self.tau
        return 0.5 * math.sqrt(math.log(V * L) / n)

    def default_lambda_max(self, n):
        if self.lambda_max is not None:
            return self.lambda_max
        return math.log(n) / 2.0


@dataclass(frozen=True)
class ValidationReport:
    """Advisory list of identifiability/data violations; empty means clean."""

    violations: tuple

    @property
    def ok(self):
        return len(self.violations) == 0

    def __str__(self):
        if self.ok:
            return "validation: no violations"
        return "validation violations:\n" + "\n".join(f"  - {v}" for v in self.violations)


def validate(dataset, L=None):
    """Check a dataset against the identifiability conditions.

    Reports symmetry/finiteness problems, covariate rank deficiency, and,
    when ``L`` is given, the factor-count bounds (min(n, q, L) >= 2, L < V).
    The report is advisory for library fits and fatal for the CLI default mode.
    """
    out = []
    Y = dataset.matrices
    if not np.all(np.isfinite(Y)):
        out.append("matrices contain non-finite entries")
    asym = float(np.abs(Y - Y.transpose(0, 2, 1)).max(initial=0.0))
    if asym > SYMMETRY_TOL:
        out.append(f"matrices asymmetric beyond tolerance (max |Y - Y.T| = {asym:.3e})")
    X = dataset.covariates
    if not np.all(np.isfinite(X)):
        out.append("covariates contain non-finite entries")
    else:
        rank = int(np.linalg.matrix_rank(X))
        if rank < dataset.q:
            out.append(f"covariate matrix is rank-deficient (rank {rank} < q={dataset.q}; condition A.5)")
    if L is not None:
        if L >= dataset.V:
            out.append(f"requested L={L} must be < V={dataset.V} (condition A.1)")
        if min(dataset.n, dataset.q, L) < 2:
            out.append(f"min(n={dataset.n}, q={dataset.q}, L={L}) must be >= 2 (condition A.1)")
    return ValidationReport(tuple(out))
