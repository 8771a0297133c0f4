"""Extended BIC and selection of the number of latent factors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .datatypes import DataValidationError
from .em import fit
from .likelihood import nll_parts

logger = logging.getLogger(__name__)


def degrees_of_freedom(theta):
    """qL + ML + M + nnz(U); expects canonicalized parameters (exact zeros)."""
    return (theta.q * theta.L + theta.n_sites * theta.L + theta.n_sites
            + int(np.count_nonzero(theta.U)))


def ebic(theta, dataset, gamma=0.5):
    """-2 * total log-likelihood + log(n) * df + 2*gamma*log(p) * df."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    _, total_nll = nll_parts(theta, dataset)
    df = degrees_of_freedom(theta)
    return 2.0 * total_nll + (math.log(dataset.n) + 2.0 * gamma * math.log(dataset.p)) * df


@dataclass(frozen=True)
class SelectionPoint:
    L: int
    nll: float        # total (unscaled) negative log-likelihood
    df: int
    ebic: float
    converged: bool
    error: str | None = None


@dataclass(frozen=True)
class SelectionResult:
    L_best: int
    curve: tuple
    best_fit: object


def select_L(dataset, L_grid, gamma=0.5, config=None):
    """Fit every candidate factor count independently and pick the EBIC argmin.

    Each grid point starts from its own spectral initializer (no warm start
    across the grid, so a local minimum at one L cannot contaminate the
    curve). Single-point failures are recorded on the curve and skipped;
    ties break toward the smaller L.
    """
    grid = sorted(set(int(L) for L in L_grid))
    if not grid:
        raise ValueError("L grid is empty")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if grid[-1] >= dataset.V:
        raise DataValidationError(f"grid maximum L={grid[-1]} must be < V={dataset.V}")

    log_pen = math.log(dataset.n) + 2.0 * gamma * math.log(dataset.p)
    curve = []
    best = None
    best_fit = None
    for L in grid:
        try:
            res = fit(dataset, L, config=config, force=True)
            _, total_nll = nll_parts(res.theta, dataset)
            df = degrees_of_freedom(res.theta)
            crit = 2.0 * total_nll + log_pen * df
            point = SelectionPoint(L=L, nll=float(total_nll), df=df,
                                   ebic=float(crit), converged=res.converged)
            if best is None or crit < best.ebic:
                best, best_fit = point, res
        except Exception as err:  # a single bad grid point must not kill the sweep
            logger.warning("fit failed for L=%d: %s", L, err)
            point = SelectionPoint(L=L, nll=float("nan"), df=0, ebic=float("nan"),
                                   converged=False, error=str(err))
        curve.append(point)
    if best is None:
        raise RuntimeError("every grid point failed; no model selected")
    return SelectionResult(L_best=best.L, curve=tuple(curve), best_fit=best_fit)


def curve_rows(result):
    """Curve as CSV-ready dict rows with columns L, nll, df, ebic, converged."""
    return [{"L": pt.L, "nll": pt.nll, "df": pt.df, "ebic": pt.ebic,
             "converged": pt.converged} for pt in result.curve]
