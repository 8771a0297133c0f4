"""Independent reference implementations used only by the tests.

Everything here takes the slow, direct route on purpose: dense p x p
covariance algebra, joint-Gaussian conditioning, literal formula loops, and
generic first-order minimization. None of it shares code with the package's
computational paths.
"""

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from slacc.datatypes import ConnectivityDataset, ParameterSet, pattern_matrix

LOG_2PI = np.log(2.0 * np.pi)


def random_theta(V, L, q, M, rng, canonical=False):
    U = rng.standard_normal((V, L))
    if canonical:
        U /= np.linalg.norm(U, axis=0)
    B = rng.standard_normal((q, L))
    sigma2 = rng.uniform(0.5, 3.0, size=(M, L))
    phi2 = rng.uniform(0.5, 2.0, size=M)
    return ParameterSet(U=U, B=B, sigma2=sigma2, phi2=phi2)


def random_dataset(n, V, q, M, rng, diagonal_mode="include"):
    A = rng.standard_normal((n, V, V))
    Y = A + A.transpose(0, 2, 1)
    sites = [f"s{i % M}" for i in range(n)]
    X = rng.standard_normal((n, q))
    return ConnectivityDataset(Y, sites, X, diagonal_mode=diagonal_mode)


def dataset_from_theta(theta, n, rng, diagonal_mode="include", site_split=None):
    """Draw a dataset from the generative model at the given parameters."""
    M, L, V, q = theta.n_sites, theta.L, theta.V, theta.q
    if site_split is None:
        sites = np.array([i % M for i in range(n)])
    else:
        sites = np.repeat(np.arange(M), site_split)
    X = rng.standard_normal((n, q))
    a = X @ theta.B + rng.standard_normal((n, L)) * np.sqrt(theta.sigma2)[sites]
    rows, cols = np.triu_indices(V, k=0 if diagonal_mode == "include" else 1)
    p = len(rows)
    evec = rng.standard_normal((n, p)) * np.sqrt(theta.phi2)[sites, None]
    E = np.zeros((n, V, V))
    E[:, rows, cols] = evec
    E[:, cols, rows] = evec
    Y = np.einsum("nl,vl,wl->nvw", a, theta.U, theta.U) + E
    labels = [f"s{i}" for i in sites]
    return ConnectivityDataset(Y, labels, X, diagonal_mode=diagonal_mode), a


def dense_site_covariance(theta, site, diagonal_mode="include"):
    S = pattern_matrix(theta.U, diagonal_mode)
    D = np.diag(theta.sigma2[site]) if theta.L else np.zeros((0, 0))
    p = S.shape[0]
    return S @ D @ S.T + theta.phi2[site] * np.eye(p)


def dense_nll(theta, dataset):
    """Direct O(p^3) evaluation of the observed-data negative log-likelihood.

    Returns (scaled, total): the per-coordinate value and the plain total.
    """
    n, p = dataset.n, dataset.p
    S = pattern_matrix(theta.U, dataset.diagonal_mode)
    brace = 0.0
    for i, members in enumerate(dataset.site_members):
        Sigma = dense_site_covariance(theta, i, dataset.diagonal_mode)
        sign, logdet = np.linalg.slogdet(Sigma)
        assert sign > 0
        brace += 0.5 * len(members) * logdet
        Sigma_inv = np.linalg.inv(Sigma)
        for j in members:
            mu = S @ (theta.B.T @ dataset.covariates[j]) if theta.L else np.zeros(p)
            r = dataset.vectors[j] - mu
            brace += 0.5 * float(r @ Sigma_inv @ r)
    total = 0.5 * n * p * LOG_2PI + brace
    return total / (p * n), total


def dense_posterior(theta, dataset):
    """Posterior moments via joint-Gaussian conditioning of (a, y).

    Builds the full (L+p) covariance of the joint vector and conditions,
    subject by subject.
    """
    S = pattern_matrix(theta.U, dataset.diagonal_mode)
    n, L, p = dataset.n, theta.L, dataset.p
    a_hat = np.zeros((n, L))
    Q = np.zeros((dataset.n_sites, L, L))
    for i, members in enumerate(dataset.site_members):
        D = np.diag(theta.sigma2[i])
        cov_ay = D @ S.T                       # Cov(a, y) = D S^T
        cov_yy = S @ D @ S.T + theta.phi2[i] * np.eye(p)
        gain = cov_ay @ np.linalg.inv(cov_yy)  # L x p
        Q[i] = D - gain @ cov_ay.T
        for j in members:
            m = theta.B.T @ dataset.covariates[j]
            a_hat[j] = m + gain @ (dataset.vectors[j] - S @ m)
    return a_hat, Q


def wls(X, y, weights):
    """Generic weighted least squares via the sqrt-weight trick."""
    sw = np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return coef


def smooth_u_objective_literal(U, U_star, dataset, a_hat, Q, phi2):
    """Literal loop over subjects for the split smooth objective."""
    total = 0.0
    for j in range(dataset.n):
        i = dataset.sites[j]
        w = 0.5 / phi2[i]
        Pi = np.diag(a_hat[j])
        fit = dataset.matrices[j] - U_star @ Pi @ U.T
        A = U_star.T @ U
        total += 0.5 * w * (np.sum(fit * fit) + np.trace((A * A) @ Q[i]))
    return total


def gd_minimize_unpenalized(U_init, dataset, a_hat, Q, phi2, tol=1e-10):
    """Generic first-order minimizer of the consensus objective at U* = U."""
    V, L = U_init.shape
    w = 0.5 / np.asarray(phi2, dtype=float)[dataset.sites]

    def value_and_grad(x):
        U = x.reshape(V, L)
        val = 0.0
        grad = np.zeros_like(U)
        for j in range(dataset.n):
            i = dataset.sites[j]
            Pi = np.diag(a_hat[j])
            R = dataset.matrices[j] - U @ Pi @ U.T
            G = U.T @ U
            val += w[j] * (np.sum(R * R) + np.trace((G * G) @ Q[i]))
            grad += w[j] * (-4.0 * R @ U @ Pi + 4.0 * U @ (G * Q[i]))
        return val, grad.ravel()

    res = scipy_minimize(value_and_grad, U_init.ravel(), jac=True, method="L-BFGS-B",
                         options={"maxiter": 5000, "ftol": tol, "gtol": 1e-10})
    return res.x.reshape(V, L)
