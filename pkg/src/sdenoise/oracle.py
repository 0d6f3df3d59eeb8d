"""Independent ground-truth computations used to validate the sampler.

Closed-form joint-Gaussian posteriors, brute-force grid posteriors (for
1-D/2-D signals), and a plain gradient-ascent MAP reference. Everything
here is deliberately simple and derived separately from the sampler's code
paths.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericError


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-10):
            raise NumericError("posterior covariance is not symmetric")
        if np.any(np.linalg.eigvalsh(self.covariance) <= 0):
            raise NumericError("posterior covariance is not positive definite")


def _dense_cov(cov, dim):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        return float(cov) * np.eye(dim)
    if cov.ndim == 1:
        return np.diag(cov)
    return cov


def gaussian_posterior(A, y, prior_x, prior_n):
    """Exact posterior over x for Gaussian priors on signal and noise.

    covariance = (A^T Sn^-1 A + Sx^-1)^-1,
    mean = covariance (A^T Sn^-1 (y - mu_n) + Sx^-1 mu_x).
    """
    y = np.asarray(y, dtype=float)
    mu_x, cov_x = prior_x
    mu_n, cov_n = prior_n
    a_mat = A.as_matrix()
    m, d = a_mat.shape
    mu_x = np.broadcast_to(np.asarray(mu_x, dtype=float), (d,))
    mu_n = np.broadcast_to(np.asarray(mu_n, dtype=float), (m,))
    sigma_x = _dense_cov(cov_x, d)
    sigma_n = _dense_cov(cov_n, m)
    try:
        sn_inv_a = np.linalg.solve(sigma_n, a_mat)
        sx_inv = np.linalg.inv(sigma_x)
        precision = a_mat.T @ sn_inv_a + sx_inv
        covariance = np.linalg.inv(precision)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular covariance in gaussian_posterior: {exc}") from exc
    covariance = 0.5 * (covariance + covariance.T)
    rhs = sn_inv_a.T @ (y - mu_n) + sx_inv @ mu_x
    return GaussianPosterior(mean=covariance @ rhs, covariance=covariance)


@dataclass
class DiscretePosterior:
    """Normalized posterior mass on a rectangular grid of cell centers."""

    points: np.ndarray  # (N, dim) cell centers
    probs: np.ndarray  # (N,)
    axes: list  # per-dim center arrays
    widths: np.ndarray  # per-dim cell widths

    def mean(self):
        return self.probs @ self.points

    def argmax(self):
        return self.points[int(np.argmax(self.probs))]


def _as_logpdf(prior):
    if callable(prior):
        return prior
    return lambda v: prior.logpdf(v, 0.0)


def grid_posterior(problem, log_prior_x, log_prior_n, grid_spec):
    """Brute-force posterior over x on a bounded grid (x dim <= 2).

    ``grid_spec`` is a list of (lo, hi, n) per signal dimension. The noise
    realization is pinned by the measurement (n = y - A x), so the
    likelihood is the noise prior evaluated at the residual. Normalization
    happens in log space.
    """
    if len(grid_spec) > 2:
        raise ValueError("grid posterior supports signal dims 1 and 2 only")
    logp_x = _as_logpdf(log_prior_x)
    logp_n = _as_logpdf(log_prior_n)
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in grid_spec]
    widths = np.array([ax[1] - ax[0] if ax.size > 1 else 1.0 for ax in axes])
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    resid = np.asarray(problem.y, dtype=float) - problem.A.apply(points)
    log_mass = np.asarray(logp_x(points)) + np.asarray(logp_n(resid))
    total = logsumexp(log_mass)
    if not np.isfinite(total):
        raise NumericError("posterior mass underflowed to zero on the whole grid")
    probs = np.exp(log_mass - total)
    return DiscretePosterior(points=points, probs=probs, axes=axes, widths=widths)


def _as_density(prior):
    if isinstance(prior, tuple):
        return prior
    return (lambda v: prior.logpdf(v, 0.0)), (lambda v: prior.score(v, 0.0))


def map_estimate(problem, log_prior_x, log_prior_n, init, steps, lr):
    """Gradient ascent on log p_N(y - A x) + log p_X(x).

    Priors are analytic score objects (logpdf/score at t = 0) or explicit
    (logpdf, score) callable pairs. Returns (x_hat, final objective).
    """
    logp_x, score_x = _as_density(log_prior_x)
    logp_n, score_n = _as_density(log_prior_n)
    A, y = problem.A, np.asarray(problem.y, dtype=float)
    x = np.asarray(init, dtype=float).copy()

    def objective(x):
        return float(logp_n(y - A.apply(x)) + logp_x(x))

    value = objective(x)
    for step in range(steps):
        resid = y - A.apply(x)
        grad = -A.adjoint(score_n(resid)) + score_x(x)
        x = x + lr * grad
        value = objective(x)
        if not math.isfinite(value):
            raise NumericError(
                f"MAP ascent diverged at step {step} (objective non-finite); lr={lr}"
            )
    return x, value
