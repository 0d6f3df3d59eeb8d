"""Variance-exploding diffusion schedule and its perturbation kernel.

The forward process is ``dx = g(t) dw`` with zero drift and an exponential
diffusion coefficient ``g(t) = sigma**t``. Its one-step transition kernel is
Gaussian,

    q(x_t | x_0) = N(alpha(t) * x_0, beta(t)^2 I),

with ``alpha(t) = 1`` and ``beta(t)^2 = (sigma^(2t) - 1) / (2 ln sigma)``,
the closed form of the time integral of ``g^2``. The schedule is immutable
and shared; all randomness is drawn from caller-supplied generators.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """VE-SDE schedule with diffusion coefficient ``sigma**t``.

    Parameters
    ----------
    sigma : float
        Exponential base of the diffusion coefficient, > 1.
    """

    sigma: float = 25.0

    def __post_init__(self):
        if not self.sigma > 1.0:
            raise ValueError(f"sigma must be > 1, got {self.sigma}")

    def drift_coeff(self, t):
        """f(t); identically zero for this schedule."""
        self._check_time(t)
        return 0.0

    def diffusion_coeff(self, t):
        """g(t) = sigma**t."""
        self._check_time(t)
        return self.sigma**t

    def alpha(self, t):
        """Mean scale of the perturbation kernel; identically one."""
        self._check_time(t)
        return 1.0

    def beta(self, t):
        """Std of the perturbation kernel at time t."""
        return self.kernel_params(t)[1]

    def beta_sq(self, t):
        """beta(t)^2 = (sigma^(2t) - 1) / (2 ln sigma)."""
        self._check_time(t)
        log_sigma = math.log(self.sigma)
        # expm1 keeps beta^2 ~ t accurate for small t
        return math.expm1(2.0 * t * log_sigma) / (2.0 * log_sigma)

    def beta_batch(self, t):
        """beta(t) for an array of times (vectorized)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("times must lie in [0, 1]")
        log_sigma = math.log(self.sigma)
        return np.sqrt(np.expm1(2.0 * t * log_sigma) / (2.0 * log_sigma))

    def kernel_params(self, t):
        """Return (alpha, beta) of the transition kernel q(x_t | x_0).

        Raises
        ------
        ValueError
            If t is outside [0, 1].
        """
        return 1.0, math.sqrt(self.beta_sq(t))

    def perturb(self, x0, t, z):
        """Draw x_t = alpha*x0 + beta*z from the transition kernel.

        ``z`` must be a standard-normal array of the same shape as ``x0``.
        """
        x0 = np.asarray(x0, dtype=float)
        z = np.asarray(z, dtype=float)
        if z.shape != x0.shape:
            raise ValueError(f"z shape {z.shape} does not match x0 shape {x0.shape}")
        alpha, beta = self.kernel_params(t)
        return alpha * x0 + beta * z

    def prior_sample(self, dim, rng, size=None):
        """Draw from the base distribution N(0, beta(1)^2 I).

        Parameters
        ----------
        dim : int
            State dimension, >= 1.
        rng : numpy.random.Generator
        size : int, optional
            Number of draws; returns (size, dim) when given, else (dim,).
        """
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        beta1 = self.beta(1.0)
        shape = (dim,) if size is None else (size, dim)
        return beta1 * rng.standard_normal(shape)

    def _check_time(self, t):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {t}")


def kernel_params(schedule, t):
    """Module-level alias of :meth:`DiffusionSchedule.kernel_params`."""
    return schedule.kernel_params(t)


def perturb(schedule, x0, t, z):
    """Module-level alias of :meth:`DiffusionSchedule.perturb`."""
    return schedule.perturb(x0, t, z)


def prior_sample(schedule, dim, rng, size=None):
    """Module-level alias of :meth:`DiffusionSchedule.prior_sample`."""
    return schedule.prior_sample(dim, rng, size=size)
