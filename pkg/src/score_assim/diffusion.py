"""Linear forward diffusion and its Euler-Maruyama reverse-time sampler.

The forward process uses ``alpha(tau) = 1 - tau`` and ``beta(tau) = tau`` so that
``Z_tau | Z_0 ~ N(alpha Z_0, beta^2 I)`` and ``Z_1 ~ N(0, I)``. The matching SDE
coefficients are

    b(tau)       = d log(alpha) / d tau          = -1 / (1 - tau)
    sigma^2(tau) = d beta^2 / d tau - 2 b beta^2 = 2 tau / (1 - tau)

Both blow up at ``tau = 1``, so every evaluation clips ``tau`` into
``[clip_eps, 1 - clip_eps]``.

A *sample set* throughout the package is a plain ``(J, d)`` float64 array.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, SamplerDivergenceError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Pseudo-time grid with ``num_steps`` uniform steps and coefficient clipping."""

    num_steps: int = 600
    clip_eps: float = 1e-3

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ConfigError(f"num_steps must be a positive integer, got {self.num_steps}")
        if not 0.0 < self.clip_eps < 0.5:
            raise ConfigError(f"clip_eps must lie in (0, 0.5), got {self.clip_eps}")

    @property
    def dtau(self):
        return 1.0 / self.num_steps

    @property
    def grid(self):
        return np.arange(self.num_steps + 1) / self.num_steps

    def clip(self, tau):
        tau = float(tau)
        if not 0.0 <= tau <= 1.0:
            raise DomainError(f"pseudo-time must lie in [0, 1], got {tau}")
        return min(max(tau, self.clip_eps), 1.0 - self.clip_eps)

    def coeffs(self, tau):
        """``(alpha, beta, b, sigma^2)`` at the clipped pseudo-time."""
        t = self.clip(tau)
        return 1.0 - t, t, -1.0 / (1.0 - t), 2.0 * t / (1.0 - t)

    def alpha(self, tau):
        return 1.0 - self.clip(tau)

    def beta(self, tau):
        return self.clip(tau)


def schedule_coeffs(sched, tau):
    return sched.coeffs(tau)


def forward_conditional_sample(sched, z0, tau, rng):
    """Draw ``Z_tau`` given ``Z_0 = z0`` (any shape) from ``N(alpha z0, beta^2 I)``."""
    alpha, beta, _, _ = sched.coeffs(tau)
    z0 = np.asarray(z0, dtype=np.float64)
    return alpha * z0 + beta * rng.standard_normal(z0.shape)


def reverse_sample(sched, score, n_samples, rng, dim=None):
    """Integrate the reverse-time SDE from ``N(0, I)`` at ``tau = 1`` down to ``tau = 0``.

    Each step evaluates the coefficients and the score at the upper grid point::

        z_k = z_{k+1} - [b z_{k+1} - sigma^2 S(z_{k+1}, tau_{k+1})] dtau + sigma dW

    with ``dW ~ N(0, dtau I)``. When ``score`` exposes ``stiffness(z, tau)``
    (a nonnegative per-coordinate curvature of a stiff part of the score),
    the increment is divided by ``1 + sigma^2 dtau stiffness``: that part of the
    drift is then treated linearly implicitly and the step stays stable.

    Parameters
    ----------
    sched : DiffusionSchedule
    score : callable
        ``score(z, tau)`` for a ``(J, d)`` batch and a scalar pseudo-time.
    n_samples : int
    rng : numpy.random.Generator
    dim : int, optional
        State dimension; defaults to ``score.dim``.

    Returns
    -------
    ndarray of shape (n_samples, dim)
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    dim = score.dim if dim is None else dim
    stiffness = getattr(score, "stiffness", None)
    K = sched.num_steps
    dtau = 1.0 / K
    sqrt_dtau = np.sqrt(dtau)
    z = rng.standard_normal((n_samples, dim))
    for k in range(K - 1, -1, -1):
        tau = sched.clip((k + 1) / K)
        b = -1.0 / (1.0 - tau)
        sigma2 = 2.0 * tau / (1.0 - tau)
        s = score(z, tau)
        if not np.all(np.isfinite(s)):
            raise SamplerDivergenceError(k + 1)
        inc = (sigma2 * s - b * z) * dtau
        inc += np.sqrt(sigma2) * sqrt_dtau * rng.standard_normal(z.shape)
        if stiffness is not None:
            inc /= 1.0 + sigma2 * dtau * stiffness(z, tau)
        z = z + inc
        if not np.all(np.isfinite(z)):
            raise SamplerDivergenceError(k)
    return z
