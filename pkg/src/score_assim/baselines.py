"""Reference filters: auxiliary particle filter, stochastic EnKF, exact Kalman and a 1-d grid filter."""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DegeneracyError

log = logging.getLogger(__name__)


class DegeneracyWarning(RuntimeWarning):
    """Particle weights underflowed and were replaced by uniform weights."""


def systematic_resample(weights, rng):
    """Ancestor indices from one uniform offset and stratified inversion of the weight CDF."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigError("weights must be a nonempty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DegeneracyError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegeneracyError("all particle weights are zero")
    return kernels.systematic_resample(w / total, float(rng.uniform()))


def ess(weights):
    """Effective sample size ``1 / sum(w^2)`` of normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    return 1.0 / np.sum(w * w)


def normalize_log_weights(logw):
    """Normalize log weights by max-subtraction; ``None`` when every weight underflows."""
    logw = np.asarray(logw, dtype=np.float64)
    # inf - inf from two underflowed likelihoods carries no weight
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = np.max(logw)
    if not np.isfinite(top):
        return None
    w = np.exp(logw - top)
    return w / w.sum()


@dataclass
class WeightedEnsemble:
    """Particles ``(M, d)`` with normalized weights ``(M,)``."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.particles.shape[0],):
            raise ConfigError("one weight per particle required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, particles):
        particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
        m = particles.shape[0]
        return cls(particles, np.full(m, 1.0 / m))

    @property
    def size(self):
        return self.particles.shape[0]

    def ess(self):
        return ess(self.weights)

    def mean(self):
        return self.weights @ self.particles


def _weights_or_uniform(logw, stage, info):
    w = normalize_log_weights(logw)
    if w is None:
        info["degenerate"] = True
        msg = f"APF {stage} weights underflowed; falling back to uniform weights"
        log.warning(msg)
        warnings.warn(msg, DegeneracyWarning, stacklevel=3)
        w = np.full(len(logw), 1.0 / len(logw))
    return w


def apf_step(ens, model, y, rng, info=None):
    """One cycle of the two-stage auxiliary particle filter.

    Ancestors are preselected with lookahead weights ``w_m p(y | mu_m)`` where
    ``mu_m`` is the noise-free propagation of particle ``m``; the selected
    particles are propagated with noise and reweighted by
    ``p(y | x) / p(y | mu_ancestor)``. The ensemble is then systematically
    resampled to equal weights.

    ``info`` (a dict) receives ``ess`` (effective sample size of the
    second-stage weights before the final resample) and ``degenerate``.
    """
    info = {} if info is None else info
    info["degenerate"] = False
    y = np.asarray(y, dtype=np.float64)
    M = ens.size
    with np.errstate(divide="ignore"):
        logw_prev = np.log(ens.weights)
    mu = model.propagate_mean(ens.particles)
    look = model.loglik(mu, y)
    w1 = _weights_or_uniform(logw_prev + look, "first-stage", info)
    idx = systematic_resample(w1, rng)
    particles = model.propagate(ens.particles[idx], rng)
    with np.errstate(invalid="ignore"):
        logw2 = model.loglik(particles, y) - look[idx]
    w2 = _weights_or_uniform(logw2, "second-stage", info)
    info["ess"] = float(ess(w2))
    log.debug("APF ESS %.1f of %d", info["ess"], M)
    final = systematic_resample(w2, rng)
    return WeightedEnsemble.uniform(particles[final])


def enkf_step(ensemble, model, y, rng, info=None):
    """Stochastic ensemble Kalman filter: propagate, then update with perturbed observations."""
    x = np.atleast_2d(np.asarray(ensemble, dtype=np.float64))
    M = x.shape[0]
    if M < 2:
        raise ConfigError(f"EnKF needs at least 2 members, got {M}")
    y = np.asarray(y, dtype=np.float64)
    x = model.propagate(x, rng)
    gx = model.obs_mean(x)
    xa = x - x.mean(axis=0)
    ga = gx - gx.mean(axis=0)
    cxy = xa.T @ ga / (M - 1)
    s = ga.T @ ga / (M - 1) + model.obs_cov
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        log.warning("EnKF innovation covariance singular; adding 1e-10 I")
        if info is not None:
            info["regularized"] = True
        s = s + 1e-10 * np.eye(s.shape[0])
    gain = np.linalg.solve(s, cxy.T).T
    eta = rng.standard_normal(gx.shape) @ model.obs_chol.T
    return x + (y + eta - gx) @ gain.T


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ConfigError("covariance shape does not match the mean")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-10):
            raise ConfigError("covariance must be symmetric")
        if self.mean.size and np.linalg.eigvalsh(self.cov).min() < -1e-10:
            raise ConfigError("covariance must be positive semidefinite")

    @property
    def std(self):
        return np.sqrt(np.diag(self.cov))


def _as_matrix(v, n):
    v = np.asarray(v, dtype=np.float64)
    return v * np.eye(n) if v.ndim == 0 else np.atleast_2d(v)


def kalman_step(belief, a, c, q, r, y):
    """Exact predict/update for ``x' = a x + w``, ``y = c x + e`` with ``w ~ N(0, q)``, ``e ~ N(0, r)``.

    Scalars stand for multiples of the identity.
    """
    m, P = belief.mean, belief.cov
    d = m.size
    a, c, q = _as_matrix(a, d), _as_matrix(c, d), _as_matrix(q, d)
    r = _as_matrix(r, c.shape[0])
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    m = a @ m
    P = a @ P @ a.T + q
    S = c @ P @ c.T + r
    K = np.linalg.solve(S, c @ P).T
    m = m + K @ (y - c @ m)
    P = (np.eye(d) - K @ c) @ P
    return GaussianBelief(m, 0.5 * (P + P.T))


class GridFilter:
    """Deterministic Bayes filter for scalar states on a uniform grid.

    Prediction integrates the Gaussian transition density against the current
    grid density by quadrature; the update multiplies by the likelihood and
    renormalizes.
    """

    def __init__(self, model, lo=-3.0, hi=3.0, n=501):
        if model.state_dim != 1:
            raise ConfigError("the grid filter handles 1-d states only")
        self.model = model
        self.grid = np.linspace(lo, hi, n)
        self.dx = self.grid[1] - self.grid[0]
        mu = model.propagate_mean(self.grid[:, None])[:, 0]
        sd = model.process_std[0]
        # kernel[i, j] = p(x_i | x_j)
        self.kernel = np.exp(-0.5 * ((self.grid[:, None] - mu[None, :]) / sd) ** 2) / (np.sqrt(2 * np.pi) * sd)
        pm, ps = model.prior_mean[0], model.prior_std[0]
        self.density = np.exp(-0.5 * ((self.grid - pm) / ps) ** 2)
        self.density /= self.density.sum() * self.dx

    def step(self, y):
        pred = self.kernel @ self.density * self.dx
        logl = self.model.loglik(self.grid[:, None], np.atleast_1d(y))
        post = pred * np.exp(logl - logl.max())
        total = post.sum() * self.dx
        if not total > 0:
            raise DegeneracyError("grid posterior has zero mass")
        self.density = post / total
        return self.mean()

    def mean(self):
        return float(np.sum(self.grid * self.density) * self.dx)

    def std(self):
        m = self.mean()
        return float(np.sqrt(np.sum((self.grid - m) ** 2 * self.density) * self.dx))
