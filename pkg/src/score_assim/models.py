"""State-space models ``X_{t+1} = f(X_t, w_t)``, ``Y_{t+1} = g(X_{t+1}) + e_{t+1}``.

Every model has additive Gaussian process noise, so ``f`` splits into a
noise-free map ``propagate_mean`` plus ``process_std * w`` with standard normal
``w``. All methods are vectorized: a state argument is either one ``(d,)``
vector or a ``(M, d)`` ensemble.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError


class StateSpaceModel:
    """Base class; subclasses set the attributes below and implement the maps.

    Attributes
    ----------
    state_dim, obs_dim : int
    obs_cov : ndarray (obs_dim, obs_dim)
        Observation-noise covariance; must be symmetric positive definite.
    process_std : ndarray (state_dim,)
    prior_mean : ndarray (state_dim,)
    prior_std : ndarray (state_dim,)
    """

    name = "model"
    elementwise_obs = False

    def _setup_noise(self, obs_cov, process_std, prior_mean, prior_std):
        obs_cov = np.atleast_2d(np.asarray(obs_cov, dtype=np.float64))
        if obs_cov.shape != (self.obs_dim, self.obs_dim):
            raise ConfigError(f"obs_cov must be {self.obs_dim}x{self.obs_dim}, got {obs_cov.shape}")
        if not np.allclose(obs_cov, obs_cov.T):
            raise ConfigError("obs_cov must be symmetric")
        try:
            self.obs_chol = np.linalg.cholesky(obs_cov)
        except np.linalg.LinAlgError:
            raise ConfigError("obs_cov must be positive definite") from None
        self.obs_cov = obs_cov
        self.obs_precision = np.linalg.inv(obs_cov)
        self.obs_diagonal = np.count_nonzero(obs_cov - np.diag(np.diag(obs_cov))) == 0
        self.process_std = np.broadcast_to(np.asarray(process_std, dtype=np.float64), (self.state_dim,)).copy()
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=np.float64), (self.state_dim,)).copy()
        self.prior_std = np.broadcast_to(np.asarray(prior_std, dtype=np.float64), (self.state_dim,)).copy()

    # dynamics
    def propagate_mean(self, x):
        raise NotImplementedError

    def propagate(self, x, rng=None, noise=None):
        """One step of the stochastic dynamics; ``noise`` overrides the standard normal draw."""
        x = np.asarray(x, dtype=np.float64)
        if noise is None:
            noise = rng.standard_normal(x.shape)
        return self.propagate_mean(x) + self.process_std * noise

    def sample_prior(self, rng, n):
        return self.prior_mean + self.prior_std * rng.standard_normal((n, self.state_dim))

    # observations
    def obs_mean(self, x):
        raise NotImplementedError

    def obs_jacobian(self, x):
        """``(r, d)`` Jacobian of ``obs_mean`` for one state, ``(M, r, d)`` for an ensemble."""
        raise NotImplementedError

    def observe(self, x, rng=None, noise=None):
        x = np.asarray(x, dtype=np.float64)
        gx = self.obs_mean(x)
        if noise is None:
            noise = rng.standard_normal(gx.shape)
        return gx + noise @ self.obs_chol.T

    def loglik(self, x, y):
        """``-1/2 (g(x)-y)^T Sigma^{-1} (g(x)-y)``; the normalizing constant is dropped."""
        r = self.obs_mean(x) - y
        return -0.5 * np.einsum("...i,ij,...j->...", r, self.obs_precision, r)

    def loglik_grad(self, x, y):
        """``-J(x)^T Sigma^{-1} (g(x) - y)``."""
        x = np.asarray(x, dtype=np.float64)
        r = self.obs_mean(x) - y
        if self.elementwise_obs and self.obs_diagonal:
            return -self.obs_derivative(x) * r * np.diag(self.obs_precision)
        jac = self.obs_jacobian(x)
        return -np.einsum("...ri,rs,...s->...i", jac, self.obs_precision, r)

    def loglik_curvature(self, x):
        """Diagonal of the Gauss-Newton curvature ``J^T Sigma^{-1} J`` (nonnegative)."""
        x = np.asarray(x, dtype=np.float64)
        if self.elementwise_obs and self.obs_diagonal:
            return self.obs_derivative(x) ** 2 * np.diag(self.obs_precision)
        jac = self.obs_jacobian(x)
        return np.einsum("...ri,rs,...si->...i", jac, self.obs_precision, jac)

    def describe(self):
        return {"name": self.name}


def loglik(model, x, y):
    return model.loglik(x, y)


def loglik_grad(model, x, y):
    return model.loglik_grad(x, y)


def double_well_propagate(x, beta, rng=None, dt=0.1, noise=None):
    """Euler step of ``dS = -4 S (S^2 - 1) dt + beta dB``."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal(x.shape)
    return x - 4.0 * dt * x * (x * x - 1.0) + beta * np.sqrt(dt) * noise


class DoubleWell(StateSpaceModel):
    """Scalar double-well potential observed directly with Gaussian noise."""

    name = "double_well"
    elementwise_obs = True

    def __init__(self, beta=0.3, dt=0.1, obs_std=0.1, x0=1.0, prior_std=0.1):
        if beta <= 0:
            raise ConfigError(f"beta must be positive, got {beta}")
        self.beta, self.dt, self.obs_std = float(beta), float(dt), float(obs_std)
        self.state_dim = self.obs_dim = 1
        self._setup_noise(obs_std**2, beta * np.sqrt(dt), x0, prior_std)

    def propagate_mean(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x - 4.0 * self.dt * x * (x * x - 1.0)

    def obs_mean(self, x):
        return np.asarray(x, dtype=np.float64).copy()

    def obs_derivative(self, x):
        return np.ones_like(np.asarray(x, dtype=np.float64))

    def obs_jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.ones(x.shape[:-1] + (1, 1))

    def describe(self):
        return {"name": self.name, "beta": self.beta, "dt": self.dt, "obs_std": self.obs_std}


def bearing_observe(x, platform=(-5.0, 10.0), full_circle=False):
    """Bearing of target ``x`` seen from ``platform``; single-argument arctan unless ``full_circle``."""
    x = np.asarray(x, dtype=np.float64)
    dx = x[..., 0] - platform[0]
    dy = x[..., 1] - platform[1]
    if full_circle:
        return np.arctan2(dy, dx)[..., None]
    if np.any(dx == 0):
        raise DomainError("bearing undefined: target shares the platform's first coordinate")
    return np.arctan(dy / dx)[..., None]


class BearingOnly(StateSpaceModel):
    """Constant-velocity target in the plane observed through its bearing."""

    name = "bearing"

    def __init__(self, velocity=(4.0, 6.0), diffusion=(0.2, 0.2), dt=0.05,
                 platform=(-5.0, 10.0), obs_var=0.01, x0=(1.0, 1.0), prior_std=0.1,
                 full_circle=False):
        self.velocity = np.asarray(velocity, dtype=np.float64)
        self.diffusion = np.asarray(diffusion, dtype=np.float64)
        self.dt = float(dt)
        self.platform = tuple(float(p) for p in platform)
        self.obs_var = float(obs_var)
        self.full_circle = bool(full_circle)
        self.state_dim, self.obs_dim = 2, 1
        self._setup_noise(obs_var, self.diffusion * np.sqrt(dt), x0, prior_std)

    def propagate_mean(self, x):
        return np.asarray(x, dtype=np.float64) + self.velocity * self.dt

    def obs_mean(self, x):
        return bearing_observe(x, self.platform, self.full_circle)

    def obs_jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        dx = x[..., 0] - self.platform[0]
        dy = x[..., 1] - self.platform[1]
        r2 = dx * dx + dy * dy
        return np.stack([-dy / r2, dx / r2], axis=-1)[..., None, :]

    def describe(self):
        return {"name": self.name, "velocity": self.velocity.tolist(), "diffusion": self.diffusion.tolist(),
                "dt": self.dt, "platform": list(self.platform), "obs_var": self.obs_var,
                "full_circle": self.full_circle}


def bearing_propagate(x, rng=None, noise=None, model=None):
    return (model or BearingOnly()).propagate(x, rng, noise)


def lorenz96_drift(x, forcing=8.0, damping=True):
    """``(x_{i+1} - x_{i-2}) x_{i-1} + F`` with cyclic indices, minus ``x_i`` when damped."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ConfigError(f"Lorenz-96 needs d >= 4, got {x.shape[-1]}")
    x2 = x.reshape(-1, x.shape[-1])
    return kernels.lorenz96_drift(x2, float(forcing), bool(damping)).reshape(x.shape)


def lorenz96_spinup(dim, forcing=8.0, damping=True, dt=0.01, steps=1000):
    """Deterministic point near the attractor: Euler-integrate from a perturbed equilibrium."""
    x = np.full(dim, float(forcing))
    x[0] += 0.01
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            x = x + dt * lorenz96_drift(x, forcing, damping)
    if not np.all(np.isfinite(x)):
        raise ConfigError(f"Lorenz-96 spin-up diverged after {steps} steps; pass x0 explicitly")
    return x


class Lorenz96(StateSpaceModel):
    """Stochastic Euler-discretized Lorenz-96 with elementwise cubic observations."""

    name = "lorenz96"
    elementwise_obs = True

    def __init__(self, dim=10, forcing=8.0, dt=0.01, noise_std=0.1, obs_std=0.1,
                 damping=True, x0=None, prior_std=0.1, spinup_steps=1000):
        if dim < 4:
            raise ConfigError(f"Lorenz-96 needs d >= 4, got {dim}")
        self.state_dim = self.obs_dim = int(dim)
        self.forcing, self.dt = float(forcing), float(dt)
        self.noise_std, self.obs_std = float(noise_std), float(obs_std)
        self.damping = bool(damping)
        if x0 is None:
            # without damping the energy grows without bound, so no attractor to spin up onto
            steps = spinup_steps if self.damping else 0
            x0 = lorenz96_spinup(self.state_dim, self.forcing, self.damping, self.dt, steps)
        self._setup_noise(np.eye(self.obs_dim) * obs_std**2, noise_std, x0, prior_std)

    def propagate_mean(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x + self.dt * lorenz96_drift(x, self.forcing, self.damping)

    def obs_mean(self, x):
        return np.asarray(x, dtype=np.float64) ** 3

    def obs_derivative(self, x):
        return 3.0 * np.asarray(x, dtype=np.float64) ** 2

    def obs_jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = 3.0 * x * x
        return d[..., :, None] * np.eye(self.state_dim)

    def describe(self):
        return {"name": self.name, "dim": self.state_dim, "forcing": self.forcing, "dt": self.dt,
                "noise_std": self.noise_std, "obs_std": self.obs_std, "damping": self.damping}


def lorenz96_propagate(x, rng=None, noise=None, model=None):
    x = np.asarray(x, dtype=np.float64)
    return (model or Lorenz96(dim=x.shape[-1])).propagate(x, rng, noise)


class LinearGaussian(StateSpaceModel):
    """Scalar ``x' = a x + sqrt(q) w``, ``y = c x + sqrt(r) e``; the Kalman filter is exact here."""

    name = "linear_gaussian"
    elementwise_obs = True

    def __init__(self, a=0.9, c=1.0, q=0.04, r=0.25, m0=0.0, p0=1.0):
        if q <= 0 or r <= 0:
            raise ConfigError("q and r must be positive")
        self.a, self.c, self.q, self.r = float(a), float(c), float(q), float(r)
        self.m0, self.p0 = float(m0), float(p0)
        self.state_dim = self.obs_dim = 1
        self._setup_noise(r, np.sqrt(q), m0, np.sqrt(p0))

    def propagate_mean(self, x):
        return self.a * np.asarray(x, dtype=np.float64)

    def obs_mean(self, x):
        return self.c * np.asarray(x, dtype=np.float64)

    def obs_derivative(self, x):
        return np.full_like(np.asarray(x, dtype=np.float64), self.c)

    def obs_jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.full(x.shape[:-1] + (1, 1), self.c)

    def describe(self):
        return {"name": self.name, "a": self.a, "c": self.c, "q": self.q, "r": self.r,
                "m0": self.m0, "p0": self.p0}


def linear_gaussian_model(a, c, q, r, m0=0.0, p0=1.0):
    return LinearGaussian(a, c, q, r, m0, p0)


@dataclass
class Trajectory:
    """Twin-experiment data: ``truth`` (T, d) and ``observations`` (T, r)."""

    truth: np.ndarray
    observations: np.ndarray
    seed: int = None

    def __post_init__(self):
        self.truth = np.atleast_2d(np.asarray(self.truth, dtype=np.float64))
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        if self.truth.shape[0] != self.observations.shape[0]:
            raise ConfigError("truth and observations must have the same number of rows")

    @property
    def steps(self):
        return self.truth.shape[0]


def simulate_truth(model, steps, seed, shocks=(), obs_noise=True):
    """Simulate a truth path from a prior draw and observe it after every step.

    ``shocks`` is a sequence of ``(step, magnitude)`` pairs; at that 1-based step
    a ``U(-magnitude, magnitude)`` perturbation is added to every coordinate.
    ``obs_noise=False`` records ``g(truth)`` exactly.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng(seed)
    shock_at = {}
    for step, mag in shocks:
        shock_at[int(step)] = shock_at.get(int(step), 0.0) + float(mag)
    x = model.sample_prior(rng, 1)[0]
    truth = np.empty((steps, model.state_dim))
    obs = np.empty((steps, model.obs_dim))
    for t in range(1, steps + 1):
        x = model.propagate(x, rng)
        if t in shock_at:
            x = x + rng.uniform(-shock_at[t], shock_at[t], size=x.shape)
        truth[t - 1] = x
        obs[t - 1] = model.observe(x, rng) if obs_noise else model.obs_mean(x)
    return Trajectory(truth, obs, seed if isinstance(seed, (int, np.integer)) else None)


def write_trajectory_csv(traj, path):
    d, r = traj.truth.shape[1], traj.observations.shape[1]
    header = ["step"] + [f"x_{i}" for i in range(d)] + [f"y_{i}" for i in range(r)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(traj.steps):
            w.writerow([t + 1] + [f"{v:.17g}" for v in traj.truth[t]] + [f"{v:.17g}" for v in traj.observations[t]])


def read_trajectory_csv(path, seed=None):
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xs = [i for i, h in enumerate(header) if h.startswith("x_")]
    ys = [i for i, h in enumerate(header) if h.startswith("y_")]
    data = np.array([[float(v) for v in row] for row in body]).reshape(len(body), len(header))
    return Trajectory(data[:, xs], data[:, ys], seed)
