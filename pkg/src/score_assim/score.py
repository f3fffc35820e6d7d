"""Score functions, denoising score-matching training and likelihood injection.

A score function is any callable ``score(z, tau) -> array`` that maps a
``(J, d)`` batch of diffused states and a scalar pseudo-time to ``(J, d)``
gradients of the log marginal density, and carries an integer ``dim``.

The network is trained to predict the forward noise: with
``z_tau = alpha z0 + beta zeta`` it regresses ``eps_hat(z_tau, tau) ~ zeta`` and
the score is recovered as ``-eps_hat / beta``. By default ``eps_hat`` is the
network output plus the exact noise predictor of a standard normal target,
``beta z / (alpha^2 + beta^2)``, so the network only learns the departure
from ``N(0, I)``. That reference term keeps samples that stray beyond the
training range under a linear restoring drift; a bounded tanh network alone
lets them run away in the reverse sampler.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from . import kernels
from .diffusion import DiffusionSchedule
from .errors import ConfigError, NoProgressWarning, TrainingError, UpdateError
from .neural import AdamState, NetParams, opt_step


class ScoreFunction(Protocol):
    dim: int

    def __call__(self, z: np.ndarray, tau: float) -> np.ndarray: ...


def _with_time(z, tau):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return np.hstack([z, np.full((z.shape[0], 1), tau)])


def reference_noise(z, tau):
    """Noise predictor of a standard normal target: ``beta z / (alpha^2 + beta^2)``."""
    tau = np.asarray(tau, dtype=np.float64)
    return tau * z / ((1.0 - tau) ** 2 + tau * tau)


@dataclass
class NeuralScore:
    """Score ``-eps_hat([z, tau]) / beta(tau)`` of a noise-prediction network.

    With ``gaussian_reference=False`` the noise prediction is the bare network
    output, so ``beta * score == -net_forward`` exactly.
    """

    params: NetParams
    sched: DiffusionSchedule
    gaussian_reference: bool = True

    @property
    def dim(self):
        return self.params.state_dim

    def __call__(self, z, tau):
        t = self.sched.clip(tau)
        z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
        eps_hat = kernels.mlp_forward(self.params.flat, self.params.dims, _with_time(z2, t))
        if self.gaussian_reference:
            eps_hat += reference_noise(z2, t)
        out = -eps_hat / max(t, self.sched.clip_eps)
        return out.reshape(np.shape(z))


def analytic_gaussian_score(mu, var, z, tau):
    """Exact marginal score at pseudo-time ``tau`` when ``Z_0 ~ N(mu, diag(var))``.

    The diffused marginal is ``N(alpha mu, alpha^2 var + beta^2)`` with the
    unclipped ``alpha = 1 - tau`` and ``beta = tau``.
    """
    alpha, beta = 1.0 - tau, tau
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise ConfigError("variances must be positive")
    return -(np.asarray(z, dtype=np.float64) - alpha * mu) / (alpha**2 * var + beta**2)


@dataclass
class GaussianScore:
    """``analytic_gaussian_score`` packaged as a score function."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), self.mu.shape).copy()

    @property
    def dim(self):
        return self.mu.shape[0]

    def __call__(self, z, tau):
        return analytic_gaussian_score(self.mu, self.var, z, tau)


WEIGHTINGS = {
    "unit": lambda beta: np.ones_like(beta),
    "beta_sq": lambda beta: beta * beta,
}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weighting: str = "unit"
    gaussian_reference: bool = True
    ema: float = 0.99
    final_lr_fraction: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError(f"ema must lie in [0, 1), got {self.ema}")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ConfigError(f"final_lr_fraction must lie in (0, 1], got {self.final_lr_fraction}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.weighting!r}; choose from {sorted(WEIGHTINGS)}")


def _draw_noised(sched, z0, rng):
    n, d = z0.shape
    eps = sched.clip_eps
    tau = rng.uniform(eps, 1.0 - eps, size=n)
    zeta = rng.standard_normal((n, d))
    z_tau = (1.0 - tau)[:, None] * z0 + tau[:, None] * zeta
    return np.hstack([z_tau, tau[:, None]]), tau, zeta


def _loss_grad(params, inputs, tau, zeta, weighting, gaussian_reference):
    lam = WEIGHTINGS[weighting](tau)[:, None]
    n = inputs.shape[0]
    out, a1, a2 = kernels.mlp_forward_cache(params.flat, params.dims, inputs)
    resid = out - zeta
    if gaussian_reference:
        resid += reference_noise(inputs[:, :-1], tau[:, None])
    loss = float(np.sum(lam * resid * resid) / n)
    grad = kernels.mlp_backward(params.flat, params.dims, inputs, a1, a2, (2.0 / n) * lam * resid)
    return loss, grad


def dsm_loss_grad(params, sched, batch, rng, weighting="unit", noise=None, gaussian_reference=True):
    """Denoising score-matching loss and its parameter gradient on one batch.

    For every row ``z0`` a pseudo-time ``tau ~ U[clip_eps, 1 - clip_eps]`` and a
    noise ``zeta ~ N(0, I)`` are drawn; the residual ``zeta + beta S`` equals
    ``eps_hat(z_tau, tau) - zeta`` and the loss is the mean weighted squared norm.

    ``noise`` optionally fixes ``(tau, zeta)`` instead of drawing them.
    """
    z0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if z0.shape[0] == 0:
        raise ConfigError("empty training batch")
    if noise is None:
        inputs, tau, zeta = _draw_noised(sched, z0, rng)
    else:
        tau, zeta = (np.asarray(a, dtype=np.float64) for a in noise)
        z_tau = (1.0 - tau)[:, None] * z0 + tau[:, None] * zeta
        inputs = np.hstack([z_tau, tau[:, None]])
    loss, grad = _loss_grad(params, inputs, tau, zeta, weighting, gaussian_reference)
    return loss, params.like(grad)


def train_score(samples, cfg, init, rng, sched=None, history=None, opt_state=None, warn_no_progress=True):
    """Fit the noise-prediction network to ``samples`` by minibatch Adam.

    Parameters
    ----------
    samples : ndarray (J, d)
        Training set, ideally standardized to zero mean and unit scale.
    cfg : TrainConfig
    init : NetParams
        Starting point; it is copied, never mutated.
    rng : numpy.random.Generator
    sched : DiffusionSchedule, optional
        Only ``clip_eps`` matters here.
    history : list, optional
        Receives the mean loss of every epoch.
    opt_state : AdamState, optional
        Optimizer state to continue from; a fresh one is used otherwise.
        Its ``step`` counter is advanced by every minibatch.
    warn_no_progress : bool
        Emit ``NoProgressWarning`` when the running-average loss over the
        last quarter of the epochs is not below the first epoch's loss. Warm
        starts on data the network already fits sit at the noise floor, so
        callers doing those may switch the check off.

    Returns
    -------
    NetParams
    """
    sched = sched or DiffusionSchedule()
    z0 = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = z0.shape
    if d != init.state_dim:
        raise ConfigError(f"samples have dimension {d} but the network expects {init.state_dim}")
    if cfg.batch_size > n:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds the {n} available samples")
    params = init.copy()
    state = opt_state or AdamState.for_params(params, lr=cfg.lr)
    # bias-corrected running average of the iterates, as in Adam's moments
    avg = np.zeros_like(params.flat) if cfg.ema > 0 else None
    n_avg = 0
    epoch_losses = []
    for epoch in range(1, cfg.epochs + 1):
        frac = (epoch - 1) / max(cfg.epochs - 1, 1)
        state.lr = cfg.lr * cfg.final_lr_fraction ** frac
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = z0[order[start:start + cfg.batch_size]]
            inputs, tau, zeta = _draw_noised(sched, rows, rng)
            loss, grad = _loss_grad(params, inputs, tau, zeta, cfg.weighting, cfg.gaussian_reference)
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch=epoch)
            try:
                opt_step(params, grad, state)
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch=epoch) from exc
            if avg is not None:
                avg *= cfg.ema
                avg += (1.0 - cfg.ema) * params.flat
                n_avg += 1
            total += loss * rows.shape[0]
        epoch_losses.append(total / n)
    if avg is not None:
        params.flat[:] = avg / (1.0 - cfg.ema**n_avg)
    if history is not None:
        history.extend(epoch_losses)
    tail = np.mean(epoch_losses[-max(1, cfg.epochs // 4):])
    if warn_no_progress and cfg.epochs > 1 and not tail < epoch_losses[0]:
        warnings.warn(
            f"score training made no progress: epoch 1 loss {epoch_losses[0]:.4g}, "
            f"running average {tail:.4g}",
            NoProgressWarning,
            stacklevel=2,
        )
    return params


def linear_damping(tau):
    """``h(tau) = 1 - tau``."""
    return 1.0 - tau


def validate_damping(h, n_grid=101):
    """Reject ``h`` unless ``h(0) = 1``, ``h(1) = 0`` and it never increases on a grid."""
    if not np.isclose(h(0.0), 1.0, rtol=0, atol=1e-12):
        raise ConfigError(f"damping function must satisfy h(0) = 1, got {h(0.0)}")
    if not np.isclose(h(1.0), 0.0, rtol=0, atol=1e-12):
        raise ConfigError(f"damping function must satisfy h(1) = 0, got {h(1.0)}")
    values = np.array([h(t) for t in np.linspace(0.0, 1.0, n_grid)])
    if np.any(np.diff(values) > 1e-12):
        raise ConfigError("damping function must be nonincreasing on [0, 1]")
    return h


def posterior_score(prior, loglik_grad, h, z, tau):
    """``prior(z, tau) + h(tau) * loglik_grad(z)``, the likelihood evaluated at the diffused state."""
    g = loglik_grad(z)
    if not np.all(np.isfinite(g)):
        raise UpdateError(f"non-finite log-likelihood gradient at tau={tau}")
    return prior(z, tau) + h(tau) * g


@dataclass
class PosteriorScore:
    """Prior score plus the damped log-likelihood gradient.

    ``curvature``, when given, returns a nonnegative per-coordinate estimate of
    ``-d loglik_grad / dz``; the sampler then integrates the likelihood term
    linearly implicitly (see ``reverse_sample``).
    """

    prior: ScoreFunction
    loglik_grad: Callable[[np.ndarray], np.ndarray]
    h: Callable[[float], float] = linear_damping
    curvature: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        validate_damping(self.h)
        if self.curvature is not None:
            self.stiffness = self._stiffness

    @property
    def dim(self):
        return self.prior.dim

    def __call__(self, z, tau):
        return posterior_score(self.prior, self.loglik_grad, self.h, z, tau)

    def _stiffness(self, z, tau):
        return self.h(tau) * self.curvature(z)
