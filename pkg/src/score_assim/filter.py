"""Score-based filter: predict by sampling and propagating, update by likelihood injection.

The diffusion model lives in a normalized space. Every time a new sample set is
produced the filter fits a ``Standardizer`` to it, trains the score network on
the standardized samples (warm-started from the previous network) and maps
sampler output back to physical units. The likelihood gradient of the
observation is pulled back into normalized coordinates with the chain rule.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .diffusion import DiffusionSchedule, reverse_sample
from .errors import ConfigError, FilterStepError, ScoreAssimError
from .neural import AdamState, NetParams, init_params
from .score import NeuralScore, PosteriorScore, TrainConfig, linear_damping, train_score

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class Standardizer:
    """Affine map ``x -> (x - mean) / scale`` with a strictly positive per-coordinate scale."""

    mean: np.ndarray
    scale: np.ndarray

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def destandardize(self, z):
        return self.mean + self.scale * np.asarray(z, dtype=np.float64)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))


def fit_standardizer(samples, scale_floor=SCALE_FLOOR):
    """Per-coordinate mean and population standard deviation, clamped below by ``scale_floor``."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] < 2:
        raise ConfigError(f"need at least 2 samples to fit a standardizer, got {x.shape[0]}")
    return Standardizer(x.mean(axis=0), np.maximum(x.std(axis=0), scale_floor))


@dataclass
class SFConfig:
    """Settings of the score-based filter.

    ``implicit_likelihood`` integrates the injected likelihood term of the
    reverse sampler linearly implicitly using the Gauss-Newton curvature of the
    log-likelihood; it matters when observations are precise compared with the
    prior spread. ``refit_posterior=False`` carries the posterior samples to the
    next prediction instead of re-encoding them in the network and re-sampling.
    """

    n_samples: int = 2000
    width: int = 50
    num_steps: int = 600
    clip_eps: float = 1e-3
    init_epochs: int = 200
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weighting: str = "unit"
    gaussian_reference: bool = True
    ema: float = 0.99
    final_lr_fraction: float = 1.0
    implicit_likelihood: bool = False
    estimator: str = "mean"
    refit_posterior: bool = True

    def __post_init__(self):
        for name in ("n_samples", "width", "num_steps", "init_epochs", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.batch_size > self.n_samples:
            raise ConfigError(f"batch_size {self.batch_size} exceeds n_samples {self.n_samples}")
        if self.estimator not in ("mean", "median"):
            raise ConfigError(f"estimator must be 'mean' or 'median', got {self.estimator!r}")
        # validates lr and weighting
        self.train_config()
        self.schedule()

    def train_config(self, initial=False):
        return TrainConfig(self.init_epochs if initial else self.epochs, self.batch_size, self.lr,
                           self.weighting, self.gaussian_reference, self.ema, self.final_lr_fraction)

    def schedule(self):
        return DiffusionSchedule(self.num_steps, self.clip_eps)


@dataclass
class ScoreFilterState:
    """Network encoding the current filtering density in normalized coordinates.

    ``opt_state.step`` counts every optimizer step ever taken, so the analytic
    nature of the update can be asserted by comparing it before and after.
    """

    params: NetParams
    std: Standardizer
    sched: DiffusionSchedule
    J: int
    cfg: SFConfig
    opt_state: AdamState
    step: int = 0
    carried: Optional[np.ndarray] = None
    diagnostics: list = field(default_factory=list)

    @property
    def train_steps(self):
        return self.opt_state.step

    def prior_score(self):
        return NeuralScore(self.params, self.sched, self.cfg.gaussian_reference)

    def sample(self, rng, score=None):
        """Draw ``J`` physical-space samples from ``score`` (default: the stored network)."""
        z = reverse_sample(self.sched, score or self.prior_score(), self.J, rng)
        return self.std.destandardize(z)


def _copy_opt(opt):
    return replace(opt, m=opt.m.copy(), v=opt.v.copy())


def _fit(state, samples, rng, losses, initial=False):
    """Refit standardizer and network to ``samples``; returns a new state (inputs untouched)."""
    std = fit_standardizer(samples)
    opt = _copy_opt(state.opt_state)
    params = train_score(std.standardize(samples), state.cfg.train_config(initial), state.params, rng,
                         state.sched, history=losses, opt_state=opt, warn_no_progress=initial)
    return replace(state, params=params, std=std, opt_state=opt)


def sf_init(prior_sampler, J, cfg, rng):
    """Sample the initial density, standardize, and train a fresh network on it.

    Parameters
    ----------
    prior_sampler : callable
        ``prior_sampler(rng, n)`` returning an ``(n, d)`` array.
    J : int
        Sample count used for training and for every sampler call.
    cfg : SFConfig
    rng : numpy.random.Generator
    """
    if J < 2:
        raise ConfigError(f"J must be >= 2, got {J}")
    samples = np.atleast_2d(np.asarray(prior_sampler(rng, J), dtype=np.float64))
    d = samples.shape[1]
    params = init_params(d, cfg.width, rng)
    state = ScoreFilterState(params, Standardizer.identity(d), cfg.schedule(), J, cfg,
                             AdamState.for_params(params, lr=cfg.lr))
    losses = []
    state = _fit(state, samples, rng, losses, initial=True)
    state.diagnostics = [{"step": 0, "train_loss": losses}]
    return state


def sf_predict(state, model, rng):
    """Sample the current density, push the samples through the dynamics and refit.

    Returns ``(state', predicted_samples)``; ``state'.params`` encodes the
    predicted density.
    """
    post = state.carried if state.carried is not None else state.sample(rng)
    pred = model.propagate(post, rng)
    losses = []
    new = _fit(state, pred, rng, losses)
    new.carried = None
    new.diagnostics = state.diagnostics + [{"step": state.step + 1, "predict_loss": losses}]
    return new, pred


def sf_update(state, model, y):
    """Posterior score in normalized space: predicted score plus the damped, pulled-back likelihood gradient.

    No training happens here.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.obs_dim,):
        raise ConfigError(f"observation must have shape ({model.obs_dim},), got {y.shape}")
    std = state.std

    def loglik_grad(z):
        return std.scale * model.loglik_grad(std.destandardize(z), y)

    curvature = None
    if state.cfg.implicit_likelihood:
        def curvature(z):
            return std.scale**2 * model.loglik_curvature(std.destandardize(z))

    return PosteriorScore(state.prior_score(), loglik_grad, linear_damping, curvature)


def _moments(x):
    return {"mean": x.mean(axis=0).tolist(), "std": x.std(axis=0).tolist()}


def sf_step(state, model, y, rng):
    """One assimilation cycle: predict, inject the observation, sample the posterior.

    Returns ``(state', estimate, posterior_samples)`` where the estimate is the
    posterior sample mean (or median, per ``cfg.estimator``). Any failure is
    re-raised as ``FilterStepError`` carrying the assimilation-step index.
    """
    t = state.step + 1
    t0 = time.perf_counter()
    try:
        pred_state, pred = sf_predict(state, model, rng)
        post_score = sf_update(pred_state, model, y)
        post = pred_state.sample(rng, post_score)
        if state.cfg.refit_posterior:
            losses = []
            new = _fit(pred_state, post, rng, losses)
        else:
            new, losses = replace(pred_state, carried=post), []
    except (ScoreAssimError, ValueError, FloatingPointError, RuntimeError) as exc:
        raise FilterStepError(t, exc) from exc
    if state.cfg.estimator == "median":
        estimate = np.median(post, axis=0)
    else:
        estimate = post.mean(axis=0)
    record = pred_state.diagnostics[-1]
    record.update({"posterior_loss": losses, "predicted": _moments(pred), "posterior": _moments(post),
                   "wall_time": time.perf_counter() - t0})
    new.step = t
    new.diagnostics = pred_state.diagnostics
    return new, estimate, post


def write_diagnostics(records, path):
    """Write per-step diagnostics records as JSON lines."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def sf_config_dict(cfg):
    return asdict(cfg)
