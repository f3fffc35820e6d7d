"""Twin experiments: simulate a truth, run one filter on its observations, score the estimates.

An experiment is described by a JSON document whose keys mirror
``ExperimentConfig``; unknown keys are rejected. Model, filter and sampler
settings sit in the sub-dictionaries ``model``, ``sf``, ``apf`` and ``enkf``.
"""

import csv
import inspect
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .baselines import GaussianBelief, WeightedEnsemble, apf_step, enkf_step, kalman_step
from .errors import ConfigError, FilterStepError, ScoreAssimError
from .filter import SFConfig, sf_init, sf_step, write_diagnostics
from .models import BearingOnly, DoubleWell, LinearGaussian, Lorenz96, simulate_truth

log = logging.getLogger(__name__)

MODELS = {
    "double_well": DoubleWell,
    "bearing": BearingOnly,
    "lorenz96": Lorenz96,
    "linear_gaussian": LinearGaussian,
}
FILTERS = ("sf", "apf", "enkf", "kf", "none")
FORMATS = ("csv", "jsonl")
APF_DEFAULTS = {"n_particles": 1000, "ess_threshold": 0.01}
ENKF_DEFAULTS = {"n_members": 100}
STEP_ERRORS = (ScoreAssimError, ValueError, FloatingPointError, np.linalg.LinAlgError)


def _check_keys(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    """Everything needed to replay one experiment exactly.

    ``filter`` is one of ``sf``, ``apf``, ``enkf``, ``kf`` (linear-Gaussian
    problems only) or ``none``, which propagates the prior mean without
    assimilating anything. ``shocks`` lists ``[step, magnitude]`` pairs.
    ``repeat_seed`` gives every repetition the seeds of repetition 0.
    """

    problem: str
    filter: str = "sf"
    steps: int = 100
    seed: int = 0
    repetitions: int = 1
    model: dict = field(default_factory=dict)
    shocks: list = field(default_factory=list)
    sf: dict = field(default_factory=dict)
    apf: dict = field(default_factory=dict)
    enkf: dict = field(default_factory=dict)
    score_loss: str = "denoising"
    repeat_seed: bool = False
    description: str = ""

    def __post_init__(self):
        if self.problem not in MODELS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {sorted(MODELS)}")
        if self.filter not in FILTERS:
            raise ConfigError(f"unknown filter {self.filter!r}; choose from {list(FILTERS)}")
        if self.filter == "kf" and self.problem != "linear_gaussian":
            raise ConfigError("the Kalman filter is exact only for the linear_gaussian problem")
        for name in ("steps", "repetitions"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.score_loss != "denoising":
            raise ConfigError("only the denoising score-matching loss is implemented")
        try:
            self.shocks = [[int(s), float(m)] for s, m in self.shocks]
        except (TypeError, ValueError):
            raise ConfigError("shocks must be a list of [step, magnitude] pairs") from None
        self.build_model()
        self.sf_config()
        _check_keys("apf", self.apf, APF_DEFAULTS)
        _check_keys("enkf", self.enkf, ENKF_DEFAULTS)
        self.apf = {**APF_DEFAULTS, **self.apf}
        self.enkf = {**ENKF_DEFAULTS, **self.enkf}
        if self.apf["n_particles"] < 1:
            raise ConfigError("apf.n_particles must be >= 1")
        if self.enkf["n_members"] < 2:
            raise ConfigError("enkf.n_members must be >= 2")

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        _check_keys("configuration", data, [f.name for f in fields(cls)])
        if "problem" not in data:
            raise ConfigError("configuration needs a 'problem'")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def build_model(self):
        cls = MODELS[self.problem]
        _check_keys(f"model ({self.problem})", self.model, inspect.signature(cls).parameters)
        try:
            return cls(**self.model)
        except TypeError as exc:
            raise ConfigError(f"invalid model settings: {exc}") from None

    def sf_config(self):
        _check_keys("sf", self.sf, [f.name for f in fields(SFConfig)])
        try:
            return SFConfig(**self.sf)
        except TypeError as exc:
            raise ConfigError(f"invalid sf settings: {exc}") from None

    def to_dict(self):
        """Resolved configuration, including defaults, for the output echo."""
        out = asdict(self)
        out["sf"] = asdict(self.sf_config())
        out["model"] = self.build_model().describe() | self.model
        return out

    def replace(self, **changes):
        return ExperimentConfig.from_dict({**asdict(self), **changes})


def list_presets():
    return sorted(p.name[:-5] for p in resources.files("score_assim.presets").iterdir()
                  if p.name.endswith(".json"))


def load_preset(name):
    res = resources.files("score_assim.presets") / f"{name}.json"
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return ExperimentConfig.from_dict(json.loads(res.read_text()))


def rmse(estimates, truth):
    """Per-step RMSE pooled over state dimensions (and repetitions) and its mean over steps.

    Accepts ``(T, d)`` arrays or ``(R, T, d)`` stacks of repetitions; squared
    errors are averaged over every axis except time before the square root.
    """
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise ConfigError(f"estimate shape {est.shape} does not match truth shape {tru.shape}")
    if est.ndim == 2:
        est, tru = est[None], tru[None]
    if est.ndim != 3:
        raise ConfigError("expected (T, d) or (R, T, d) arrays")
    per_step = np.sqrt(np.mean((est - tru) ** 2, axis=(0, 2)))
    return per_step, float(np.mean(per_step))


@dataclass
class RunResult:
    """Estimates and scores of one experiment; arrays are stacked over repetitions ``(R, T, d)``."""

    filter: str
    truth: np.ndarray
    estimates: np.ndarray
    per_step_rmse: np.ndarray
    aggregate_rmse: float
    wall_time: float
    config: dict
    ess: list = field(default_factory=list)
    degenerate_steps: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors


def repetition_seeds(seed, rep):
    """Independent truth and filter generators for one repetition."""
    return (np.random.default_rng(np.random.SeedSequence([seed, rep, 0])),
            np.random.default_rng(np.random.SeedSequence([seed, rep, 1])))


def simulate(cfg, rep=0):
    model = cfg.build_model()
    truth_rng, _ = repetition_seeds(cfg.seed, 0 if cfg.repeat_seed else rep)
    return simulate_truth(model, cfg.steps, truth_rng, shocks=cfg.shocks)


def run_filter(cfg, model, traj, filter_id, rng):
    """Run one filter over ``traj.observations``.

    Returns ``(estimates, info)`` where ``info`` holds the per-step ESS and
    degeneracy flags (APF), per-step errors and SF diagnostics. A failing step
    is recorded and leaves NaN estimates for the remaining steps.
    """
    T, d = traj.steps, model.state_dim
    est = np.full((T, d), np.nan)
    info = {"ess": [], "degenerate_steps": [], "errors": [], "diagnostics": []}
    ys = traj.observations
    try:
        if filter_id == "sf":
            sf_cfg = cfg.sf_config()
            state = sf_init(model.sample_prior, sf_cfg.n_samples, sf_cfg, rng)
            for t in range(T):
                state, est[t], _ = sf_step(state, model, ys[t], rng)
            info["diagnostics"] = state.diagnostics
        elif filter_id == "apf":
            M = int(cfg.apf["n_particles"])
            ens = WeightedEnsemble.uniform(model.sample_prior(rng, M))
            for t in range(T):
                step_info = {}
                try:
                    ens = apf_step(ens, model, ys[t], rng, step_info)
                except STEP_ERRORS as exc:
                    raise FilterStepError(t + 1, exc) from exc
                est[t] = ens.mean()
                info["ess"].append(step_info["ess"])
                if step_info["degenerate"] or step_info["ess"] < cfg.apf["ess_threshold"] * M:
                    info["degenerate_steps"].append(t + 1)
                    log.info("APF degenerate at step %d: ESS %.2f of %d", t + 1, step_info["ess"], M)
        elif filter_id == "enkf":
            x = model.sample_prior(rng, int(cfg.enkf["n_members"]))
            for t in range(T):
                try:
                    x = enkf_step(x, model, ys[t], rng)
                except STEP_ERRORS as exc:
                    raise FilterStepError(t + 1, exc) from exc
                est[t] = x.mean(axis=0)
        elif filter_id == "kf":
            belief = GaussianBelief(model.prior_mean, np.diag(model.prior_std**2))
            for t in range(T):
                belief = kalman_step(belief, model.a, model.c, model.q, model.r, ys[t])
                est[t] = belief.mean
        elif filter_id == "none":
            x = model.prior_mean.copy()
            for t in range(T):
                x = model.propagate_mean(x)
                est[t] = x
        else:
            raise ConfigError(f"unknown filter {filter_id!r}")
    except FilterStepError as exc:
        log.error("%s: %s", filter_id, exc)
        info["errors"].append({"step": exc.step, "error": str(exc.cause)})
    return est, info


def _run_repetition(args):
    cfg_dict, filter_id, rep = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    r = 0 if cfg.repeat_seed else rep
    truth_rng, filter_rng = repetition_seeds(cfg.seed, r)
    model = cfg.build_model()
    traj = simulate_truth(model, cfg.steps, truth_rng, shocks=cfg.shocks)
    est, info = run_filter(cfg, model, traj, filter_id, filter_rng)
    return traj.truth, est, info


def _threads():
    raw = os.environ.get("SCORE_ASSIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SCORE_ASSIM_THREADS must be an integer, got {raw!r}") from None


def run_experiment(cfg, filter_id=None):
    """Simulate and filter every repetition; deterministic for a fixed configuration.

    ``filter_id`` overrides ``cfg.filter``. Repetitions run in worker
    processes when ``SCORE_ASSIM_THREADS`` is above 1.
    """
    filter_id = filter_id or cfg.filter
    if filter_id == "kf" and cfg.problem != "linear_gaussian":
        raise ConfigError("the Kalman filter is exact only for the linear_gaussian problem")
    t0 = time.perf_counter()
    jobs = [(asdict(cfg), filter_id, rep) for rep in range(cfg.repetitions)]
    workers = min(_threads(), cfg.repetitions)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_run_repetition, jobs))
    else:
        outs = [_run_repetition(job) for job in jobs]
    truth = np.stack([o[0] for o in outs])
    est = np.stack([o[1] for o in outs])
    per_step, agg = rmse(est, truth)
    echo = cfg.to_dict()
    echo["filter"] = filter_id
    result = RunResult(filter_id, truth, est, per_step, agg, time.perf_counter() - t0, echo)
    for rep, (_, _, info) in enumerate(outs):
        result.ess.append(info["ess"])
        result.degenerate_steps.append(info["degenerate_steps"])
        result.errors.extend({"rep": rep, **e} for e in info["errors"])
    result.diagnostics = [o[2]["diagnostics"] for o in outs]
    return result


def _rows(result):
    R, T, d = result.truth.shape
    for rep in range(R):
        per_rep, _ = rmse(result.estimates[rep], result.truth[rep])
        for t in range(T):
            yield rep, t + 1, result.truth[rep, t], result.estimates[rep, t], per_rep[t]


def write_results(result, path, fmt="csv"):
    """Write per-step truth, estimate and RMSE as CSV or JSON lines.

    CSV gets a ``rep`` column only for multi-repetition runs; its config echo
    goes to a ``<path>.config.json`` sidecar. JSON lines start with a header
    record holding the echo and the aggregate scores.
    """
    if fmt not in FORMATS:
        raise ConfigError(f"unknown output format {fmt!r}")
    path = Path(path)
    R, T, d = result.truth.shape
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                head = ["step"] + [f"truth_{i}" for i in range(d)] + [f"estimate_{i}" for i in range(d)] + ["rmse"]
                w.writerow((["rep"] if R > 1 else []) + head)
                for rep, step, tru, est, err in _rows(result):
                    row = [step] + [f"{v:.17g}" for v in tru] + [f"{v:.17g}" for v in est] + [f"{err:.17g}"]
                    w.writerow(([rep] if R > 1 else []) + row)
            sidecar = path.with_name(path.name + ".config.json")
            sidecar.write_text(json.dumps(_header(result), indent=2) + "\n")
        else:
            with open(path, "w") as fh:
                fh.write(json.dumps(_header(result)) + "\n")
                for rep, step, tru, est, err in _rows(result):
                    rec = {"rep": rep, "step": step, "truth": tru.tolist(), "estimate": est.tolist(), "rmse": float(err)}
                    fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def _header(result):
    return {
        "type": "header",
        "filter": result.filter,
        "config": result.config,
        "aggregate_rmse": result.aggregate_rmse,
        "wall_time": result.wall_time,
        "degenerate_steps": result.degenerate_steps,
        "errors": result.errors,
    }


def read_results_csv(path):
    """Parse a results CSV back into ``(steps, truth, estimates, rmse)`` arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    cols = {name: i for i, name in enumerate(header)}
    tr = [cols[h] for h in header if h.startswith("truth_")]
    es = [cols[h] for h in header if h.startswith("estimate_")]
    return data[:, cols["step"]].astype(int), data[:, tr], data[:, es], data[:, cols["rmse"]]


def save_diagnostics(result, path):
    records = [dict(rec, rep=rep) for rep, diag in enumerate(result.diagnostics) for rec in diag]
    write_diagnostics(records, path)


def compare(cfg, filters=None):
    """Run several filters on the same truth; returns ``{filter: RunResult}``."""
    if filters is None:
        filters = ["sf", "apf", "enkf"] + (["kf"] if cfg.problem == "linear_gaussian" else [])
    return {f: run_experiment(cfg, f) for f in filters}


def format_table(results):
    lines = [f"{'filter':<8}{'rmse':>12}{'wall [s]':>12}{'degenerate':>12}{'errors':>8}"]
    for name, res in results.items():
        n_deg = sum(len(s) for s in res.degenerate_steps)
        lines.append(f"{name:<8}{res.aggregate_rmse:>12.4f}{res.wall_time:>12.1f}{n_deg:>12d}{len(res.errors):>8d}")
    return "\n".join(lines)
