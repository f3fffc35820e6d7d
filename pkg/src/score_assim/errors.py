"""Exception hierarchy shared by every module of the package."""


class ScoreAssimError(Exception):
    """Base class for all package errors."""


class ConfigError(ScoreAssimError, ValueError):
    """Invalid configuration, shapes or model parameters."""


class DomainError(ScoreAssimError, ValueError):
    """An argument lies outside the domain of a function."""


class SamplerDivergenceError(ScoreAssimError, FloatingPointError):
    """The reverse-time sampler produced non-finite values."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"reverse sampler diverged at grid step k={step}")


class TrainingError(ScoreAssimError, RuntimeError):
    """Score training hit a non-finite loss or gradient."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class UpdateError(ScoreAssimError, FloatingPointError):
    """The likelihood injection produced a non-finite gradient."""


class DegeneracyError(ScoreAssimError, RuntimeError):
    """Particle weights collapsed to zero."""


class FilterStepError(ScoreAssimError, RuntimeError):
    """Wraps any failure inside one assimilation step."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"assimilation step {step} failed: {cause}")


class NoProgressWarning(RuntimeWarning):
    """Training loss did not decrease relative to the first epoch."""
