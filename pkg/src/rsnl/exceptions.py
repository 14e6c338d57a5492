"""Shared exception types."""


class ShapeError(ValueError):
    """Array dimensions do not chain or do not match a declared contract."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class TrainingError(RuntimeError):
    """Flow or classifier training failed (e.g. NaN loss)."""


class SamplerError(RuntimeError):
    """MCMC could not produce usable draws."""


class SimulationError(RuntimeError):
    """Simulator kept failing beyond the retry budget."""


class ConfigError(ValueError):
    """Invalid run configuration."""
