"""Exception hierarchy and CLI exit statuses for cbrw-lab."""

from __future__ import annotations

from enum import IntEnum

__all__ = [
    "CbrwLabError",
    "ConfigError",
    "ContractError",
    "ExitStatus",
    "InsufficientSamplesError",
    "RegimeError",
    "SolverError",
    "StarvationError",
    "UnsupportedDimensionError",
]


class ExitStatus(IntEnum):
    """Process exit statuses of ``cbrw-lab run``."""

    ok = 0
    acceptance_failed = 1
    usage = 2
    config = 3
    starvation = 4
    numerical = 5
    insufficient_samples = 6


class CbrwLabError(Exception):
    """Base class for every error raised by cbrw-lab."""

    exit_status: ExitStatus = ExitStatus.numerical


class ConfigError(CbrwLabError, ValueError):
    """An invalid law, configuration or parameter combination."""

    exit_status = ExitStatus.config


class UnsupportedDimensionError(ConfigError):
    """The lattice dimension is outside the range an operation supports."""


class RegimeError(ConfigError):
    """No prediction formula exists for the requested (dimension, quantity)."""


class InsufficientSamplesError(CbrwLabError, ValueError):
    """A statistic was requested on too small an effective sample."""

    exit_status = ExitStatus.insufficient_samples


class ContractError(CbrwLabError, RuntimeError):
    """A caller violated an operation's precondition."""


class SolverError(CbrwLabError, RuntimeError):
    """A linear solve failed to reach its residual tolerance."""


class StarvationError(CbrwLabError, RuntimeError):
    """A rejection or importance sampler produced no usable samples.

    Attributes:
        tried: Number of replicates attempted.
        upper_bound: One-sided 95% upper confidence bound on the success rate.
    """

    exit_status = ExitStatus.starvation

    def __init__(self, message: str, *, tried: int, upper_bound: float) -> None:
        super().__init__(message)
        self.tried = tried
        self.upper_bound = upper_bound
