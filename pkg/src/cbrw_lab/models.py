"""Pydantic models shared across cbrw-lab modules."""

from __future__ import annotations

from enum import Enum
from typing import TypeAlias

from pydantic import BaseModel, Field

__all__ = [
    "ChiSquareResult",
    "Estimate",
    "LatticePoint",
    "Mode",
    "Prediction",
    "ReferenceLaw",
    "Regime",
    "TestResult",
]

LatticePoint: TypeAlias = tuple[int, ...]


class Mode(str, Enum):
    """Traversal modes of a CBRW simulation."""

    hit_only = "hit-only"
    pioneers_only = "pioneers-only"
    full_occupation = "full-occupation"


class Regime(str, Enum):
    """Dimension regimes of the occupation-time limit theorems."""

    high = "d>=5"
    critical = "d=4"
    low = "d<=3"

    @classmethod
    def of(cls, dim: int) -> Regime:
        """Return the regime a lattice dimension belongs to."""
        if dim >= 5:
            return cls.high
        if dim == 4:
            return cls.critical
        return cls.low


class ReferenceLaw(str, Enum):
    """Continuous reference distributions for one-sample KS tests."""

    exp1 = "exp1"
    uniform01 = "uniform01"


class Estimate(BaseModel):
    """A Monte Carlo or solver estimate with its error report."""

    value: float
    se: float = Field(default=0.0, ge=0.0)
    bias_bound: float = Field(default=0.0, ge=0.0)
    n: int = Field(default=0, ge=0)

    model_config = {"frozen": True}


class TestResult(BaseModel):
    """Outcome of a Kolmogorov-Smirnov test."""

    __test__ = False

    statistic: float = Field(ge=0.0, le=1.0)
    p_value: float = Field(ge=0.0, le=1.0)
    n_effective: float = Field(gt=0.0)


class ChiSquareResult(BaseModel):
    """Outcome of a pooled chi-square goodness-of-fit test."""

    statistic: float = Field(ge=0.0)
    dof: int = Field(ge=0)
    p_value: float = Field(ge=0.0, le=1.0)
    bins: list[tuple[int, int]] = Field(default_factory=list)


class Prediction(BaseModel):
    """A closed-form asymptotic prediction and the inputs it was built from.

    Attributes:
        quantity: Name of the predicted quantity, e.g. ``"hit_prob"``.
        regime: Dimension regime the formula belongs to, if any.
        inputs: Formula inputs (sigma2, c_d, cap, bcap, card, jx, ...).
        value: Predicted value.
        se: First-order propagated standard error of estimated inputs.
        note: Validity note; predictions are asymptotic in J(x).
    """

    quantity: str
    regime: Regime | None = None
    inputs: dict[str, float] = Field(default_factory=dict)
    value: float
    se: float = Field(default=0.0, ge=0.0)
    note: str = "asymptotic as J(x) -> infinity; finite-x error uncontrolled"
    acceptance_tested: bool = True
