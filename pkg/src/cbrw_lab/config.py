"""Experiment configuration: the key=value file format and its pydantic model."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ConfigError
from .lattice_walk import JumpLaw, default_half_widths, make_jump_law
from .models import LatticePoint
from .offspring import OffspringLaw, make_law

__all__ = [
    "ExperimentConfig",
    "ExperimentName",
    "load_config",
    "parse_config_text",
    "parse_overrides",
]


class ExperimentName(str, Enum):
    """Registered experiment runners."""

    kolmogorov = "kolmogorov"
    yaglom_classical = "yaglom-classical"
    progeny_tail = "progeny-tail"
    many_to_one = "many-to-one"
    capacity = "capacity"
    d5_limit = "d5-limit"
    d5_hitprob = "d5-hitprob"
    d4_yaglom = "d4-yaglom"
    d4_moments = "d4-moments"
    d4_mrca = "d4-mrca"
    d4_uniformity = "d4-uniformity"
    lowd_scaling = "lowd-scaling"
    d2_exploratory = "d2-exploratory"


class ExperimentConfig(BaseModel):
    """Validated settings of one experiment run.

    Unknown keys are rejected. String values (from a config file or an
    ``--override``) are parsed by the ``before`` validators: lists are
    comma-separated and point lists separate points with ``;``.
    """

    experiment: ExperimentName
    dim: int = Field(default=4, ge=1, le=8)
    offspring: str = "geometric"
    jump: str = "srw"
    target: list[LatticePoint] | None = None
    start: LatticePoint | None = None
    j_targets: list[float] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0, lt=2**64)
    workers: int = Field(default=1, ge=1)
    block_size: int = Field(default=1000, ge=1)
    node_budget: int = Field(default=1_000_000, ge=1)
    n_trees: int = Field(default=100_000, ge=1)
    max_trees: int = Field(default=10_000_000, ge=1)
    target_hits: int = Field(default=1000, ge=1)
    generation: int = Field(default=50, ge=1)
    progeny_n: int = Field(default=10_000, ge=1)
    k_max: int = Field(default=64, ge=1)
    escape_radius: float | None = Field(default=None, gt=0)
    subtree_budget: int = Field(default=10_000_000, ge=1)
    n_samples: int = Field(default=10_000, ge=1)
    occupation_samples: int = Field(default=10_000, ge=0)
    n_walks: int = Field(default=10_000, ge=2)
    green_halfwidth: int | None = Field(default=None, ge=2)
    capacity_sizes: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    out_dir: Path = Path("out")

    model_config = {"extra": "forbid", "frozen": True}

    @field_validator("target", mode="before")
    @classmethod
    def _parse_points(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [_parse_ints(chunk) for chunk in value.split(";") if chunk.strip()]
        return value

    @field_validator("start", mode="before")
    @classmethod
    def _parse_point(cls, value: Any) -> Any:
        if isinstance(value, str):
            return _parse_ints(value)
        return value

    @field_validator("j_targets", "capacity_sizes", mode="before")
    @classmethod
    def _parse_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("escape_radius", "green_halfwidth", mode="before")
    @classmethod
    def _parse_optional(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in {"", "none", "auto"}:
            return None
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> ExperimentConfig:
        for point in [*(self.target or []), *([self.start] if self.start else [])]:
            if len(point) != self.dim:
                raise ConfigError(f"Cannot use point {point!r} in dimension {self.dim}.")
        if self.target is not None and not self.target:
            raise ConfigError("Cannot run with an empty target set.")
        if any(j <= 0 for j in self.j_targets):
            raise ConfigError(f"Cannot use non-positive J-targets {self.j_targets!r}.")
        if self.j_targets != sorted(self.j_targets):
            raise ConfigError(f"Cannot use unsorted J-targets {self.j_targets!r}.")
        if any(size < 1 for size in self.capacity_sizes):
            raise ConfigError(f"Cannot use capacity sizes {self.capacity_sizes!r}.")
        self.offspring_law()
        self.jump_law()
        return self

    # ------------------------------------------------------------------
    # Derived objects
    # ------------------------------------------------------------------

    def offspring_law(self) -> OffspringLaw:
        return make_law(self.offspring)

    def jump_law(self) -> JumpLaw:
        return make_jump_law(self.jump, self.dim)

    def target_set(self) -> frozenset[LatticePoint]:
        """K as a set; defaults to the origin."""
        if self.target is None:
            return frozenset({(0,) * self.dim})
        return frozenset(self.target)

    def half_widths(self) -> tuple[int, int]:
        if self.green_halfwidth is None:
            return default_half_widths(self.dim)
        return (self.green_halfwidth, 2 * self.green_halfwidth)


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"Cannot parse lattice point {text!r}.") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Raises:
        ConfigError: On a line without ``=`` or a repeated key.
    """
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"Cannot parse config line {number}: {raw!r}.")
        if key in values:
            raise ConfigError(f"Cannot repeat config key {key!r} (line {number}).")
        values[key] = value.strip()
    return values


def parse_overrides(pairs: tuple[str, ...] | list[str]) -> dict[str, str]:
    """Parse repeated ``key=value`` override flags; later flags win."""
    values: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Cannot parse override {pair!r}: expected key=value.")
        values[key.strip()] = value.strip()
    return values


def load_config(
    experiment: str | None,
    *,
    path: Path | None = None,
    defaults_for: Callable[[ExperimentName], Mapping[str, Any]] | None = None,
    overrides: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Merge runner defaults < file < overrides < explicit flags and validate.

    Raises:
        ConfigError: If the file cannot be parsed or no known experiment is named.
        pydantic.ValidationError: If a merged value is invalid.
    """
    merged: dict[str, Any] = {}
    if path is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"Cannot read config file {str(path)!r}: {exc}.") from exc
        merged.update(parse_config_text(text))
    merged.update(overrides or {})
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    if experiment is not None:
        if "experiment" in merged and merged["experiment"] != experiment:
            raise ConfigError(
                f"Cannot run {experiment!r}: the config names {merged['experiment']!r}."
            )
        merged["experiment"] = experiment
    if "experiment" not in merged:
        raise ConfigError("Cannot run without an experiment name.")
    try:
        name = ExperimentName(merged["experiment"])
    except ValueError as exc:
        known = ", ".join(e.value for e in ExperimentName)
        raise ConfigError(
            f"Cannot run unknown experiment {merged['experiment']!r}; known: {known}."
        ) from exc
    if defaults_for is not None:
        merged = {**defaults_for(name), **merged}
    return ExperimentConfig.model_validate(merged)
