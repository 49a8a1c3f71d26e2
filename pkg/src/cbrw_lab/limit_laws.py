"""Closed-form asymptotic predictions compared against the simulations.

Every function is a pure map from its inputs to a :class:`Prediction`. Each
(dimension, quantity) pair either has a formula or raises
:class:`RegimeError`; nothing is extrapolated silently.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from typing import Literal

from pydantic import BaseModel, Field

from .errors import ConfigError, RegimeError
from .lattice_walk import CapacityEstimate, JumpLaw, c_d, capacity, jnorm
from .models import Estimate, LatticePoint, Prediction, ReferenceLaw, Regime
from .offspring import OffspringLaw

__all__ = [
    "LowDimPrediction",
    "MrcaPrediction",
    "Yaglom4dPrediction",
    "predict_hit_prob",
    "predict_lowd",
    "predict_mean_occupation",
    "predict_moments4d",
    "predict_mrca4d",
    "predict_survival",
    "predict_yaglom4d",
]

Scalar = float | Estimate | CapacityEstimate


def _value_se(value: Scalar) -> tuple[float, float]:
    if isinstance(value, (Estimate, CapacityEstimate)):
        return value.value, value.se
    return float(value), 0.0


def _geometry(
    d: int, x: LatticePoint, target: Iterable[LatticePoint], jump: JumpLaw
) -> tuple[float, int, frozenset[LatticePoint]]:
    if d != jump.dim:
        raise ConfigError(f"Cannot predict in dimension {d} with a {jump.dim}-dimensional law.")
    points = frozenset(target)
    if not points:
        raise ConfigError("Cannot predict for an empty K.")
    if x in points:
        raise ConfigError(f"Cannot predict from {x!r}: the start lies in K.")
    return jnorm(x, jump), len(points), points


def _require_log(jx: float, quantity: str) -> float:
    if jx <= 1.0:
        raise RegimeError(f"Cannot predict {quantity} in d=4 at J(x)={jx:.3g} <= 1.")
    return math.log(jx)


# ---------------------------------------------------------------------------
# Hitting probability
# ---------------------------------------------------------------------------


def predict_hit_prob(
    d: int,
    x: LatticePoint,
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    *,
    bcap: Scalar | None = None,
) -> Prediction:
    """Asymptotic P_x(T hits K).

    - d >= 5: c_d * BCap(K) / J(x)^(d-2), with BCap from the backward spine.
    - d = 4: 1 / (2 sigma^2 J(x)^2 log J(x)).
    - d <= 3: 2(4-d) / (d sigma^2 J(x)^2).

    Raises:
        RegimeError: If d >= 5 without ``bcap``, or d = 4 with J(x) <= 1.
    """
    jx, card, _ = _geometry(d, x, target, jump)
    sigma2 = offspring.sigma2
    regime = Regime.of(d)
    inputs = {"sigma2": sigma2, "jx": jx, "card": float(card)}

    if regime is Regime.high:
        if bcap is None:
            raise RegimeError(f"Cannot predict the hit probability in d={d} without BCap(K).")
        value, se = _value_se(bcap)
        cd = c_d(jump)
        factor = cd / jx ** (d - 2)
        return Prediction(
            quantity="hit_prob", regime=regime,
            inputs={**inputs, "c_d": cd, "bcap": value},
            value=value * factor, se=se * factor,
        )
    if regime is Regime.critical:
        log_j = _require_log(jx, "the hit probability")
        return Prediction(
            quantity="hit_prob", regime=regime, inputs=inputs,
            value=1.0 / (2.0 * sigma2 * jx**2 * log_j),
        )
    return Prediction(
        quantity="hit_prob", regime=regime, inputs=inputs,
        value=2.0 * (4 - d) / (d * sigma2 * jx**2),
    )


def predict_mean_occupation(
    d: int, x: LatticePoint, target: Iterable[LatticePoint], jump: JumpLaw
) -> Prediction:
    """E_x[Z_T(K)] = g(x, K) ~ c_d |K| / J(x)^(d-2) for d >= 3."""
    if d < 3:
        raise RegimeError(f"Cannot predict the mean occupation in recurrent dimension {d}.")
    jx, card, _ = _geometry(d, x, target, jump)
    cd = c_d(jump)
    return Prediction(
        quantity="mean_occupation", regime=Regime.of(d),
        inputs={"c_d": cd, "card": float(card), "jx": jx},
        value=cd * card / jx ** (d - 2),
    )


# ---------------------------------------------------------------------------
# d = 4
# ---------------------------------------------------------------------------


class Yaglom4dPrediction(BaseModel):
    """Normalizations of L_K and Z_T(K) given a hit, both with Exp(1) limits."""

    l_scale: Prediction
    z_scale: Prediction
    limit: ReferenceLaw = ReferenceLaw.exp1


def _require_critical(d: int, quantity: str) -> None:
    if d != 4:
        raise RegimeError(f"Cannot predict {quantity} in dimension {d}: the formula is for d=4.")


def _cap_input(
    target: frozenset[LatticePoint], jump: JumpLaw, cap: Scalar | None
) -> tuple[float, float]:
    if cap is None:
        return _value_se(capacity(target, jump, "oracle"))
    return _value_se(cap)


def predict_yaglom4d(
    x: LatticePoint,
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    *,
    cap: Scalar | None = None,
) -> Yaglom4dPrediction:
    """Scales 2 sigma^2 c_4 Cap(K) log J(x) and 2 sigma^2 c_4 |K| log J(x).

    ``cap`` defaults to the Green-oracle capacity of K.
    """
    _require_critical(jump.dim, "the Yaglom scales")
    jx, card, points = _geometry(4, x, target, jump)
    log_j = _require_log(jx, "the Yaglom scales")
    cap_value, cap_se = _cap_input(points, jump, cap)
    sigma2 = offspring.sigma2
    c4 = c_d(jump)
    unit = 2.0 * sigma2 * c4 * log_j
    inputs = {"sigma2": sigma2, "c_d": c4, "jx": jx, "card": float(card), "cap": cap_value}
    return Yaglom4dPrediction(
        l_scale=Prediction(
            quantity="yaglom_l_scale", regime=Regime.critical, inputs=inputs,
            value=unit * cap_value, se=unit * cap_se,
        ),
        z_scale=Prediction(
            quantity="yaglom_z_scale", regime=Regime.critical, inputs=inputs,
            value=unit * card,
        ),
    )


def predict_moments4d(
    j: int,
    x: LatticePoint,
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    *,
    cap: Scalar | None = None,
    quantity: Literal["z", "l"] = "z",
) -> Prediction:
    """E_x[Z_T(K)^j] ~ u_K(x) (2 c_4 sigma^2 |K| log J(x))^j j!.

    With ``quantity="l"`` the scale uses Cap(K) in place of |K|. Orders
    j >= 3 need a finite j-th offspring moment and are returned with
    ``acceptance_tested=False``.
    """
    if j < 1:
        raise ConfigError(f"Cannot predict moment of order {j!r}.")
    _require_critical(jump.dim, "moments")
    hit = predict_hit_prob(4, x, target, offspring, jump)
    if quantity == "l":
        scale = predict_yaglom4d(x, target, offspring, jump, cap=cap).l_scale
    else:
        unit = 2.0 * offspring.sigma2 * c_d(jump) * math.log(hit.inputs["jx"])
        scale = Prediction(
            quantity="yaglom_z_scale", regime=Regime.critical,
            inputs=hit.inputs, value=unit * hit.inputs["card"],
        )
    factor = hit.value * math.factorial(j)
    moment = sum(k**j * p for k, p in enumerate(offspring.pmf))
    note = "asymptotic as J(x) -> infinity"
    if j >= 3:
        note += f"; needs sum k^{j} p_k < inf (here {moment:.4g}); not acceptance-tested"
    return Prediction(
        quantity=f"moment_{quantity}_{j}", regime=Regime.critical,
        inputs={**scale.inputs, "u_k": hit.value, "scale": scale.value, "j": float(j)},
        value=factor * scale.value**j,
        se=factor * j * scale.value ** (j - 1) * scale.se,
        note=note,
        acceptance_tested=j <= 2,
    )


class MrcaPrediction(BaseModel):
    """Limits of the MRCA statistics: log J(H_x)/log J(x) ~ U(0,1) and N_x(K) -> 2."""

    h_law: ReferenceLaw = ReferenceLaw.uniform01
    h_second_moment: float = 1.0 / 3.0
    n_limit: int = 2

    def cdf(self, u: float) -> float:
        return min(1.0, max(0.0, u))


def predict_mrca4d() -> MrcaPrediction:
    return MrcaPrediction()


# ---------------------------------------------------------------------------
# d <= 3
# ---------------------------------------------------------------------------


class LowDimPrediction(BaseModel):
    """Scale |K| J(x)^(4-d) of Z_T(K) given a hit.

    ``mean_constant`` is the limit of E_x[Z_T(K) | hit] / scale, available for
    d = 3 only.
    """

    scale: float = Field(gt=0.0)
    mean_constant: float | None = None
    hit_prob: Prediction


def predict_lowd(
    d: int,
    x: LatticePoint,
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
) -> LowDimPrediction:
    if d > 3:
        raise RegimeError(f"Cannot use the low-dimensional scale in dimension {d}.")
    jx, card, _ = _geometry(d, x, target, jump)
    mean_constant = None
    if d == 3:
        mean_constant = c_d(jump) * d * offspring.sigma2 / (2.0 * (4 - d))
    return LowDimPrediction(
        scale=card * jx ** (4 - d),
        mean_constant=mean_constant,
        hit_prob=predict_hit_prob(d, x, target, offspring, jump),
    )


# ---------------------------------------------------------------------------
# Generations
# ---------------------------------------------------------------------------


def predict_survival(n: int, law: OffspringLaw) -> Prediction:
    """Kolmogorov's estimate P(Z_n > 0) ~ 2 / (n sigma^2)."""
    if n < 1:
        raise ConfigError(f"Cannot predict survival to generation {n!r}.")
    sigma2 = law.sigma2
    return Prediction(
        quantity="survival",
        inputs={"sigma2": sigma2, "n": float(n)},
        value=2.0 / (n * sigma2),
        note="asymptotic as n -> infinity",
    )
