"""Empirical distributions and the goodness-of-fit tests used by the experiments."""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np
import numpy.typing as npt
from scipy import special, stats

from .errors import ConfigError, ContractError, InsufficientSamplesError
from .models import ChiSquareResult, ReferenceLaw, TestResult

__all__ = [
    "EmpiricalDistribution",
    "chi_square_discrete",
    "ks_one_sample",
    "ks_two_sample",
    "mean_ci",
    "tv_distance",
]

_KS_MIN_SAMPLES = 20.0

FloatArray = npt.NDArray[np.float64]


class EmpiricalDistribution:
    """A weighted sample collection.

    The container accepts samples until :meth:`freeze` (or the first read of a
    derived quantity) and is read-only afterwards.

    Example::

        emp = EmpiricalDistribution([0.3, 1.2, 0.7])
        emp.add(2.0, weight=0.5)
        emp.mean
    """

    def __init__(
        self,
        values: npt.ArrayLike | None = None,
        weights: npt.ArrayLike | None = None,
    ) -> None:
        self._values: list[float] = []
        self._weights: list[float] = []
        self._frozen: tuple[FloatArray, FloatArray] | None = None
        if values is not None:
            self.extend(values, weights)

    def add(self, value: float, weight: float = 1.0) -> None:
        """Append one sample with a positive weight."""
        if self._frozen is not None:
            raise ContractError("Cannot add samples to a frozen distribution.")
        if not weight > 0:
            raise ConfigError(f"Cannot use non-positive weight {weight!r}.")
        self._values.append(float(value))
        self._weights.append(float(weight))

    def extend(self, values: npt.ArrayLike, weights: npt.ArrayLike | None = None) -> None:
        """Append many samples; weights default to one."""
        vals = np.asarray(values, dtype=np.float64).ravel()
        wts = (
            np.ones_like(vals)
            if weights is None
            else np.asarray(weights, dtype=np.float64).ravel()
        )
        if wts.shape != vals.shape:
            raise ConfigError("Cannot pair values and weights of different lengths.")
        if self._frozen is not None:
            raise ContractError("Cannot add samples to a frozen distribution.")
        if (wts <= 0).any():
            raise ConfigError("Cannot use non-positive sample weights.")
        self._values.extend(vals.tolist())
        self._weights.extend(wts.tolist())

    def freeze(self) -> EmpiricalDistribution:
        """Sort the samples and make the container read-only."""
        if self._frozen is None:
            vals = np.array(self._values, dtype=np.float64)
            wts = np.array(self._weights, dtype=np.float64)
            order = np.argsort(vals, kind="stable")
            self._frozen = (vals[order], wts[order])
        return self

    @property
    def sorted(self) -> bool:
        return self._frozen is not None

    @property
    def values(self) -> FloatArray:
        return self.freeze()._arrays()[0]

    @property
    def weights(self) -> FloatArray:
        return self.freeze()._arrays()[1]

    def _arrays(self) -> tuple[FloatArray, FloatArray]:
        assert self._frozen is not None
        return self._frozen

    def __len__(self) -> int:
        return len(self._values)

    @property
    def count(self) -> int:
        return len(self._values)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def n_effective(self) -> float:
        """(sum w)^2 / sum w^2."""
        wts = self.weights
        if wts.size == 0:
            return 0.0
        return float(wts.sum() ** 2 / (wts**2).sum())

    @property
    def mean(self) -> float:
        if self.count == 0:
            raise InsufficientSamplesError("Cannot take the mean of no samples.")
        return float(np.average(self.values, weights=self.weights))

    def moment(self, order: int) -> float:
        """Weighted raw moment E[X^order]."""
        if self.count == 0:
            raise InsufficientSamplesError("Cannot take a moment of no samples.")
        return float(np.average(self.values**order, weights=self.weights))

    def cdf(self, x: float) -> float:
        """Right-continuous empirical CDF."""
        vals, wts = self.values, self.weights
        idx = np.searchsorted(vals, x, side="right")
        return float(wts[:idx].sum() / wts.sum())

    def atoms(self) -> tuple[FloatArray, FloatArray]:
        """Distinct values and their probabilities, ascending."""
        vals, wts = self.values, self.weights
        uniq, inverse = np.unique(vals, return_inverse=True)
        mass = np.bincount(inverse, weights=wts, minlength=uniq.size)
        return uniq, mass / mass.sum()

    def pmf(self) -> dict[float, float]:
        """Distinct values mapped to their probabilities."""
        uniq, probs = self.atoms()
        return dict(zip(uniq.tolist(), probs.tolist(), strict=True))


def _reference_cdf(reference: ReferenceLaw, x: FloatArray) -> FloatArray:
    if reference is ReferenceLaw.exp1:
        return np.where(x > 0, -np.expm1(-np.maximum(x, 0.0)), 0.0)
    return np.clip(x, 0.0, 1.0)


def _ks_pvalue(scaled_n: float, statistic: float) -> float:
    return float(np.clip(special.kolmogorov(math.sqrt(scaled_n) * statistic), 0.0, 1.0))


def _require_samples(emp: EmpiricalDistribution, minimum: float) -> float:
    n_eff = emp.n_effective
    if n_eff < minimum:
        raise InsufficientSamplesError(
            f"Cannot run the test on n_effective={n_eff:.1f} < {minimum:g}."
        )
    return n_eff


def ks_one_sample(
    emp: EmpiricalDistribution, reference: ReferenceLaw | str
) -> TestResult:
    """Kolmogorov-Smirnov distance to Exp(1) or Uniform(0,1).

    The supremum is taken over the jump points of the weighted step CDF, on
    both sides of each jump. The p-value uses the asymptotic Kolmogorov law at
    the effective sample size.
    """
    n_eff = _require_samples(emp, _KS_MIN_SAMPLES)
    uniq, probs = emp.atoms()
    after = np.cumsum(probs)
    before = after - probs
    ref = _reference_cdf(ReferenceLaw(reference), uniq)
    statistic = float(min(1.0, max((after - ref).max(), (ref - before).max(), 0.0)))
    return TestResult(
        statistic=statistic,
        p_value=_ks_pvalue(n_eff, statistic),
        n_effective=n_eff,
    )


def ks_two_sample(
    emp_a: EmpiricalDistribution, emp_b: EmpiricalDistribution
) -> TestResult:
    """Two-sample Kolmogorov-Smirnov distance between weighted samples."""
    n_a = _require_samples(emp_a, _KS_MIN_SAMPLES)
    n_b = _require_samples(emp_b, _KS_MIN_SAMPLES)
    grid = np.union1d(emp_a.values, emp_b.values)

    def step_cdf(emp: EmpiricalDistribution) -> FloatArray:
        uniq, probs = emp.atoms()
        cum = np.concatenate(([0.0], np.cumsum(probs)))
        return cum[np.searchsorted(uniq, grid, side="right")]

    statistic = float(min(1.0, np.abs(step_cdf(emp_a) - step_cdf(emp_b)).max()))
    n_eff = n_a * n_b / (n_a + n_b)
    return TestResult(
        statistic=statistic, p_value=_ks_pvalue(n_eff, statistic), n_effective=n_eff
    )


def _as_counts(data: Mapping[int, float] | EmpiricalDistribution) -> dict[int, float]:
    if isinstance(data, EmpiricalDistribution):
        uniq, probs = data.atoms()
        total = data.count
        return {int(v): p * total for v, p in zip(uniq.tolist(), probs.tolist(), strict=True)}
    return {int(k): float(v) for k, v in data.items() if v}


def chi_square_discrete(
    counts: Mapping[int, float] | EmpiricalDistribution,
    reference: Mapping[int, float],
    min_expected: float = 5.0,
) -> ChiSquareResult:
    """Pearson chi-square of observed counts against a reference pmf.

    Atoms are scanned from the largest down; an atom whose expected count is
    below ``min_expected`` is merged with its left neighbours until the pooled
    bin reaches it. The reference mass beyond the largest atom is pooled into
    the last bin. A leftover low bin at the left end joins the bin to its right.

    Raises:
        ConfigError: If a pooled bin holds observations but no reference mass.
        InsufficientSamplesError: If the whole sample expects fewer than
            ``min_expected`` counts.
    """
    observed = _as_counts(counts)
    total = math.fsum(observed.values())
    if total < min_expected:
        raise InsufficientSamplesError(
            f"Cannot pool {total:g} observations into bins of expected {min_expected:g}."
        )
    ref = {int(k): float(v) for k, v in reference.items() if v > 0}
    atoms = sorted(set(observed) | set(ref))
    tail = max(0.0, 1.0 - math.fsum(ref.values()))

    bins: list[list[float]] = []
    acc_obs = acc_exp = 0.0
    hi = atoms[-1]
    for pos, atom in enumerate(reversed(atoms)):
        acc_obs += observed.get(atom, 0.0)
        acc_exp += total * ref.get(atom, 0.0) + (total * tail if pos == 0 else 0.0)
        if acc_exp >= min_expected:
            bins.append([acc_obs, acc_exp, atom, hi])
            acc_obs = acc_exp = 0.0
            hi = atom - 1
    if acc_obs or acc_exp:
        if bins:
            bins[-1][0] += acc_obs
            bins[-1][1] += acc_exp
            bins[-1][2] = atoms[0]
        else:
            bins.append([acc_obs, acc_exp, atoms[0], hi])
    for obs, exp, lo, up in bins:
        if exp == 0 and obs > 0:
            raise ConfigError(
                f"Cannot test: reference mass 0 on observed atoms {int(lo)}..{int(up)}."
            )
    bins.reverse()
    statistic = math.fsum((obs - exp) ** 2 / exp for obs, exp, _, _ in bins if exp > 0)
    dof = len(bins) - 1
    p_value = float(stats.chi2.sf(statistic, dof)) if dof > 0 else 1.0
    return ChiSquareResult(
        statistic=statistic,
        dof=dof,
        p_value=min(1.0, max(0.0, p_value)),
        bins=[(int(lo), int(up)) for _, _, lo, up in bins],
    )


def mean_ci(emp: EmpiricalDistribution, level: float = 0.95) -> tuple[float, float]:
    """Weighted mean and the half-width of its normal confidence interval."""
    if not 0 < level < 1:
        raise ConfigError(f"Cannot build a confidence interval at level {level!r}.")
    n_eff = emp.n_effective
    if n_eff < 2:
        raise InsufficientSamplesError(
            f"Cannot build a confidence interval from n_effective={n_eff:.2f}."
        )
    vals, wts = emp.values, emp.weights
    mean = float(np.average(vals, weights=wts))
    var = float((wts**2 * (vals - mean) ** 2).sum() / wts.sum() ** 2)
    se = math.sqrt(var * n_eff / (n_eff - 1))
    return mean, float(stats.norm.ppf(0.5 + level / 2)) * se


def _as_pmf(data: Mapping[float, float] | EmpiricalDistribution) -> dict[float, float]:
    if isinstance(data, EmpiricalDistribution):
        return data.pmf()
    total = math.fsum(data.values())
    if total <= 0:
        raise ConfigError("Cannot normalize a distribution with no mass.")
    return {k: v / total for k, v in data.items()}


def tv_distance(
    emp_a: Mapping[float, float] | EmpiricalDistribution,
    emp_b: Mapping[float, float] | EmpiricalDistribution,
) -> float:
    """Total-variation distance 1/2 sum |p_a - p_b| of two discrete laws."""
    pa, pb = _as_pmf(emp_a), _as_pmf(emp_b)
    return 0.5 * math.fsum(abs(pa.get(k, 0.0) - pb.get(k, 0.0)) for k in set(pa) | set(pb))
