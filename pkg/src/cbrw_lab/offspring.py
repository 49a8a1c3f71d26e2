"""Critical offspring laws, size-biased companions and Galton-Watson trees."""

from __future__ import annotations

import functools
import logging
import math
from collections.abc import Iterator
from enum import Enum
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field, model_validator

from .errors import ConfigError, ContractError
from .stats import EmpiricalDistribution

__all__ = [
    "ChildBuffer",
    "OffspringFamily",
    "OffspringLaw",
    "SizeBiasedLaw",
    "TraversalEvent",
    "TreeStatus",
    "TreeStream",
    "classical_yaglom_samples",
    "make_law",
    "progeny_pmf_exact",
    "progeny_supported",
    "progeny_tail_exact",
    "sample_tree_stream",
    "simulate_generation",
    "survival_prob_exact",
]

logger = logging.getLogger(__name__)

_TOLERANCE = 1e-12
_GEOMETRIC_CUTOFF = 60
_POISSON_KMAX = 64
_BUFFER_SIZE = 1024

IntArray = npt.NDArray[np.int64]
FloatArray = npt.NDArray[np.float64]


class OffspringFamily(str, Enum):
    """Supported offspring families."""

    binary = "binary"
    geometric = "geometric"
    poisson_capped = "poisson-capped"
    custom = "custom"


class OffspringLaw(BaseModel):
    """A critical offspring distribution {p_k}.

    The geometric law p_k = 2^{-(k+1)} is stored truncated where the tail drops
    below double precision; its sampler and generating function use the exact
    closed forms.

    Attributes:
        family: Family tag.
        pmf: p_0, p_1, ... up to the largest atom.
    """

    family: OffspringFamily
    pmf: tuple[float, ...]

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _certify(self) -> OffspringLaw:
        if any(p < 0 for p in self.pmf):
            raise ConfigError(f"Cannot use negative offspring masses {self.pmf!r}.")
        total = math.fsum(self.pmf)
        if abs(total - 1.0) > _TOLERANCE:
            raise ConfigError(f"Cannot use offspring masses summing to {total!r}.")
        mean = math.fsum(k * p for k, p in enumerate(self.pmf))
        if abs(mean - 1.0) > _TOLERANCE:
            raise ConfigError(f"Cannot use a non-critical law with mean {mean!r}.")
        if len(self.pmf) > 1 and self.pmf[1] >= 1.0:
            raise ConfigError("Cannot use the degenerate law p_1 = 1 (sigma2 = 0).")
        return self

    @property
    def mean(self) -> float:
        return math.fsum(k * p for k, p in enumerate(self.pmf))

    @property
    def sigma2(self) -> float:
        return math.fsum((k - 1) ** 2 * p for k, p in enumerate(self.pmf))

    @property
    def cdf(self) -> FloatArray:
        return _cdf(self.pmf)

    def p(self, k: int) -> float:
        """p_k, including the closed-form tail of the geometric law."""
        if k < 0:
            return 0.0
        if self.family is OffspringFamily.geometric:
            return 2.0 ** -(k + 1)
        return self.pmf[k] if k < len(self.pmf) else 0.0

    def generating(self, s: float) -> float:
        """Generating function f(s) = sum_k p_k s^k."""
        if self.family is OffspringFamily.geometric:
            return 1.0 / (2.0 - s)
        return float(np.polynomial.polynomial.polyval(s, self.pmf))

    def sample(self, rng: np.random.Generator, size: int) -> IntArray:
        """Draw ``size`` offspring counts."""
        if self.family is OffspringFamily.geometric:
            return (rng.geometric(0.5, size) - 1).astype(np.int64)
        cdf = self.cdf
        idx = np.searchsorted(cdf, rng.random(size), side="right")
        return np.minimum(idx, len(cdf) - 1).astype(np.int64)

    def offspring_sum(self, rng: np.random.Generator, counts: IntArray) -> IntArray:
        """For each entry c of ``counts``, the total offspring of c individuals."""
        counts = np.asarray(counts, dtype=np.int64)
        if self.family is OffspringFamily.geometric:
            out = np.zeros_like(counts)
            live = counts > 0
            out[live] = rng.negative_binomial(counts[live], 0.5)
            return out
        draws = self.sample(rng, int(counts.sum()))
        owners = np.repeat(np.arange(len(counts)), counts)
        return np.bincount(owners, weights=draws, minlength=len(counts)).astype(np.int64)

    def size_biased(self) -> SizeBiasedLaw:
        return SizeBiasedLaw(base=self)


@functools.lru_cache(maxsize=32)
def _cdf(pmf: tuple[float, ...]) -> FloatArray:
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    cdf.setflags(write=False)
    return cdf


class SizeBiasedLaw(BaseModel):
    """The size-biased law k p_k and the split law of spine siblings.

    A spine vertex with k children under the size-biased law has its marked
    child uniform among them, so the numbers (L, R) of siblings to its left and
    right satisfy P(L = i, R = j) = p_{i+j+1}.
    """

    base: OffspringLaw

    model_config = {"frozen": True}

    @property
    def pmf(self) -> tuple[float, ...]:
        return tuple(k * p for k, p in enumerate(self.base.pmf))

    def split_prob(self, i: int, j: int) -> float:
        """P(L = i, R = j)."""
        if i < 0 or j < 0:
            return 0.0
        return self.base.p(i + j + 1)

    def sample_size(self, rng: np.random.Generator, size: int) -> IntArray:
        """Draw ``size`` size-biased child counts."""
        if self.base.family is OffspringFamily.geometric:
            return (rng.negative_binomial(2, 0.5, size) + 1).astype(np.int64)
        cdf = _cdf(self.pmf)
        idx = np.searchsorted(cdf, rng.random(size), side="right")
        return np.minimum(idx, len(cdf) - 1).astype(np.int64)

    def sample_split(
        self, rng: np.random.Generator, size: int
    ) -> tuple[IntArray, IntArray]:
        """Draw ``size`` pairs (L, R) of left and right sibling counts."""
        total = self.sample_size(rng, size)
        left = rng.integers(0, total, dtype=np.int64)
        return left, total - 1 - left


# ---------------------------------------------------------------------------
# Exact oracles
# ---------------------------------------------------------------------------


def make_law(text: str | OffspringFamily) -> OffspringLaw:
    """Build a certified offspring law from a description string.

    Accepted forms: ``binary``, ``geometric``, ``poisson`` or
    ``poisson:<k_max>``, and ``custom:<p0>,<p1>,...``.

    Raises:
        ConfigError: Unknown family, or a pmf that is not critical.
    """
    family, _, arg = str(getattr(text, "value", text)).strip().partition(":")
    if family == "binary":
        return OffspringLaw(family=OffspringFamily.binary, pmf=(0.5, 0.0, 0.5))
    if family == "geometric":
        return OffspringLaw(
            family=OffspringFamily.geometric,
            pmf=tuple(2.0 ** -(k + 1) for k in range(_GEOMETRIC_CUTOFF + 1)),
        )
    if family in ("poisson", "poisson-capped"):
        k_max = int(arg) if arg else _POISSON_KMAX
        if k_max < 2:
            raise ConfigError(f"Cannot cap a Poisson law at k_max={k_max!r}.")
        raw = np.array([math.exp(-1.0 - math.lgamma(k + 1)) for k in range(k_max + 1)])
        raw /= raw.sum()
        mean = float(np.arange(k_max + 1) @ raw)
        theta = (1.0 - mean) / (2.0 - mean)
        raw *= 1.0 - theta
        raw[2] += theta
        return OffspringLaw(family=OffspringFamily.poisson_capped, pmf=tuple(raw.tolist()))
    if family == "custom":
        try:
            pmf = tuple(float(v) for v in arg.split(","))
        except ValueError as exc:
            raise ConfigError(f"Cannot parse offspring description {text!r}: {exc}") from exc
        return OffspringLaw(family=OffspringFamily.custom, pmf=pmf)
    raise ConfigError(f"Cannot build unknown offspring law {text!r}.")


def survival_prob_exact(law: OffspringLaw, n: int) -> float:
    """P(Z_n > 0) by iterating q <- 1 - f(1 - q) from q = 1."""
    if n < 0:
        raise ConfigError(f"Cannot compute survival to generation {n!r}.")
    q = 1.0
    for _ in range(n):
        q = 1.0 - law.generating(1.0 - q)
    return q


def _require_catalan(law: OffspringLaw) -> None:
    if law.family not in (OffspringFamily.binary, OffspringFamily.geometric):
        raise ConfigError(
            f"Cannot compute the exact progeny law of family {law.family.value!r}; "
            "estimate it by simulation with sample_tree_stream."
        )


def progeny_pmf_exact(law: OffspringLaw, n: int) -> float:
    """P(#T = n) for binary or geometric offspring.

    Binary trees have odd size with P(#T = 2k+1) = Catalan(k) 2^{-(2k+1)};
    geometric trees have P(#T = n) = Catalan(n-1) 2^{-(2n-1)}.
    """
    _require_catalan(law)
    if n < 1:
        return 0.0
    if law.family is OffspringFamily.binary:
        if n % 2 == 0:
            return 0.0
        k, bits = (n - 1) // 2, n
    else:
        k, bits = n - 1, 2 * n - 1
    log_catalan = math.lgamma(2 * k + 1) - math.lgamma(k + 1) - math.lgamma(k + 2)
    return math.exp(log_catalan - bits * math.log(2.0))


def progeny_tail_exact(law: OffspringLaw, n: int) -> float:
    """P(#T >= n) = 1 - sum_{m < n} P(#T = m)."""
    if n < 1:
        raise ConfigError(f"Cannot compute the progeny tail at n={n!r}.")
    _require_catalan(law)
    return max(0.0, 1.0 - math.fsum(progeny_pmf_exact(law, m) for m in range(1, n)))


def progeny_supported(law: OffspringLaw, n: int) -> bool:
    """Whether P(#T = n) > 0.

    A tree of size n exists iff n - 1 is a sum of at most n nonzero offspring
    counts from the support.
    """
    if n < 1:
        return False
    if law.family is OffspringFamily.geometric:
        return True
    coins = [k for k, p in enumerate(law.pmf) if p > 0 and k > 0]
    fewest = [0] + [n + 1] * (n - 1)
    for s in range(1, n):
        for c in coins:
            if c <= s and fewest[s - c] + 1 < fewest[s]:
                fewest[s] = fewest[s - c] + 1
    return fewest[n - 1] <= n


# ---------------------------------------------------------------------------
# Streaming trees
# ---------------------------------------------------------------------------


class TraversalEvent(NamedTuple):
    """One node of a depth-first tree traversal."""

    node: int
    depth: int
    children: int


class TreeStatus(str, Enum):
    pending = "pending"
    complete = "complete"
    censored = "censored"


class ChildBuffer:
    """Hands out offspring counts one at a time from pre-drawn chunks."""

    def __init__(self, law: OffspringLaw, rng: np.random.Generator) -> None:
        self._law = law
        self._rng = rng
        self._chunk: list[int] = []
        self._pos = 0

    def next(self) -> int:
        if self._pos >= len(self._chunk):
            self._chunk = self._law.sample(self._rng, _BUFFER_SIZE).tolist()
            self._pos = 0
        count = self._chunk[self._pos]
        self._pos += 1
        return count


class TreeStream:
    """Lazy depth-first generation of one Galton-Watson tree.

    Only the stack of unexplored child counts along the current ancestral line
    is held in memory. After iteration, ``status`` is ``complete`` or
    ``censored`` (the budget of generated nodes ran out first) and ``size`` is
    the number of nodes generated.
    """

    def __init__(self, law: OffspringLaw, budget: int, rng: np.random.Generator) -> None:
        if budget < 1:
            raise ConfigError(f"Cannot generate a tree with budget {budget!r}.")
        self._law = law
        self._budget = budget
        self._children = ChildBuffer(law, rng)
        self.status = TreeStatus.pending
        self.size = 0

    def __iter__(self) -> Iterator[TraversalEvent]:
        if self.status is not TreeStatus.pending:
            raise ContractError("Cannot iterate a tree stream twice.")
        count = self._children.next()
        self.size = 1
        yield TraversalEvent(0, 0, count)
        stack = [count]
        while stack:
            if stack[-1] == 0:
                stack.pop()
                continue
            if self.size >= self._budget:
                self.status = TreeStatus.censored
                return
            stack[-1] -= 1
            count = self._children.next()
            yield TraversalEvent(self.size, len(stack), count)
            self.size += 1
            stack.append(count)
        self.status = TreeStatus.complete
        if self._law.family is OffspringFamily.binary and self.size % 2 == 0:
            raise ContractError(f"Binary tree closed with even size {self.size}.")

    def run(self) -> TreeStream:
        """Exhaust the stream, discarding events."""
        for _ in self:
            pass
        return self


def sample_tree_stream(law: OffspringLaw, budget: int, rng: np.random.Generator) -> TreeStream:
    """Return a lazy DFS stream over one tree capped at ``budget`` nodes."""
    return TreeStream(law, budget, rng)


def simulate_generation(
    law: OffspringLaw, n: int, n_trees: int, rng: np.random.Generator
) -> IntArray:
    """Generation sizes Z_n of ``n_trees`` independent processes with Z_0 = 1."""
    if n < 0 or n_trees < 1:
        raise ConfigError(f"Cannot simulate n={n!r} generations of {n_trees!r} trees.")
    population = np.ones(n_trees, dtype=np.int64)
    for _ in range(n):
        live = population > 0
        if not live.any():
            break
        population[live] = law.offspring_sum(rng, population[live])
    return population


def classical_yaglom_samples(
    law: OffspringLaw, n: int, n_trees: int, rng: np.random.Generator
) -> EmpiricalDistribution:
    """Z_n / (sigma2 n / 2) over the processes that survive to generation n."""
    if n < 1:
        raise ConfigError(f"Cannot condition on survival to generation {n!r}.")
    sizes = simulate_generation(law, n, n_trees, rng)
    survivors = sizes[sizes > 0]
    logger.debug("Yaglom n=%d: %d of %d processes survive", n, survivors.size, n_trees)
    return EmpiricalDistribution(survivors / (law.sigma2 * n / 2))
