"""Spinal decomposition and backward-spine estimators for d >= 5.

The backward spine runs from a point y of K with the reflected jump law and
carries, at each step, the siblings of a size-biased ancestral line. Each
sibling launches an independent CBRW whose pioneer count feeds Sigma, and the
law nu of the pioneer count far from K is the escape-conditioned law of
1 + Sigma reweighted by 1 / (1 + Sigma).
"""

from __future__ import annotations

import functools
import logging
import math
from collections.abc import Callable, Iterable
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field

from .cbrw_sim import CbrwConfig, GeneratorDraws, clopper_pearson, simulate
from .errors import ConfigError, StarvationError, UnsupportedDimensionError
from .lattice_walk import JumpLaw, StepBuffer, c_d, diameter, jnorm_many, shift
from .models import Estimate, LatticePoint, Mode
from .offspring import OffspringLaw, SizeBiasedLaw
from .parallel import Block, make_blocks, map_blocks
from .streams import StreamFactory

__all__ = [
    "BcapEstimate",
    "NuEstimate",
    "SpineBatch",
    "SpineParams",
    "SpineSample",
    "SpineWalk",
    "bcap_from_samples",
    "collect_spine_samples",
    "default_escape_radius",
    "estimate_bcap",
    "estimate_nu",
    "estimate_sigma_inf",
    "nu_from_samples",
    "nu_occupation_from_samples",
    "poisoning_bound",
    "sample_spine_forward",
    "spine_occupation_mean",
]

logger = logging.getLogger(__name__)

_WALK_CHUNK = 4096
_SPLIT_CHUNK = 64

IntArray = npt.NDArray[np.int64]


class SpineWalk(NamedTuple):
    """Forward spine: positions S_0..S_h and sibling counts (L_n, R_n)."""

    positions: IntArray
    left: IntArray
    right: IntArray


def sample_spine_forward(
    x: LatticePoint,
    offspring: OffspringLaw,
    jump: JumpLaw,
    horizon: int,
    rng: np.random.Generator,
) -> SpineWalk:
    """Sample ``horizon`` generations of the spine under the size-biased measure."""
    if horizon < 1:
        raise ConfigError(f"Cannot sample a spine with horizon {horizon!r}.")
    steps = jump.sample_steps(rng, horizon)
    positions = np.vstack([np.asarray(x, dtype=np.int64), steps]).cumsum(axis=0)
    left, right = offspring.size_biased().sample_split(rng, horizon)
    return SpineWalk(positions, left, right)


def spine_occupation_mean(
    x: LatticePoint,
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    horizon: int,
    n_samples: int,
    rng: np.random.Generator,
) -> Estimate:
    """Mean number of spine generations n <= horizon with S_{w_n} in K.

    By the many-to-one identity this equals the expected occupation of K by
    generations 0..horizon of the CBRW.
    """
    points = np.array(sorted(set(target)), dtype=np.int64)
    counts = np.zeros(n_samples)
    for i in range(n_samples):
        walk = sample_spine_forward(x, offspring, jump, horizon, rng)
        inside = (walk.positions[:, None, :] == points[None, :, :]).all(-1).any(-1)
        counts[i] = inside.sum()
    return Estimate(
        value=float(counts.mean()),
        se=float(counts.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0,
        n=n_samples,
    )


# ---------------------------------------------------------------------------
# Backward spine
# ---------------------------------------------------------------------------


class SpineParams(BaseModel):
    """Truncation parameters of the backward spine.

    Attributes:
        k_max: Backward steps that carry siblings.
        escape_radius: J-radius declared as escape; defaults to
            64 * diam(K) + 64.
        subtree_budget: Node budget of each sibling CBRW.
        max_walk_steps: Hard cap on backward steps.
        track_occupation: Also accumulate the occupation analogue of Sigma.
    """

    k_max: int = Field(default=64, ge=1)
    escape_radius: float | None = Field(default=None, gt=0)
    subtree_budget: int = Field(default=10_000_000, ge=1)
    max_walk_steps: int = Field(default=100_000_000, ge=1)
    track_occupation: bool = False

    model_config = {"frozen": True}


class SpineSample(BaseModel):
    """One backward-spine realization from y in K."""

    y: LatticePoint
    escaped: bool
    poisoned: bool = False
    sigma_trunc: int = Field(ge=0)
    occupation_trunc: int | None = None
    k_used: int = Field(ge=0)
    walk_steps: int = Field(ge=0)
    escape_bound: float = Field(ge=0.0)
    truncation_bound: float = Field(ge=0.0)


def default_escape_radius(target: Iterable[LatticePoint]) -> float:
    """64 * diam(K) + 64."""
    return 64.0 * diameter(target) + 64.0


class _SplitBuffer:
    def __init__(self, law: SizeBiasedLaw, rng: np.random.Generator) -> None:
        self._law = law
        self._rng = rng
        self._chunk: list[int] = []
        self._pos = 0

    def next(self) -> int:
        if self._pos >= len(self._chunk):
            left, right = self._law.sample_split(self._rng, _SPLIT_CHUNK)
            self._chunk = (left + right).tolist()
            self._pos = 0
        value = self._chunk[self._pos]
        self._pos += 1
        return value


def _far_tail(jump: JumpLaw, sigma2: float, card: int, radius: float) -> float:
    """Expected Sigma mass generated after the walk leaves the J-ball of radius R."""
    d = jump.dim
    if d <= 4:
        return math.inf
    sphere = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    volume = d ** (d / 2) * math.sqrt(jump.det_cov)
    return sigma2 * c_d(jump) ** 2 * card * sphere * volume * radius ** (4 - d) / (d - 4)


def _sub_generators(rng: np.random.Generator) -> tuple[np.random.Generator, ...]:
    keys = rng.integers(0, 2**64, size=3, dtype=np.uint64)
    return tuple(np.random.Generator(np.random.Philox(key=int(k))) for k in keys)


def estimate_sigma_inf(
    y: LatticePoint,
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    rng: np.random.Generator,
    *,
    k_max: int = 64,
    escape_radius: float | None = None,
    subtree_budget: int = 10_000_000,
    max_walk_steps: int = 100_000_000,
    track_occupation: bool = False,
) -> SpineSample:
    """One truncated realization of Sigma from y.

    The backward walk, the sibling draws and the sibling trees use three
    streams keyed from ``rng``, so raising ``k_max`` or the escape radius only
    appends terms to a realization. A sibling tree that exhausts
    ``subtree_budget`` poisons the sample.

    Raises:
        UnsupportedDimensionError: If d <= 3.
        ConfigError: If y is not in K.
    """
    d = jump.dim
    if d <= 3:
        raise UnsupportedDimensionError(f"Cannot run the backward spine in dimension {d}.")
    if d == 4:
        logger.warning("Backward spine in d=4 is diagnostic only: Sigma is a.s. infinite.")
    points = frozenset(target)
    if y not in points:
        raise ConfigError(f"Cannot start the backward spine at {y!r} outside K.")
    radius = escape_radius or default_escape_radius(points)
    walk_rng, sibling_rng, tree_rng = _sub_generators(rng)
    back = StepBuffer(jump.reversed(), walk_rng)
    displacement = StepBuffer(jump, sibling_rng)
    siblings = _SplitBuffer(offspring.size_biased(), sibling_rng)
    trees = GeneratorDraws(offspring, jump, tree_rng)
    mode = Mode.full_occupation if track_occupation else Mode.pioneers_only
    sub_config = CbrwConfig(
        offspring=offspring, jump=jump, start=y, target=points,
        budget=subtree_budget, mode=mode,
    )
    cinv = (jump.cov_inv / d).tolist()
    radius2 = radius * radius
    sigma2 = offspring.sigma2
    card = len(points)
    gap = max(radius - float(jnorm_many(list(points), jump).max()), 1.0)
    escape_bound = c_d(jump) * card / gap ** (d - 2)

    def result(escaped: bool, *, poisoned: bool = False, steps: int, tail: float) -> SpineSample:
        return SpineSample(
            y=y, escaped=escaped, poisoned=poisoned, sigma_trunc=sigma,
            occupation_trunc=occupation if track_occupation else None,
            k_used=min(steps, k_max), walk_steps=steps,
            escape_bound=escape_bound, truncation_bound=tail,
        )

    sigma = 0
    occupation = 0
    if track_occupation:
        own = simulate(sub_config, trees)
        if own.censored:
            return result(False, poisoned=True, steps=0, tail=0.0)
        occupation = own.z_k

    pos = y
    for k in range(1, k_max + 1):
        pos = shift(pos, back.next())
        if pos in points:
            return result(False, steps=k, tail=0.0)
        if sum(a * c * b for a, row in zip(pos, cinv) for c, b in zip(row, pos)) > radius2:
            return result(True, steps=k, tail=_far_tail(jump, sigma2, card, radius))
        for _ in range(siblings.next()):
            start = shift(pos, displacement.next())
            out = simulate(sub_config.model_copy(update={"start": start}), trees)
            if out.censored:
                return result(False, poisoned=True, steps=k, tail=0.0)
            sigma += out.l_k
            occupation += out.z_k

    # Past k_max the walk only decides escape and accumulates the tail estimate.
    steps = k_max
    tail = 0.0
    target_arr = np.array(sorted(points), dtype=np.int64)
    current = np.asarray(pos, dtype=np.int64)
    weight = sigma2 * c_d(jump) * card
    while steps < max_walk_steps:
        path = current + np.cumsum(_draw_steps(back, _WALK_CHUNK), axis=0)
        inside = (path[:, None, :] == target_arr[None, :, :]).all(-1).any(-1)
        jn = jnorm_many(path, jump)
        out = jn > radius
        first_in = int(np.argmax(inside)) if inside.any() else _WALK_CHUNK
        first_out = int(np.argmax(out)) if out.any() else _WALK_CHUNK
        stop = min(first_in, first_out)
        tail += weight * float((np.maximum(jn[:stop], 1.0) ** (2 - d)).sum())
        if stop < _WALK_CHUNK:
            steps += stop + 1
            if first_in < first_out:
                return result(False, steps=steps, tail=0.0)
            return result(True, steps=steps, tail=tail + _far_tail(jump, sigma2, card, radius))
        steps += _WALK_CHUNK
        current = path[-1]
    logger.warning("Backward walk from %s capped at %d steps", y, max_walk_steps)
    return result(True, steps=steps, tail=math.inf)


def _draw_steps(buffer: StepBuffer, size: int) -> IntArray:
    return np.array([buffer.next() for _ in range(size)], dtype=np.int64)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


class SpineBatch(BaseModel):
    """Backward-spine samples for every point of K, in sample-index order."""

    target: list[LatticePoint]
    samples: list[SpineSample]
    params: SpineParams

    @property
    def poisoned(self) -> int:
        return sum(1 for s in self.samples if s.poisoned)

    @property
    def poisoned_fraction(self) -> float:
        return self.poisoned / len(self.samples) if self.samples else 0.0


def poisoning_bound(params: SpineParams, offspring: OffspringLaw) -> float:
    """Union bound on the chance that one spine sample is poisoned.

    A sample launches sigma^2 k_max sibling trees on average, plus its own tree
    when tracking occupation, and each outgrows the budget with probability
    about 2 / sqrt(2 pi sigma^2 budget).
    """
    tail = 2.0 / math.sqrt(2 * math.pi * offspring.sigma2 * params.subtree_budget)
    trees = offspring.sigma2 * params.k_max + (1 if params.track_occupation else 0)
    return min(1.0, trees * tail)


def _spine_block(
    target: tuple[LatticePoint, ...],
    offspring: OffspringLaw,
    jump: JumpLaw,
    params: SpineParams,
    streams: StreamFactory,
    n_samples: int,
    block: Block,
) -> list[SpineSample]:
    samples = []
    for index in range(block.start, block.stop):
        y = target[index // n_samples]
        samples.append(
            estimate_sigma_inf(
                y, target, offspring, jump, streams.generator(index),
                k_max=params.k_max, escape_radius=params.escape_radius,
                subtree_budget=params.subtree_budget,
                max_walk_steps=params.max_walk_steps,
                track_occupation=params.track_occupation,
            )
        )
    return samples


def collect_spine_samples(
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    n_samples: int,
    params: SpineParams,
    streams: StreamFactory,
    *,
    workers: int = 1,
    block_size: int = 100,
) -> SpineBatch:
    """Draw ``n_samples`` backward-spine samples from every point of K.

    Sample i from the j-th point of K (in sorted order) uses stream index
    j * n_samples + i.
    """
    if jump.dim < 5:
        raise UnsupportedDimensionError(
            f"Cannot estimate nu or BCap in dimension {jump.dim}: needs d >= 5."
        )
    if n_samples < 1:
        raise ConfigError(f"Cannot draw {n_samples!r} spine samples.")
    points = tuple(sorted(set(target)))
    if not points:
        raise ConfigError("Cannot run the backward spine on an empty K.")
    fn = functools.partial(_spine_block, points, offspring, jump, params, streams, n_samples)
    samples: list[SpineSample] = []
    for chunk in map_blocks(fn, make_blocks(len(points) * n_samples, block_size), workers):
        samples.extend(chunk)
    batch = SpineBatch(target=list(points), samples=samples, params=params)
    if batch.poisoned_fraction >= 0.01:
        logger.warning("Spine batch: %.1f%% samples poisoned", 100 * batch.poisoned_fraction)
    return batch


class NuEstimate(BaseModel):
    """Self-normalized estimate of the d >= 5 limit law of the pioneer count."""

    support: dict[int, float]
    se: dict[int, float]
    n_effective: float
    n_samples: int
    n_escaped: int
    poisoned: int

    @property
    def mean(self) -> float:
        return math.fsum(k * p for k, p in self.support.items())


class BcapEstimate(BaseModel):
    """Branching capacity with the coupled random-walk capacity."""

    value: float = Field(ge=0.0)
    se: float = Field(ge=0.0)
    coupled_cap: float = Field(ge=0.0)
    coupled_cap_se: float = Field(ge=0.0)
    escape_bound: float = Field(ge=0.0)
    truncation_bound: float = Field(ge=0.0)
    poisoned_fraction: float = Field(ge=0.0, le=1.0)
    n_samples: int


def _by_point(batch: SpineBatch) -> dict[LatticePoint, list[SpineSample]]:
    groups: dict[LatticePoint, list[SpineSample]] = {y: [] for y in batch.target}
    for sample in batch.samples:
        if not sample.poisoned:
            groups[sample.y].append(sample)
    return groups


def _weighted_law(
    batch: SpineBatch, atom_of: Callable[[SpineSample], int]
) -> tuple[dict[int, float], dict[int, float], float, int]:
    groups = [ss for ss in _by_point(batch).values() if ss]
    escaped = [s for ss in groups for s in ss if s.escaped]
    if not escaped:
        usable = sum(len(ss) for ss in groups)
        _, hi = clopper_pearson(0, max(usable, 1))
        raise StarvationError(
            f"Cannot estimate nu: none of {usable} spine samples escaped.",
            tried=usable,
            upper_bound=hi,
        )
    # Per point of K: escape weights w = 1{escaped}/(1+Sigma) and atom labels.
    weights = [np.array([s.escaped / (1 + s.sigma_trunc) for s in ss]) for ss in groups]
    labels = [np.array([atom_of(s) for s in ss]) for ss in groups]
    total = math.fsum(float(w.mean()) for w in weights)
    atoms = sorted({atom_of(s) for s in escaped})
    support: dict[int, float] = {}
    se: dict[int, float] = {}
    for atom in atoms:
        numer = math.fsum(
            float((w * (lab == atom)).mean()) for w, lab in zip(weights, labels, strict=True)
        )
        p = numer / total
        var = math.fsum(
            float((w * (lab == atom) - p * w).var(ddof=1)) / w.size
            for w, lab in zip(weights, labels, strict=True)
            if w.size > 1
        )
        support[atom] = p
        se[atom] = math.sqrt(var) / total
    norm = math.fsum(support.values())
    support = {k: p / norm for k, p in support.items()}
    flat = np.array([1.0 / (1 + s.sigma_trunc) for s in escaped])
    n_eff = float(flat.sum() ** 2 / (flat**2).sum())
    return support, se, n_eff, len(escaped)


def nu_from_samples(batch: SpineBatch) -> NuEstimate:
    """Weight 1/(1+Sigma) on atom 1+Sigma over escaped samples, normalized.

    Raises:
        StarvationError: If no sample escaped.
    """
    support, se, n_eff, n_escaped = _weighted_law(batch, lambda s: 1 + s.sigma_trunc)
    return NuEstimate(
        support=support, se=se, n_effective=n_eff,
        n_samples=len(batch.samples), n_escaped=n_escaped, poisoned=batch.poisoned,
    )


def nu_occupation_from_samples(batch: SpineBatch) -> NuEstimate:
    """Escape-weighted law of the occupation analogue of 1 + Sigma."""
    if not batch.params.track_occupation:
        raise ConfigError("Cannot build the occupation law without track_occupation.")
    support, se, n_eff, n_escaped = _weighted_law(batch, lambda s: s.occupation_trunc or 0)
    return NuEstimate(
        support=support, se=se, n_effective=n_eff,
        n_samples=len(batch.samples), n_escaped=n_escaped, poisoned=batch.poisoned,
    )


def bcap_from_samples(batch: SpineBatch) -> BcapEstimate:
    """BCap(K) = sum over y of the mean of 1{escaped} / (1 + Sigma)."""
    value = var = cap = cap_var = 0.0
    escape_bound = truncation = 0.0
    for samples in _by_point(batch).values():
        if not samples:
            continue
        n = len(samples)
        contrib = np.array([s.escaped / (1 + s.sigma_trunc) for s in samples], dtype=np.float64)
        escaped = np.array([s.escaped for s in samples], dtype=np.float64)
        value += float(contrib.mean())
        cap += float(escaped.mean())
        if n > 1:
            var += float(contrib.var(ddof=1)) / n
            cap_var += float(escaped.var(ddof=1)) / n
        escape_bound += max(s.escape_bound for s in samples)
        finite = [s.truncation_bound for s in samples if s.escaped]
        truncation += float(np.mean(finite)) if finite else 0.0
    return BcapEstimate(
        value=value,
        se=math.sqrt(var),
        coupled_cap=cap,
        coupled_cap_se=math.sqrt(cap_var),
        escape_bound=escape_bound,
        truncation_bound=truncation,
        poisoned_fraction=batch.poisoned_fraction,
        n_samples=len(batch.samples),
    )


def estimate_nu(
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    n_samples: int,
    params: SpineParams,
    streams: StreamFactory,
    *,
    workers: int = 1,
) -> NuEstimate:
    """Estimate the d >= 5 limit law of L_K given a hit."""
    batch = collect_spine_samples(
        target, offspring, jump, n_samples, params, streams, workers=workers
    )
    return nu_from_samples(batch)


def estimate_bcap(
    target: Iterable[LatticePoint],
    offspring: OffspringLaw,
    jump: JumpLaw,
    n_samples: int,
    params: SpineParams,
    streams: StreamFactory,
    *,
    workers: int = 1,
) -> BcapEstimate:
    """Estimate BCap(K) from backward-spine samples."""
    batch = collect_spine_samples(
        target, offspring, jump, n_samples, params, streams, workers=workers
    )
    return bcap_from_samples(batch)
