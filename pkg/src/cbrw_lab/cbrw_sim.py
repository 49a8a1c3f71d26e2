"""Tree-indexed random walk simulation: occupation, pioneers and MRCA."""

from __future__ import annotations

import functools
import logging
import math
from collections.abc import Iterable, Sequence
from typing import Any, NamedTuple, Protocol

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field, model_validator
from scipy import stats

from .errors import ConfigError, ContractError, StarvationError, UnsupportedDimensionError
from .lattice_walk import (
    JumpLaw,
    StepBuffer,
    default_half_widths,
    green_extrapolated,
    shift,
)
from .models import LatticePoint, Mode
from .offspring import ChildBuffer, OffspringLaw
from .parallel import Block, make_blocks, map_blocks
from .streams import StreamFactory

__all__ = [
    "CbrwConfig",
    "CbrwOutcome",
    "ConditionedRun",
    "DrawSource",
    "GeneratorDraws",
    "ManyToOneReport",
    "MrcaTracker",
    "TreeBatch",
    "clopper_pearson",
    "common_ancestor",
    "invariant_violations",
    "many_to_one_check",
    "mrca_extract",
    "run_conditioned",
    "run_trees",
    "simulate",
]

logger = logging.getLogger(__name__)

BoolArray = npt.NDArray[np.bool_]
IntArray = npt.NDArray[np.int64]


# ---------------------------------------------------------------------------
# Configuration and outcome
# ---------------------------------------------------------------------------


class CbrwConfig(BaseModel):
    """One CBRW experiment cell: laws, start point, target set and budget."""

    offspring: OffspringLaw
    jump: JumpLaw
    start: LatticePoint
    target: frozenset[LatticePoint]
    budget: int = Field(default=1_000_000, ge=1)
    mode: Mode = Mode.full_occupation

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _check_points(self) -> CbrwConfig:
        if not self.target:
            raise ConfigError("Cannot simulate with an empty target set.")
        dim = self.jump.dim
        if len(self.start) != dim or any(len(y) != dim for y in self.target):
            raise ConfigError(
                f"Cannot mix start {self.start!r} and targets with dimension {dim}."
            )
        return self


class CbrwOutcome(BaseModel):
    """Summary of one simulated tree.

    When ``lower_bound`` is set (budget expiry, or the early stop of
    ``hit-only`` mode) the counts are lower bounds. In ``pioneers-only`` mode
    ``z_k`` and ``per_site`` count the pioneers only. ``pending`` is the number
    of children still unexplored on the stack when the budget ran out.
    """

    hit: bool
    l_k: int = Field(ge=0)
    z_k: int = Field(ge=0)
    per_site: dict[LatticePoint, int]
    mrca_pos: LatticePoint | None = None
    mrca_depth: int | None = None
    n_x: int | None = None
    progeny: int = Field(ge=1)
    censored: bool = False
    pending: int = Field(default=0, ge=0)
    lower_bound: bool = False
    mode: Mode = Mode.full_occupation
    pioneer_paths: list[tuple[int, ...]] | None = None


def invariant_violations(outcome: CbrwOutcome) -> list[str]:
    """Names of the pioneer/occupation invariants the outcome breaks."""
    problems: list[str] = []
    if not outcome.censored and not (outcome.hit == (outcome.l_k >= 1) == (outcome.z_k >= 1)):
        problems.append("hit-lk-zk")
    if outcome.z_k != sum(outcome.per_site.values()):
        problems.append("zk-per-site")
    if outcome.z_k < outcome.l_k:
        problems.append("zk-ge-lk")
    if outcome.l_k == 1 and not outcome.censored and outcome.mode is not Mode.hit_only:
        if outcome.n_x != 1 or outcome.mrca_pos not in outcome.per_site:
            problems.append("singleton-mrca")
    if outcome.l_k >= 2 and not outcome.censored and (outcome.n_x or 0) < 2:
        problems.append("mrca-children")
    if outcome.pioneer_paths is not None:
        paths = sorted(outcome.pioneer_paths)
        for a, b in zip(paths, paths[1:], strict=False):
            if b[: len(a)] == a:
                problems.append("antichain")
                break
    return problems


# ---------------------------------------------------------------------------
# Random draws
# ---------------------------------------------------------------------------


class DrawSource(Protocol):
    """Supplier of offspring counts and steps for one traversal."""

    def children(self) -> int: ...

    def step(self) -> LatticePoint: ...

    def subtree(self) -> DrawSource: ...


class GeneratorDraws:
    """Draws from a numpy generator.

    Each pioneer consumes one 64-bit key from this stream and its subtree is
    explored on a separate Philox stream with that key, so the traversal above
    the pioneers sees the same draws whatever the mode.
    """

    def __init__(
        self, offspring: OffspringLaw, jump: JumpLaw, rng: np.random.Generator
    ) -> None:
        self._offspring = offspring
        self._jump = jump
        self._rng = rng
        self._children = ChildBuffer(offspring, rng)
        self._steps = StepBuffer(jump, rng)

    def children(self) -> int:
        return self._children.next()

    def step(self) -> LatticePoint:
        return self._steps.next()

    def subtree(self) -> GeneratorDraws:
        key = int(self._rng.integers(0, 2**64, dtype=np.uint64))
        sub = np.random.Generator(np.random.Philox(key=key))
        return GeneratorDraws(self._offspring, self._jump, sub)


# ---------------------------------------------------------------------------
# MRCA
# ---------------------------------------------------------------------------


class MrcaTracker:
    """Streaming most-recent-common-ancestor of the pioneers of a DFS.

    Between two consecutive pioneers the shallowest frame left on the stack is
    their common ancestor. The tracker keeps that low-water mark, the depth and
    position of the current MRCA and the number of its children whose subtrees
    hold a pioneer.
    """

    __slots__ = ("count", "depth", "n_children", "position", "_low")

    def __init__(self) -> None:
        self.count = 0
        self.depth: int | None = None
        self.position: LatticePoint | None = None
        self.n_children = 0
        self._low = 0

    def popped(self, top_depth: int) -> None:
        if top_depth < self._low:
            self._low = top_depth

    def pioneer(self, depth: int, position: LatticePoint, stack: Sequence[list[Any]]) -> None:
        self.count += 1
        if self.depth is None:
            self.depth, self.position, self.n_children = depth, position, 1
        elif self._low < self.depth:
            self.depth = self._low
            self.position = stack[self._low][0]
            self.n_children = 2
        elif self._low == self.depth:
            self.n_children += 1
        self._low = depth - 1


def common_ancestor(paths: Iterable[tuple[int, ...]]) -> tuple[tuple[int, ...], int]:
    """Deepest common prefix of DFS child-index paths and its branching count.

    A single path is its own ancestor with one branch.
    """
    paths = list(paths)
    if not paths:
        raise ContractError("Cannot take the common ancestor of no pioneers.")
    if len(paths) == 1:
        return paths[0], 1
    prefix: list[int] = []
    for column in zip(*paths, strict=False):
        if any(c != column[0] for c in column):
            break
        prefix.append(column[0])
    depth = len(prefix)
    return tuple(prefix), len({p[depth] for p in paths})


def mrca_extract(outcome: CbrwOutcome) -> tuple[LatticePoint, int]:
    """(H_x, N_x(K)) of a complete hit.

    Raises:
        ContractError: On a non-hit, censored or hit-only outcome.
    """
    if not outcome.hit or outcome.lower_bound:
        raise ContractError("Cannot extract the MRCA of a non-hit or truncated tree.")
    assert outcome.mrca_pos is not None and outcome.n_x is not None
    return outcome.mrca_pos, outcome.n_x


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _occupation(
    root: LatticePoint,
    source: DrawSource,
    target: frozenset[LatticePoint],
    per_site: dict[LatticePoint, int],
    visited: int,
    budget: int,
) -> tuple[int, int, bool, int]:
    """Visits to K in the subtree of a pioneer already counted as generated.

    Returns the visits, the running node count, the censoring flag and the
    children left unexplored when censored.
    """
    z = 1
    per_site[root] += 1
    stack = [[root, source.children()]]
    while stack:
        frame = stack[-1]
        if frame[1] == 0:
            stack.pop()
            continue
        if visited >= budget:
            return z, visited, True, sum(f[1] for f in stack)
        frame[1] -= 1
        child = shift(frame[0], source.step())
        visited += 1
        if child in target:
            z += 1
            per_site[child] += 1
        stack.append([child, source.children()])
    return z, visited, False, 0


def simulate(
    config: CbrwConfig,
    rng: np.random.Generator | DrawSource,
    *,
    record_paths: bool = False,
) -> CbrwOutcome:
    """Run one CBRW from ``config.start`` by depth-first traversal.

    Positions live on the ancestor stack only. The first node of each
    ancestral line that lands in K is a pioneer; traversal never descends
    below it in ``pioneers-only`` mode, stops at it in ``hit-only`` mode and
    counts its whole subtree in ``full-occupation`` mode.

    Args:
        config: The experiment cell.
        rng: A numpy generator, or any :class:`DrawSource`.
        record_paths: Keep the DFS child-index path of every pioneer.
    """
    source: DrawSource = (
        GeneratorDraws(config.offspring, config.jump, rng)
        if isinstance(rng, np.random.Generator)
        else rng
    )
    target = config.target
    mode = config.mode
    budget = config.budget
    per_site = dict.fromkeys(sorted(target), 0)
    tracker = MrcaTracker()
    paths: list[tuple[int, ...]] | None = [] if record_paths else None
    visited = 1
    l_k = z_k = pending = 0
    censored = stopped = False

    def visit_pioneer(pos: LatticePoint) -> None:
        nonlocal z_k, visited, censored, stopped, pending
        sub = source.subtree()
        if mode is Mode.hit_only:
            z_k += 1
            per_site[pos] += 1
            stopped = True
        elif mode is Mode.pioneers_only:
            z_k += 1
            per_site[pos] += 1
        else:
            z, visited, censored, pending = _occupation(
                pos, sub, target, per_site, visited, budget
            )
            z_k += z

    start = config.start
    if start in target:
        l_k = 1
        tracker.pioneer(0, start, [])
        if paths is not None:
            paths.append(())
        visit_pioneer(start)
    else:
        stack: list[list[Any]] = [[start, source.children(), 0]]
        while stack:
            frame = stack[-1]
            if frame[1] == 0:
                stack.pop()
                tracker.popped(len(stack) - 1)
                continue
            if visited >= budget:
                censored = True
                pending += sum(f[1] for f in stack)
                break
            frame[1] -= 1
            frame[2] += 1
            pos = shift(frame[0], source.step())
            visited += 1
            if pos in target:
                l_k += 1
                tracker.pioneer(len(stack), pos, stack)
                if paths is not None:
                    paths.append(tuple(f[2] - 1 for f in stack))
                visit_pioneer(pos)
                if censored:
                    pending += sum(f[1] for f in stack)
                if censored or stopped:
                    break
                continue
            stack.append([pos, source.children(), 0])

    complete_mrca = l_k > 0 and not censored and not stopped
    return CbrwOutcome(
        hit=l_k > 0,
        l_k=l_k,
        z_k=z_k,
        per_site=per_site,
        mrca_pos=tracker.position if complete_mrca else None,
        mrca_depth=tracker.depth if complete_mrca else None,
        n_x=tracker.n_children if complete_mrca else None,
        progeny=visited,
        censored=censored,
        pending=pending,
        lower_bound=censored or stopped,
        mode=mode,
        pioneer_paths=paths,
    )


# ---------------------------------------------------------------------------
# Batches of trees
# ---------------------------------------------------------------------------


class TreeBatch(NamedTuple):
    """Per-tree flags of one block plus the outcomes worth keeping."""

    block: Block
    hit: BoolArray
    censored: BoolArray
    z_k: IntArray
    pending: IntArray
    kept: list[tuple[int, CbrwOutcome]]


def _tree_block(
    config: CbrwConfig, streams: StreamFactory, keep_all: bool, block: Block
) -> TreeBatch:
    size = len(block)
    hit = np.zeros(size, dtype=bool)
    censored = np.zeros(size, dtype=bool)
    z_k = np.zeros(size, dtype=np.int64)
    pending = np.zeros(size, dtype=np.int64)
    kept: list[tuple[int, CbrwOutcome]] = []
    for offset in range(size):
        index = block.start + offset
        outcome = simulate(config, streams.generator(index))
        hit[offset] = outcome.hit
        censored[offset] = outcome.censored
        z_k[offset] = outcome.z_k
        pending[offset] = outcome.pending
        if keep_all or outcome.hit or outcome.censored:
            kept.append((index, outcome))
    return TreeBatch(block, hit, censored, z_k, pending, kept)


def run_trees(
    config: CbrwConfig,
    n_trees: int,
    streams: StreamFactory,
    *,
    workers: int = 1,
    block_size: int = 1000,
    keep_all: bool = False,
) -> list[TreeBatch]:
    """Simulate ``n_trees`` trees on per-tree streams, in block order."""
    if n_trees < 1:
        raise ConfigError(f"Cannot run {n_trees!r} trees.")
    fn = functools.partial(_tree_block, config, streams, keep_all)
    return list(map_blocks(fn, make_blocks(n_trees, block_size), workers))


def clopper_pearson(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval."""
    alpha = 1 - level
    lo, hi = 0.0, 1.0
    if successes > 0:
        lo = float(stats.beta.ppf(alpha / 2, successes, trials - successes + 1))
    if successes < trials:
        hi = float(stats.beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return lo, hi


class ManyToOneReport(BaseModel):
    """Tree-average occupation of K next to the Green-function oracle.

    Attributes:
        mean: Mean of Z_T(K) over trees; censored trees contribute the
            occupation seen before the budget ran out.
        se: Standard error of ``mean``.
        oracle: g(x, K) from the extrapolated Green table.
        oracle_bias: Bias bound of ``oracle``.
        z_score: (mean - oracle) / se.
        censored_fraction: Fraction of trees that hit the node budget.
        censoring_mass: Progeny-tail mass 2 / sqrt(2 pi sigma^2 budget).
        occupation_cap: Bound on the expected occupation of K by one fresh
            tree started anywhere, |K| g(0, 0).
        censoring_bias: Mean number of unexplored children per tree times
            ``occupation_cap``; bounds the occupation lost to censoring.
        n_trees: Trees simulated.
    """

    mean: float
    se: float = Field(ge=0.0)
    oracle: float
    oracle_bias: float = Field(ge=0.0)
    z_score: float
    censored_fraction: float = Field(ge=0.0, le=1.0)
    censoring_mass: float = Field(ge=0.0)
    occupation_cap: float = Field(ge=0.0)
    censoring_bias: float = Field(ge=0.0)
    n_trees: int

    @property
    def tolerance(self) -> float:
        return 4 * self.se + self.oracle_bias

    def agrees_with(self, value: float) -> bool:
        """Whether ``value`` lies within 4 SE plus the oracle bias of the mean."""
        return abs(self.mean - value) <= self.tolerance

    @property
    def agrees(self) -> bool:
        return self.agrees_with(self.oracle)


def many_to_one_check(
    config: CbrwConfig,
    n_trees: int,
    streams: StreamFactory,
    *,
    workers: int = 1,
    block_size: int = 1000,
    half_widths: tuple[int, int] | None = None,
    batches: list[TreeBatch] | None = None,
) -> ManyToOneReport:
    """Compare the mean of Z_T(K) over trees with g(x, K).

    Every child left unexplored by a censored tree roots an independent tree
    whose mean occupation of K is at most |K| g(0, 0), so the censoring bias
    is bounded by the mean pending count times that cap.
    """
    if config.jump.dim < 3:
        raise UnsupportedDimensionError(
            f"Cannot check many-to-one in dimension {config.jump.dim}: no Green oracle."
        )
    config = config.model_copy(update={"mode": Mode.full_occupation})
    if batches is None:
        batches = run_trees(config, n_trees, streams, workers=workers, block_size=block_size)
    z = np.concatenate([b.z_k for b in batches]).astype(np.float64)
    censored = np.concatenate([b.censored for b in batches])
    pending = np.concatenate([b.pending for b in batches]).astype(np.float64)
    widths = half_widths or default_half_widths(config.jump.dim)
    oracle = 0.0
    oracle_bias = 0.0
    for y in config.target:
        diff = tuple(a - b for a, b in zip(y, config.start, strict=True))
        value = green_extrapolated(diff, config.jump, widths)
        oracle += value.value
        oracle_bias += value.bias_bound
    g0 = green_extrapolated((0,) * config.jump.dim, config.jump, widths)
    cap = len(config.target) * (g0.value + g0.bias_bound)
    mean = float(z.mean())
    se = float(z.std(ddof=1) / math.sqrt(z.size)) if z.size > 1 else 0.0
    censored_fraction = float(censored.mean())
    if censored_fraction >= 0.01:
        logger.warning("many-to-one: censored fraction %.3f", censored_fraction)
    return ManyToOneReport(
        mean=mean,
        se=se,
        oracle=oracle,
        oracle_bias=oracle_bias,
        z_score=(mean - oracle) / se if se > 0 else math.inf,
        censored_fraction=censored_fraction,
        censoring_mass=2.0 / math.sqrt(2 * math.pi * config.offspring.sigma2 * config.budget),
        occupation_cap=cap,
        censoring_bias=float(pending.mean()) * cap,
        n_trees=int(z.size),
    )


class ConditionedRun(BaseModel):
    """Hits collected by rejection sampling.

    Attributes:
        hits: Complete hit outcomes in tree-index order.
        indices: Global tree index of each hit.
        tried: Trees simulated up to and including the last kept hit.
        censored: Censored trees among those tried.
        censored_hits: Censored trees that had already hit K.
        hit_rate: (hits + censored_hits) / tried.
        hit_rate_ci: 95% Clopper-Pearson interval of the hit rate.
    """

    hits: list[CbrwOutcome]
    indices: list[int]
    tried: int
    censored: int
    censored_hits: int
    hit_rate: float
    hit_rate_ci: tuple[float, float]

    @property
    def censored_fraction(self) -> float:
        return self.censored / self.tried if self.tried else 0.0


def _conditioned_blocks(max_trees: int, block_size: int) -> Iterable[Block]:
    start = index = 0
    while start < max_trees:
        stop = min(start + block_size, max_trees)
        yield Block(index=index, start=start, stop=stop)
        start, index = stop, index + 1


def run_conditioned(
    config: CbrwConfig,
    target_hits: int,
    max_trees: int,
    streams: StreamFactory,
    *,
    workers: int = 1,
    block_size: int = 1000,
) -> ConditionedRun:
    """Simulate trees until ``target_hits`` complete hits or ``max_trees``.

    Blocks are consumed in index order and the run is cut at the tree that
    delivers the last needed hit, so the result depends on the seed only.

    Raises:
        ConfigError: If ``target_hits < 1``.
        StarvationError: If no tree hits K.
    """
    if target_hits < 1:
        raise ConfigError(f"Cannot collect target_hits={target_hits!r}.")
    if max_trees < 1:
        raise ConfigError(f"Cannot run max_trees={max_trees!r}.")
    fn = functools.partial(_tree_block, config, streams, False)
    hits: list[CbrwOutcome] = []
    indices: list[int] = []
    censored_idx: list[int] = []
    censored_hit_idx: list[int] = []
    tried = 0
    batches = map_blocks(fn, _conditioned_blocks(max_trees, block_size), workers)
    try:
        for batch in batches:
            tried = batch.block.stop
            for index, outcome in batch.kept:
                if outcome.censored:
                    censored_idx.append(index)
                    if outcome.hit:
                        censored_hit_idx.append(index)
                    continue
                hits.append(outcome)
                indices.append(index)
                if len(hits) == target_hits:
                    tried = index + 1
                    break
            if len(hits) == target_hits:
                break
    finally:
        close = getattr(batches, "close", None)
        if close is not None:
            close()

    censored = sum(1 for i in censored_idx if i < tried)
    censored_hits = sum(1 for i in censored_hit_idx if i < tried)
    successes = len(hits) + censored_hits
    lo, hi = clopper_pearson(successes, tried)
    if not hits:
        raise StarvationError(
            f"Cannot condition on hitting K: 0 hits in {tried} trees "
            f"(95% upper bound on the hit rate {hi:.3g}).",
            tried=tried,
            upper_bound=hi,
        )
    logger.info(
        "Conditioned run: %d hits in %d trees (%d censored)", len(hits), tried, censored
    )
    return ConditionedRun(
        hits=hits,
        indices=indices,
        tried=tried,
        censored=censored,
        censored_hits=censored_hits,
        hit_rate=successes / tried,
        hit_rate_ci=(lo, hi),
    )
