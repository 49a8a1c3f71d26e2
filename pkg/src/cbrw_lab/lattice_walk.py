"""Random-walk kernel on Z^d: jump laws, J-norm geometry, Green function, capacity."""

from __future__ import annotations

import functools
import logging
import math
import operator
from collections.abc import Callable, Iterable, Sequence
from enum import Enum
from fractions import Fraction
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field, model_validator
from scipy import sparse
from scipy.sparse import linalg as splinalg
from scipy.special import zeta

from .errors import ConfigError, SolverError, UnsupportedDimensionError
from .models import Estimate, LatticePoint

__all__ = [
    "CapacityEstimate",
    "CapacityMethod",
    "CapacityParams",
    "GreenTable",
    "GreenValue",
    "HittingEstimate",
    "JumpLaw",
    "OvershootBound",
    "StepBuffer",
    "WalkResult",
    "c_d",
    "capacity",
    "default_half_widths",
    "diameter",
    "green_exact",
    "green_extrapolated",
    "green_mc",
    "green_series",
    "green_table",
    "heavy_walk",
    "hitting_prob_rw",
    "jnorm",
    "jnorm_many",
    "lazy_walk",
    "make_jump_law",
    "overshoot_bound",
    "point_at_jnorm",
    "shift",
    "simple_random_walk",
    "walk_until",
]

logger = logging.getLogger(__name__)

_TOLERANCE = 1e-12
_SOLVER_TOLERANCE = 1e-10
# Multiplies c_d / J^{d-2} when bounding the Green mass lost past a boundary.
_MAJORANT_FACTOR = 2.0
_BUFFER_SIZE = 1024

IntArray = npt.NDArray[np.int64]
FloatArray = npt.NDArray[np.float64]


# ---------------------------------------------------------------------------
# Jump laws
# ---------------------------------------------------------------------------


def _exact_moments(
    atoms: Sequence[tuple[LatticePoint, float]], dim: int
) -> tuple[list[Fraction], list[list[Fraction]]]:
    """Mean vector and second-moment matrix in exact rational arithmetic."""
    mean = [Fraction(0)] * dim
    second = [[Fraction(0)] * dim for _ in range(dim)]
    for point, prob in atoms:
        weight = Fraction(prob)
        for i in range(dim):
            mean[i] += weight * point[i]
            for j in range(dim):
                second[i][j] += weight * point[i] * point[j]
    return mean, second


def _lattice_index(vectors: Iterable[LatticePoint], dim: int) -> int:
    """Index of the subgroup generated by ``vectors`` in Z^d (0 if rank < d)."""
    rows = [list(v) for v in vectors if any(v)]
    index = 1
    for col in range(dim):
        active = [row for row in rows if row[col] != 0]
        rest = [row for row in rows if row[col] == 0]
        if not active:
            return 0
        while len(active) > 1:
            active.sort(key=lambda row: abs(row[col]))
            pivot = active[0]
            reduced = [pivot]
            for row in active[1:]:
                q = row[col] // pivot[col]
                new = [a - q * b for a, b in zip(row, pivot, strict=True)]
                (reduced if new[col] != 0 else rest).append(new)
            active = reduced
        index *= abs(active[0][col])
        rows = rest
    return index


class JumpLaw(BaseModel):
    """A mean-zero step distribution on Z^d with a finite atom list.

    Construction certifies the law: probabilities are non-negative and sum to
    one, the mean vanishes, the covariance is positive definite and the support
    generates Z^d as a group. Mean and covariance are computed in exact rational
    arithmetic from the float probabilities.

    Attributes:
        dim: Lattice dimension d.
        atoms: ``(point, probability)`` pairs.
        name: Short family tag used in logs and summaries.
    """

    dim: int = Field(ge=1)
    atoms: tuple[tuple[LatticePoint, float], ...]
    name: str = "custom"

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _certify(self) -> JumpLaw:
        if not self.atoms:
            raise ConfigError("Cannot build a jump law without atoms.")
        for point, prob in self.atoms:
            if len(point) != self.dim:
                raise ConfigError(
                    f"Cannot use atom {point!r} in dimension {self.dim}."
                )
            if prob < 0:
                raise ConfigError(f"Cannot use negative probability {prob!r}.")
        total = math.fsum(prob for _, prob in self.atoms)
        if abs(total - 1.0) > _TOLERANCE:
            raise ConfigError(f"Cannot use atom masses summing to {total!r}.")
        mean, second = _exact_moments(self.atoms, self.dim)
        if any(abs(float(m)) > _TOLERANCE for m in mean):
            raise ConfigError(
                f"Cannot use a jump law with mean {[float(m) for m in mean]!r}."
            )
        cov = np.array([[float(v) for v in row] for row in second])
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ConfigError("Cannot use a jump law with singular covariance.")
        support = [point for point, prob in self.atoms if prob > 0]
        if _lattice_index(support, self.dim) != 1:
            raise ConfigError(
                f"Cannot use jump law {self.name!r}: support generates a "
                "strict subgroup of Z^d."
            )
        return self

    @property
    def kernel(self) -> _Kernel:
        return _compile(self)

    @property
    def cov(self) -> FloatArray:
        return self.kernel.cov

    @property
    def cov_inv(self) -> FloatArray:
        return self.kernel.cov_inv

    @property
    def det_cov(self) -> float:
        return self.kernel.det_cov

    @property
    def symmetric(self) -> bool:
        masses: dict[LatticePoint, float] = {}
        for point, prob in self.atoms:
            masses[point] = masses.get(point, 0.0) + prob
        return all(
            masses.get(tuple(-c for c in point), 0.0) == prob
            for point, prob in masses.items()
        )

    @property
    def finite_support(self) -> bool:
        return True

    @property
    def radius(self) -> float:
        """Largest Euclidean norm over the support."""
        return float(np.linalg.norm(self.kernel.points, axis=1).max())

    @property
    def j_radius(self) -> float:
        """Largest J-norm over the support."""
        return float(jnorm_many(self.kernel.points, self).max())

    def sample_indices(self, rng: np.random.Generator, size: int) -> IntArray:
        """Draw ``size`` atom indices."""
        kernel = self.kernel
        idx = np.searchsorted(kernel.cdf, rng.random(size), side="right")
        return np.minimum(idx, len(kernel.probs) - 1).astype(np.int64)

    def sample_steps(self, rng: np.random.Generator, size: int) -> IntArray:
        """Draw ``size`` i.i.d. steps as a ``(size, dim)`` integer array."""
        return self.kernel.points[self.sample_indices(rng, size)]

    def reversed(self) -> JumpLaw:
        """The reflected law with mass mu(-x) at x."""
        return JumpLaw(
            dim=self.dim,
            atoms=tuple(
                (tuple(-c for c in point), prob) for point, prob in self.atoms
            ),
            name=f"reversed-{self.name}",
        )


class _Kernel(NamedTuple):
    points: IntArray
    steps: tuple[LatticePoint, ...]
    probs: FloatArray
    cdf: FloatArray
    cov: FloatArray
    cov_inv: FloatArray
    det_cov: float


@functools.lru_cache(maxsize=64)
def _compile(law: JumpLaw) -> _Kernel:
    points = np.array([point for point, _ in law.atoms], dtype=np.int64)
    probs = np.array([prob for _, prob in law.atoms], dtype=np.float64)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    _, second = _exact_moments(law.atoms, law.dim)
    cov = np.array([[float(v) for v in row] for row in second])
    return _Kernel(
        points=points,
        steps=tuple(point for point, _ in law.atoms),
        probs=probs,
        cdf=cdf,
        cov=cov,
        cov_inv=np.linalg.inv(cov),
        det_cov=float(np.linalg.det(cov)),
    )


def simple_random_walk(dim: int) -> JumpLaw:
    """Nearest-neighbour walk: mass 1/(2d) on each of +-e_i."""
    atoms: list[tuple[LatticePoint, float]] = []
    for i in range(dim):
        for sign in (1, -1):
            point = tuple(sign if j == i else 0 for j in range(dim))
            atoms.append((point, 1.0 / (2 * dim)))
    return JumpLaw(dim=dim, atoms=tuple(atoms), name="srw")


def lazy_walk(dim: int) -> JumpLaw:
    """Simple random walk holding in place with probability 1/2."""
    atoms = [(point, prob / 2) for point, prob in simple_random_walk(dim).atoms]
    atoms.append(((0,) * dim, 0.5))
    return JumpLaw(dim=dim, atoms=tuple(atoms), name="lazy")


def heavy_walk(dim: int, m: int) -> JumpLaw:
    """Walk on +-e_i and +-m e_i with equal mass on all 4d atoms."""
    if m < 2:
        raise ConfigError(f"Cannot build a heavy walk with long step {m!r}.")
    atoms: list[tuple[LatticePoint, float]] = []
    for i in range(dim):
        for length in (1, m):
            for sign in (1, -1):
                point = tuple(sign * length if j == i else 0 for j in range(dim))
                atoms.append((point, 1.0 / (4 * dim)))
    return JumpLaw(dim=dim, atoms=tuple(atoms), name=f"heavy:{m}")


def make_jump_law(text: str, dim: int) -> JumpLaw:
    """Build a jump law from ``srw``, ``lazy`` or ``heavy:<m>``."""
    family, _, arg = text.strip().partition(":")
    if family == "srw":
        return simple_random_walk(dim)
    if family == "lazy":
        return lazy_walk(dim)
    if family == "heavy":
        try:
            return heavy_walk(dim, int(arg))
        except ValueError as exc:
            raise ConfigError(f"Cannot parse jump description {text!r}: {exc}") from exc
    raise ConfigError(f"Cannot build unknown jump law {text!r}.")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def shift(point: LatticePoint, step: LatticePoint) -> LatticePoint:
    """Componentwise sum of two lattice points."""
    return tuple(map(operator.add, point, step))


def jnorm(x: Sequence[int], law: JumpLaw) -> float:
    """J(x) = sqrt(x . Gamma^{-1} x / d).

    Raises:
        ConfigError: If ``x`` does not have the law's dimension.
    """
    if len(x) != law.dim:
        raise ConfigError(
            f"Cannot take the J-norm of {tuple(x)!r} in dimension {law.dim}."
        )
    vec = np.asarray(x, dtype=np.float64)
    return math.sqrt(max(float(vec @ law.cov_inv @ vec), 0.0) / law.dim)


def jnorm_many(points: npt.ArrayLike, law: JumpLaw) -> FloatArray:
    """Row-wise J-norm of an ``(n, d)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    quad = np.einsum("ij,jk,ik->i", arr, law.cov_inv, arr)
    return np.sqrt(np.maximum(quad, 0.0) / law.dim)


def c_d(law: JumpLaw) -> float:
    """Green-function constant of the jump law (d >= 3).

    Raises:
        UnsupportedDimensionError: If d <= 2.
    """
    d = law.dim
    if d < 3:
        raise UnsupportedDimensionError(
            f"Cannot compute c_d in dimension {d}: the walk is recurrent."
        )
    return math.gamma(d / 2) / (
        d ** (d / 2 - 1) * (d - 2) * math.pi ** (d / 2) * math.sqrt(law.det_cov)
    )


def point_at_jnorm(law: JumpLaw, target: float) -> LatticePoint:
    """Lattice point on the first axis whose J-norm is closest to ``target``."""
    if target < 0:
        raise ConfigError(f"Cannot place a point at J-norm {target!r}.")
    unit = math.sqrt(law.cov_inv[0, 0] / law.dim)
    return (round(target / unit),) + (0,) * (law.dim - 1)


def diameter(points: Iterable[LatticePoint]) -> float:
    """Largest Euclidean distance between two points of a finite set."""
    arr = np.asarray(list(points), dtype=np.float64)
    if len(arr) < 2:
        return 0.0
    diffs = arr[:, None, :] - arr[None, :, :]
    return float(np.sqrt((diffs**2).sum(axis=-1)).max())


def _member_mask(positions: IntArray, target: IntArray) -> npt.NDArray[np.bool_]:
    return (positions[:, None, :] == target[None, :, :]).all(axis=-1).any(axis=-1)


def _target_array(target: Iterable[LatticePoint], dim: int) -> IntArray:
    points = sorted(set(target))
    if not points:
        raise ConfigError("Cannot use an empty target set.")
    if any(len(p) != dim for p in points):
        raise ConfigError(f"Cannot use target points outside dimension {dim}.")
    return np.array(points, dtype=np.int64)


def _require_transient(law: JumpLaw, what: str) -> None:
    if law.dim < 3:
        raise UnsupportedDimensionError(
            f"Cannot compute {what} in dimension {law.dim}: the walk is recurrent."
        )


# ---------------------------------------------------------------------------
# Walks
# ---------------------------------------------------------------------------


class StepBuffer:
    """Hands out i.i.d. steps one at a time from pre-drawn chunks."""

    def __init__(self, law: JumpLaw, rng: np.random.Generator) -> None:
        self._law = law
        self._rng = rng
        self._steps = law.kernel.steps
        self._chunk: list[int] = []
        self._pos = 0

    def next(self) -> LatticePoint:
        if self._pos >= len(self._chunk):
            self._chunk = self._law.sample_indices(self._rng, _BUFFER_SIZE).tolist()
            self._pos = 0
        step = self._steps[self._chunk[self._pos]]
        self._pos += 1
        return step


class WalkResult(BaseModel):
    """Final state of :func:`walk_until`."""

    position: LatticePoint
    steps: int = Field(ge=0)
    stopped: bool


def walk_until(
    x0: LatticePoint,
    law: JumpLaw,
    stop: Callable[[int, LatticePoint], bool],
    rng: np.random.Generator,
    max_steps: int,
) -> WalkResult:
    """Run the walk from ``x0`` until ``stop(n, S_n)`` fires or the cap is hit.

    The predicate is evaluated at n = 0 first. Cap expiry is reported through
    ``stopped=False``.
    """
    if max_steps < 1:
        raise ConfigError(f"Cannot walk with max_steps={max_steps!r}.")
    if len(x0) != law.dim:
        raise ConfigError(f"Cannot start a walk at {x0!r} in dimension {law.dim}.")
    position = tuple(x0)
    if stop(0, position):
        return WalkResult(position=position, steps=0, stopped=True)
    buffer = StepBuffer(law, rng)
    for n in range(1, max_steps + 1):
        position = shift(position, buffer.next())
        if stop(n, position):
            return WalkResult(position=position, steps=n, stopped=True)
    return WalkResult(position=position, steps=max_steps, stopped=False)


# ---------------------------------------------------------------------------
# Green function
# ---------------------------------------------------------------------------


class GreenValue(BaseModel):
    """A Green-function value with its truncation report."""

    value: float = Field(ge=0.0)
    bias_bound: float = Field(ge=0.0)
    residual: float = Field(default=0.0, ge=0.0)
    half_width: int = Field(default=0, ge=0)


class GreenTable:
    """Green function g(0, .) of a walk killed on leaving the box [-L, L]^d.

    The table is immutable after construction and safe to share between
    threads. Values underestimate the whole-lattice Green function.
    """

    def __init__(
        self, law: JumpLaw, half_width: int, values: FloatArray, residual: float
    ) -> None:
        self._law = law
        self._half_width = half_width
        self._values = values
        self._values.setflags(write=False)
        self._residual = residual

    @property
    def law(self) -> JumpLaw:
        return self._law

    @property
    def half_width(self) -> int:
        return self._half_width

    @property
    def residual(self) -> float:
        return self._residual

    @property
    def boundary_policy(self) -> str:
        return "absorbing"

    @property
    def values(self) -> FloatArray:
        return self._values

    def value(self, y: Sequence[int]) -> float:
        """g_box(0, y); zero outside the box."""
        if len(y) != self._law.dim:
            raise ConfigError(f"Cannot look up {tuple(y)!r} in dimension {self._law.dim}.")
        if max(abs(c) for c in y) > self._half_width:
            return 0.0
        return float(self._values[tuple(c + self._half_width for c in y)])

    def bias_bound(self, y: Sequence[int]) -> float:
        """Bound on g(0, y) - g_box(0, y) from the mass beyond the boundary."""
        gap = self._half_width + 1 - max(abs(c) for c in y)
        if gap <= 0:
            return math.inf
        scale = math.sqrt(1.0 / (float(np.linalg.eigvalsh(self._law.cov).max()) * self._law.dim))
        dist = gap * scale
        return _MAJORANT_FACTOR * c_d(self._law) / dist ** (self._law.dim - 2)


def _box_operator(law: JumpLaw, half_width: int) -> sparse.csr_matrix:
    """Sparse matrix of I - P on the box, killed outside."""
    d = law.dim
    side = 2 * half_width + 1
    n = side**d
    coords = np.indices((side,) * d).reshape(d, n).T - half_width
    rows: list[IntArray] = [np.arange(n, dtype=np.int64)]
    cols: list[IntArray] = [np.arange(n, dtype=np.int64)]
    data: list[FloatArray] = [np.ones(n)]
    for step, prob in zip(law.kernel.points, law.kernel.probs, strict=True):
        source = coords - step
        inside = (np.abs(source) <= half_width).all(axis=1)
        target_idx = np.flatnonzero(inside)
        source_idx = np.ravel_multi_index(
            tuple((source[inside] + half_width).T), (side,) * d
        )
        rows.append(target_idx)
        cols.append(np.asarray(source_idx, dtype=np.int64))
        data.append(np.full(len(target_idx), -prob))
    matrix = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return matrix.tocsr()


@functools.lru_cache(maxsize=16)
def green_table(law: JumpLaw, half_width: int) -> GreenTable:
    """Solve g = delta_0 + P g on the box [-L, L]^d with absorbing boundary.

    Raises:
        UnsupportedDimensionError: If d <= 2.
        SolverError: If the residual stays above 1e-10.
    """
    _require_transient(law, "the Green function")
    if half_width < 1:
        raise ConfigError(f"Cannot solve on a box of half-width {half_width!r}.")
    side = 2 * half_width + 1
    matrix = _box_operator(law, half_width)
    rhs = np.zeros(matrix.shape[0])
    rhs[np.ravel_multi_index((half_width,) * law.dim, (side,) * law.dim)] = 1.0
    solver = splinalg.cg if law.symmetric else splinalg.bicgstab
    solution, info = solver(matrix, rhs, rtol=1e-13, atol=0.0, maxiter=20 * side**2 + 1000)
    residual = float(np.abs(matrix @ solution - rhs).max())
    if info != 0 or residual > _SOLVER_TOLERANCE:
        raise SolverError(
            f"Cannot solve the Green system on half-width {half_width}: "
            f"info={info}, residual={residual:.3e}."
        )
    logger.info(
        "Green table %s L=%d: g(0,0)=%.6f residual=%.2e",
        law.name, half_width, solution.max(), residual,
    )
    return GreenTable(law, half_width, solution.reshape((side,) * law.dim), residual)


def green_exact(y: Sequence[int], law: JumpLaw, box_halfwidth: int) -> GreenValue:
    """Box-killed g(0, y), a lower-biased estimate with its bias bound.

    Raises:
        ConfigError: If ``y`` is not strictly inside the box.
    """
    _require_transient(law, "the Green function")
    if len(y) != law.dim:
        raise ConfigError(f"Cannot evaluate g at {tuple(y)!r} in dimension {law.dim}.")
    if max(abs(c) for c in y) >= box_halfwidth:
        raise ConfigError(
            f"Cannot evaluate g at {tuple(y)!r} in a box of half-width {box_halfwidth}."
        )
    table = green_table(law, box_halfwidth)
    return GreenValue(
        value=table.value(y),
        bias_bound=table.bias_bound(y),
        residual=table.residual,
        half_width=box_halfwidth,
    )


def green_extrapolated(
    y: Sequence[int], law: JumpLaw, half_widths: tuple[int, int]
) -> GreenValue:
    """Richardson extrapolation of two box solutions in L^{-(d-2)}.

    The bias bound reports the distance between the extrapolated value and the
    larger box.
    """
    small, large = sorted(half_widths)
    if small == large:
        raise ConfigError("Cannot extrapolate from two identical box sizes.")
    g_small = green_exact(y, law, small)
    g_large = green_exact(y, law, large)
    p = law.dim - 2
    w_small, w_large = float(small) ** p, float(large) ** p
    value = (w_large * g_large.value - w_small * g_small.value) / (w_large - w_small)
    return GreenValue(
        value=max(value, g_large.value),
        bias_bound=abs(value - g_large.value),
        residual=max(g_small.residual, g_large.residual),
        half_width=large,
    )


def _shifted_add(
    out: FloatArray, src: FloatArray, step: IntArray, weight: float
) -> None:
    dst_slices = []
    src_slices = []
    for s in step:
        s = int(s)
        if s >= 0:
            dst_slices.append(slice(s, None))
            src_slices.append(slice(0, out.shape[0] - s))
        else:
            dst_slices.append(slice(0, s))
            src_slices.append(slice(-s, None))
    out[tuple(dst_slices)] += weight * src[tuple(src_slices)]


def green_series(y: Sequence[int], law: JumpLaw, n_max: int) -> Estimate:
    """Sum P_0(S_n = y) over n <= n_max plus an n^{-d/2} tail.

    The tail uses the average of the last two terms as the local density and
    a Hurwitz zeta sum, which also absorbs period-two laws. The tail value is
    reported as ``bias_bound``.
    """
    _require_transient(law, "the Green series")
    if n_max < 2:
        raise ConfigError(f"Cannot sum the Green series to n_max={n_max!r}.")
    reach = int(np.abs(law.kernel.points).max())
    half = reach * n_max
    if max(abs(c) for c in y) > half:
        return Estimate(value=0.0, bias_bound=0.0, n=n_max)
    side = 2 * half + 1
    dist = np.zeros((side,) * law.dim)
    dist[(half,) * law.dim] = 1.0
    index = tuple(c + half for c in y)
    terms = [float(dist[index])]
    for _ in range(n_max):
        nxt = np.zeros_like(dist)
        for step, prob in zip(law.kernel.points, law.kernel.probs, strict=True):
            _shifted_add(nxt, dist, step, float(prob))
        dist = nxt
        terms.append(float(dist[index]))
    s = law.dim / 2
    density = (terms[-1] + terms[-2]) / 2
    tail = density * n_max**s * float(zeta(s, n_max + 1))
    return Estimate(value=math.fsum(terms) + tail, bias_bound=tail, n=n_max)


def green_mc(
    x: LatticePoint,
    y: LatticePoint,
    law: JumpLaw,
    escape_radius: float,
    n_walks: int,
    rng: np.random.Generator,
    max_steps: int = 1_000_000,
) -> Estimate:
    """Mean number of visits to ``y`` before leaving the J-ball of radius R around y.

    The bias bound is the Green mass beyond the ball, c_d / R^{d-2} up to the
    majorant factor.
    """
    _require_transient(law, "the Green function")
    if n_walks < 2:
        raise ConfigError(f"Cannot estimate with n_walks={n_walks!r}.")
    center = np.asarray(y, dtype=np.int64)
    pos = np.tile(np.asarray(x, dtype=np.int64), (n_walks, 1))
    visits = np.zeros(n_walks)
    alive = np.arange(n_walks)
    visits += (pos == center).all(axis=1)
    alive = alive[jnorm_many(pos[alive] - center, law) <= escape_radius]
    for _ in range(max_steps):
        if alive.size == 0:
            break
        pos[alive] += law.sample_steps(rng, alive.size)
        visits[alive] += (pos[alive] == center).all(axis=1)
        alive = alive[jnorm_many(pos[alive] - center, law) <= escape_radius]
    else:
        logger.warning("green_mc: %d walks still inside after %d steps", alive.size, max_steps)
    bias = _MAJORANT_FACTOR * c_d(law) / max(escape_radius, 1.0) ** (law.dim - 2)
    return Estimate(
        value=float(visits.mean()),
        se=float(visits.std(ddof=1) / math.sqrt(n_walks)),
        bias_bound=bias,
        n=n_walks,
    )


# ---------------------------------------------------------------------------
# Capacity and hitting probabilities
# ---------------------------------------------------------------------------


class CapacityMethod(str, Enum):
    """How :func:`capacity` computes escape probabilities."""

    mc = "mc"
    oracle = "oracle"


class CapacityParams(BaseModel):
    """Tuning for :func:`capacity`.

    Attributes:
        n_walks: Walks per point of K (mc).
        escape_radius: J-radius at which a walk is declared escaped (mc);
            defaults to 32 + 8 * diam(K).
        half_widths: Box sizes for the Green oracle; defaults per dimension.
        max_steps: Step cap per walk batch (mc).
    """

    n_walks: int = Field(default=10_000, ge=2)
    escape_radius: float | None = Field(default=None, gt=0)
    half_widths: tuple[int, int] | None = None
    max_steps: int = Field(default=1_000_000, ge=1)


class CapacityEstimate(BaseModel):
    """Capacity with its error report.

    ``correction`` is the return mass subtracted from the raw ``mc`` escape
    fractions for walks that leave the escape ball and come back.
    """

    value: float = Field(ge=0.0)
    se: float = Field(default=0.0, ge=0.0)
    residual: float = Field(default=0.0, ge=0.0)
    bias_bound: float = Field(default=0.0, ge=0.0)
    correction: float = Field(default=0.0, ge=0.0)
    method: CapacityMethod
    escape: dict[LatticePoint, float] = Field(default_factory=dict)


_DEFAULT_HALF_WIDTHS = {3: (12, 24), 4: (8, 16)}


def default_half_widths(dim: int) -> tuple[int, int]:
    """Box half-widths used for Green oracles in dimension ``dim``."""
    return _DEFAULT_HALF_WIDTHS.get(dim, (4, 8))


def _escape_probabilities(
    target: IntArray,
    law: JumpLaw,
    escape_radius: float,
    n_walks: int,
    rng: np.random.Generator,
    max_steps: int,
) -> list[IntArray]:
    """Exit positions, per point of K, of the walks leaving the ball before returning."""
    exits: list[IntArray] = []
    for start in target:
        pos = start + law.sample_steps(rng, n_walks)
        escaped = np.zeros(n_walks, dtype=bool)
        alive = np.arange(n_walks)
        for _ in range(max_steps):
            back = _member_mask(pos[alive], target)
            out = jnorm_many(pos[alive], law) > escape_radius
            escaped[alive[out & ~back]] = True
            alive = alive[~(back | out)]
            if alive.size == 0:
                break
            pos[alive] += law.sample_steps(rng, alive.size)
        else:
            logger.warning("capacity: %d walks undecided after %d steps", alive.size, max_steps)
        exits.append(pos[escaped])
    return exits


def _return_probabilities(
    exits: IntArray, target: IntArray, escape: FloatArray, law: JumpLaw
) -> FloatArray:
    """Leading-order P_z(T_K < infinity) at exit points z.

    Last-exit decomposition with g(z, y) replaced by c_d J(z - y)^(2-d).
    """
    total = np.zeros(len(exits))
    for y, e_y in zip(target, escape, strict=True):
        total += e_y * jnorm_many(exits - y, law) ** (2 - law.dim)
    return np.minimum(c_d(law) * total, 1.0)


def capacity(
    target: Iterable[LatticePoint],
    law: JumpLaw,
    method: CapacityMethod | str = CapacityMethod.oracle,
    params: CapacityParams | None = None,
    rng: np.random.Generator | None = None,
) -> CapacityEstimate:
    """Cap(K) = sum over y in K of P_y(T_K^+ = infinity).

    ``mc`` runs walks from each point of K, declaring escape at the J-radius
    R, and discounts each escaped walk by its leading-order chance of coming
    back from the exit point; ``oracle`` solves the last-exit system
    sum_y g(x, y) e(y) = 1 on K.

    Raises:
        UnsupportedDimensionError: If d <= 2.
        ConfigError: If K is empty or ``mc`` is requested without a generator.
    """
    _require_transient(law, "capacity")
    params = params or CapacityParams()
    method = CapacityMethod(method)
    points = _target_array(target, law.dim)
    keys = [tuple(int(c) for c in p) for p in points]
    card = len(points)

    if method is CapacityMethod.oracle:
        half_widths = params.half_widths or default_half_widths(law.dim)
        spread = int(np.abs(points[:, None, :] - points[None, :, :]).max())
        if spread >= min(half_widths):
            raise ConfigError(
                f"Cannot solve capacity: K spans {spread}, box half-widths {half_widths}."
            )
        gram = np.empty((card, card))
        residual = 0.0
        bias = 0.0
        for i in range(card):
            for j in range(card):
                diff = tuple(int(c) for c in points[j] - points[i])
                value = green_extrapolated(diff, law, half_widths)
                gram[i, j] = value.value
                residual = max(residual, value.residual)
                bias = max(bias, value.bias_bound)
        escape = np.linalg.solve(gram, np.ones(card))
        residual = max(residual, float(np.abs(gram @ escape - 1.0).max()))
        cap = float(escape.sum())
        return CapacityEstimate(
            value=cap,
            residual=residual,
            bias_bound=cap * card * bias,
            method=method,
            escape=dict(zip(keys, escape.tolist(), strict=True)),
        )

    if rng is None:
        raise ConfigError("Cannot run Monte Carlo capacity without a generator.")
    radius = params.escape_radius or 32.0 + 8.0 * diameter(keys)
    j_k = float(jnorm_many(points, law).max())
    if radius <= j_k + law.j_radius:
        raise ConfigError(f"Cannot use escape radius {radius!r} around a set of J-size {j_k}.")
    n = params.n_walks
    exits = _escape_probabilities(points, law, radius, n, rng, params.max_steps)
    raw = np.array([len(z) / n for z in exits])
    probs = np.zeros(card)
    variance = 0.0
    worst = 0.0
    for i, z in enumerate(exits):
        back = _return_probabilities(z, points, raw, law)
        weights = np.zeros(n)
        weights[: len(z)] = 1.0 - back
        probs[i] = weights.mean()
        variance += float(weights.var(ddof=1)) / n
        worst = max(worst, float(back.max(initial=0.0)))
    correction = max(float(raw.sum() - probs.sum()), 0.0)
    return CapacityEstimate(
        value=float(probs.sum()),
        se=math.sqrt(variance),
        bias_bound=correction * worst,
        correction=correction,
        method=method,
        escape=dict(zip(keys, probs.tolist(), strict=True)),
    )


class HittingEstimate(BaseModel):
    """Monte Carlo hitting probability next to its asymptotic prediction."""

    value: float = Field(ge=0.0, le=1.0)
    se: float = Field(ge=0.0)
    bias_bound: float = Field(ge=0.0)
    prediction: float | None = None
    ratio: float | None = None
    escape_radius: float
    n: int


def hitting_prob_rw(
    x: LatticePoint,
    target: Iterable[LatticePoint],
    law: JumpLaw,
    n_walks: int,
    rng: np.random.Generator,
    *,
    cap: float | None = None,
    escape_radius: float | None = None,
    max_steps: int = 1_000_000,
) -> HittingEstimate:
    """P_x(T_K < infinity) by walks killed at a J-radius.

    All walks consume one step per iteration whether or not they are still
    running, so runs on the same generator with nested targets are coupled
    pathwise. ``cap`` enables the prediction c_d Cap(K) / J(x)^{d-2}.
    """
    _require_transient(law, "hitting probabilities")
    points = _target_array(target, law.dim)
    start = np.asarray(x, dtype=np.int64)
    jx = jnorm(x, law)
    j_k = float(jnorm_many(points, law).max())
    radius = escape_radius or max(4.0 * jx, 16.0) + 8.0 * diameter(map(tuple, points.tolist()))
    prediction = None if cap is None or jx == 0 else c_d(law) * cap / jx ** (law.dim - 2)

    if _member_mask(start[None, :], points)[0]:
        return HittingEstimate(
            value=1.0, se=0.0, bias_bound=0.0, prediction=prediction,
            ratio=None if not prediction else 1.0 / prediction,
            escape_radius=radius, n=n_walks,
        )
    pos = np.tile(start, (n_walks, 1))
    hit = np.zeros(n_walks, dtype=bool)
    alive = np.arange(n_walks)
    for _ in range(max_steps):
        steps = law.sample_steps(rng, n_walks)
        pos[alive] += steps[alive]
        inside = _member_mask(pos[alive], points)
        hit[alive[inside]] = True
        out = jnorm_many(pos[alive], law) > radius
        alive = alive[~(inside | out)]
        if alive.size == 0:
            break
    value = float(hit.mean())
    bias = c_d(law) * len(points) / max(radius - j_k, 1.0) ** (law.dim - 2)
    return HittingEstimate(
        value=value,
        se=math.sqrt(value * (1 - value) / max(n_walks - 1, 1)),
        bias_bound=bias,
        prediction=prediction,
        ratio=None if not prediction else value / prediction,
        escape_radius=radius,
        n=n_walks,
    )


class OvershootBound(BaseModel):
    """E_x[tau_r] . P(J(X_1) > R - r) with its two factors."""

    value: float = Field(ge=0.0)
    tail_prob: float = Field(ge=0.0, le=1.0)
    tau_bound: float = Field(ge=0.0)
    tau_estimate: Estimate | None = None


def overshoot_bound(
    x: LatticePoint,
    r: float,
    big_r: float,
    law: JumpLaw,
    *,
    n_walks: int = 0,
    rng: np.random.Generator | None = None,
) -> OvershootBound:
    """Bound the chance that the exit from the J-ball B_r lands beyond J-radius R.

    E_x[tau_r] is bounded by (r + rho_J)^2 - J(x)^2 through the martingale
    S.Gamma^{-1}S - d n, where rho_J is the largest J-length of a step. With
    ``n_walks`` and ``rng`` the exit time is also estimated by simulation and
    that estimate multiplies the tail probability instead.

    Raises:
        ConfigError: Unless R > r > J(x).
    """
    jx = jnorm(x, law)
    if not big_r > r > jx:
        raise ConfigError(
            f"Cannot bound overshoot with R={big_r!r}, r={r!r}, J(x)={jx:.6g}."
        )
    lengths = jnorm_many(law.kernel.points, law)
    tail = float(law.kernel.probs[lengths > big_r - r].sum())
    tau_bound = (r + float(lengths.max())) ** 2 - jx**2
    if tail == 0.0:
        return OvershootBound(value=0.0, tail_prob=0.0, tau_bound=tau_bound)
    if n_walks < 2 or rng is None:
        return OvershootBound(value=tau_bound * tail, tail_prob=tail, tau_bound=tau_bound)

    pos = np.tile(np.asarray(x, dtype=np.int64), (n_walks, 1))
    exit_times = np.zeros(n_walks)
    alive = np.arange(n_walks)
    step = 0
    while alive.size:
        step += 1
        pos[alive] += law.sample_steps(rng, alive.size)
        out = jnorm_many(pos[alive], law) > r
        exit_times[alive[out]] = step
        alive = alive[~out]
    tau = Estimate(
        value=float(exit_times.mean()),
        se=float(exit_times.std(ddof=1) / math.sqrt(n_walks)),
        n=n_walks,
    )
    return OvershootBound(
        value=tau.value * tail, tail_prob=tail, tau_bound=tau_bound, tau_estimate=tau
    )
