"""Tests for cbrw_lab.lattice_walk: jump laws, J-norm, Green function and capacity."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from cbrw_lab.errors import ConfigError, UnsupportedDimensionError
from cbrw_lab.lattice_walk import (
    CapacityMethod,
    CapacityParams,
    JumpLaw,
    StepBuffer,
    c_d,
    capacity,
    diameter,
    green_exact,
    green_extrapolated,
    green_mc,
    green_series,
    heavy_walk,
    hitting_prob_rw,
    jnorm,
    jnorm_many,
    lazy_walk,
    make_jump_law,
    overshoot_bound,
    point_at_jnorm,
    shift,
    simple_random_walk,
    walk_until,
)

# Polya's return constant for the simple random walk on Z^3: g(0, 0).
G0_SRW3 = 1.516386059151978


# ---------------------------------------------------------------------------
# JumpLaw certification
# ---------------------------------------------------------------------------


class TestJumpLaw:
    def test_srw_covariance_is_identity_over_d(self, srw3: JumpLaw) -> None:
        np.testing.assert_allclose(srw3.cov, np.eye(3) / 3)
        assert srw3.symmetric

    def test_lazy_walk_halves_the_covariance(self) -> None:
        np.testing.assert_allclose(lazy_walk(2).cov, np.eye(2) / 4)

    def test_heavy_walk_covariance(self) -> None:
        law = heavy_walk(2, 3)
        np.testing.assert_allclose(law.cov, np.eye(2) * (1 + 9) / 4)

    def test_heavy_walk_rejects_short_long_step(self) -> None:
        with pytest.raises(ConfigError):
            heavy_walk(3, 1)

    def test_rejects_nonzero_mean(self) -> None:
        with pytest.raises(ValidationError, match="mean"):
            JumpLaw(dim=1, atoms=(((1,), 0.5), ((0,), 0.5)))

    def test_rejects_singular_covariance(self) -> None:
        with pytest.raises(ValidationError, match="singular"):
            JumpLaw(dim=2, atoms=(((1, 0), 0.5), ((-1, 0), 0.5)))

    def test_rejects_strict_subgroup(self) -> None:
        with pytest.raises(ValidationError, match="subgroup"):
            JumpLaw(dim=1, atoms=(((2,), 0.5), ((-2,), 0.5)))

    def test_rejects_masses_not_summing_to_one(self) -> None:
        with pytest.raises(ValidationError):
            JumpLaw(dim=1, atoms=(((1,), 0.5), ((-1,), 0.4)))

    def test_rejects_wrong_atom_dimension(self) -> None:
        with pytest.raises(ValidationError):
            JumpLaw(dim=2, atoms=(((1,), 0.5), ((-1,), 0.5)))

    def test_diagonal_support_generates_the_lattice(self) -> None:
        atoms = (((1, 1), 0.25), ((-1, -1), 0.25), ((1, 0), 0.25), ((-1, 0), 0.25))
        law = JumpLaw(dim=2, atoms=atoms)
        assert law.dim == 2

    def test_reversed_reflects_every_atom(self) -> None:
        law = JumpLaw(dim=1, atoms=(((2,), 1 / 3), ((-1,), 2 / 3)))
        back = law.reversed()
        assert dict(back.atoms) == {(-2,): 1 / 3, (1,): 2 / 3}
        assert not law.symmetric
        assert back.name == "reversed-custom"

    def test_sample_steps_shape_and_support(self, srw4: JumpLaw, rng: np.random.Generator) -> None:
        steps = srw4.sample_steps(rng, 500)
        assert steps.shape == (500, 4)
        assert set(np.abs(steps).sum(axis=1).tolist()) == {1}

    def test_step_buffer_draws_from_support(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        buffer = StepBuffer(srw3, rng)
        support = {point for point, _ in srw3.atoms}
        assert all(buffer.next() in support for _ in range(3000))


class TestMakeJumpLaw:
    @pytest.mark.parametrize("text", ["srw", "lazy", "heavy:4"])
    def test_known_descriptions(self, text: str) -> None:
        assert make_jump_law(text, 3).dim == 3

    @pytest.mark.parametrize("text", ["levy", "heavy:x", "heavy:1"])
    def test_bad_descriptions(self, text: str) -> None:
        with pytest.raises(ConfigError):
            make_jump_law(text, 3)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


class TestGeometry:
    def test_srw_jnorm_is_euclidean(self, srw4: JumpLaw) -> None:
        assert jnorm((3, 4, 0, 0), srw4) == pytest.approx(5.0)

    def test_lazy_jnorm_scales_by_sqrt_two(self) -> None:
        assert jnorm((3, 0), lazy_walk(2)) == pytest.approx(3 * math.sqrt(2))

    def test_jnorm_rejects_wrong_dimension(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            jnorm((1, 2), srw3)

    def test_jnorm_many_matches_jnorm(self, srw3: JumpLaw) -> None:
        points = [(1, 2, 3), (0, 0, 0), (-4, 1, 0)]
        np.testing.assert_allclose(jnorm_many(points, srw3), [jnorm(p, srw3) for p in points])

    @given(
        x=st.lists(st.integers(-50, 50), min_size=3, max_size=3),
        k=st.integers(-20, 20),
    )
    @settings(max_examples=60, deadline=None)
    def test_jnorm_is_homogeneous(self, x: list[int], k: int) -> None:
        for law in (simple_random_walk(3), lazy_walk(3), heavy_walk(3, 5)):
            scaled = tuple(k * c for c in x)
            assert jnorm(scaled, law) == pytest.approx(
                abs(k) * jnorm(tuple(x), law), rel=1e-9, abs=1e-9
            )

    @pytest.mark.parametrize(
        ("dim", "expected"),
        [(3, 3 / (2 * math.pi)), (4, 2 / math.pi**2), (5, 5 / (4 * math.pi**2))],
    )
    def test_c_d_for_simple_random_walk(self, dim: int, expected: float) -> None:
        assert c_d(simple_random_walk(dim)) == pytest.approx(expected, rel=1e-12)

    def test_c_d_rejects_recurrent_dimensions(self, srw2: JumpLaw) -> None:
        with pytest.raises(UnsupportedDimensionError):
            c_d(srw2)

    def test_point_at_jnorm(self, srw5: JumpLaw) -> None:
        assert point_at_jnorm(srw5, 12) == (12, 0, 0, 0, 0)
        assert point_at_jnorm(lazy_walk(2), 12) == (8, 0)

    def test_point_at_jnorm_rejects_negative(self, srw5: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            point_at_jnorm(srw5, -1)

    def test_diameter_and_shift(self) -> None:
        assert diameter([(0, 0), (3, 4), (1, 1)]) == pytest.approx(5.0)
        assert diameter([(2, 2)]) == 0.0
        assert shift((1, 2, 3), (-1, 0, 1)) == (0, 2, 4)


# ---------------------------------------------------------------------------
# Walks
# ---------------------------------------------------------------------------


class TestWalkUntil:
    def test_predicate_checked_at_time_zero(self, srw1: JumpLaw, rng: np.random.Generator) -> None:
        result = walk_until((0,), srw1, lambda n, pos: pos == (0,), rng, 10)
        assert result.stopped and result.steps == 0

    def test_one_dimensional_walk_returns(self, srw1: JumpLaw, rng: np.random.Generator) -> None:
        stopped = sum(
            walk_until((1,), srw1, lambda n, pos: pos == (0,), rng, 10_000).stopped
            for _ in range(100)
        )
        assert stopped >= 95

    def test_cap_expiry_reported(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        result = walk_until((0, 0, 0), srw3, lambda n, pos: False, rng, 25)
        assert not result.stopped and result.steps == 25

    def test_rejects_bad_cap(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        with pytest.raises(ConfigError):
            walk_until((0, 0, 0), srw3, lambda n, pos: False, rng, 0)


# ---------------------------------------------------------------------------
# Green function
# ---------------------------------------------------------------------------


class TestGreen:
    def test_box_value_is_a_lower_bound_within_its_bias(self, srw3: JumpLaw) -> None:
        value = green_exact((0, 0, 0), srw3, 12)
        assert value.value < G0_SRW3 <= value.value + value.bias_bound
        assert value.residual < 1e-10

    def test_box_value_is_symmetric(self, srw3: JumpLaw) -> None:
        a = green_exact((2, 1, 0), srw3, 8).value
        b = green_exact((0, -1, -2), srw3, 8).value
        assert a == pytest.approx(b, rel=1e-8)

    def test_point_outside_box_rejected(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            green_exact((8, 0, 0), srw3, 8)

    def test_recurrent_dimension_rejected(self, srw2: JumpLaw) -> None:
        with pytest.raises(UnsupportedDimensionError):
            green_exact((0, 0), srw2, 8)

    def test_extrapolation_recovers_polya_constant(self, srw3: JumpLaw) -> None:
        value = green_extrapolated((0, 0, 0), srw3, (12, 24))
        assert value.value == pytest.approx(G0_SRW3, abs=1e-2)
        assert value.value >= green_exact((0, 0, 0), srw3, 24).value

    def test_extrapolation_needs_two_sizes(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            green_extrapolated((0, 0, 0), srw3, (8, 8))

    def test_series_agrees_with_box_solver(self, srw3: JumpLaw) -> None:
        series = green_series((0, 0, 0), srw3, 60)
        assert series.value == pytest.approx(G0_SRW3, abs=1e-2)
        assert series.bias_bound > 0

    def test_mc_agrees_with_solver(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        mc = green_mc((0, 0, 0), (0, 0, 0), srw3, 8.0, 2000, rng)
        assert abs(mc.value - G0_SRW3) <= 4 * mc.se + mc.bias_bound


# ---------------------------------------------------------------------------
# Capacity and hitting
# ---------------------------------------------------------------------------


class TestCapacity:
    def test_singleton_oracle_inverts_green(self, srw3: JumpLaw) -> None:
        params = CapacityParams(half_widths=(6, 12))
        cap = capacity([(0, 0, 0)], srw3, "oracle", params)
        g0 = green_extrapolated((0, 0, 0), srw3, (6, 12)).value
        assert cap.value * g0 == pytest.approx(1.0, rel=1e-10)
        assert cap.method is CapacityMethod.oracle
        assert set(cap.escape) == {(0, 0, 0)}

    def test_mc_matches_oracle(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        oracle = capacity([(0, 0, 0)], srw3, "oracle", CapacityParams(half_widths=(12, 24)))
        mc = capacity([(0, 0, 0)], srw3, "mc", CapacityParams(n_walks=2000), rng=rng)
        slack = 4 * math.hypot(mc.se, oracle.se) + oracle.bias_bound
        assert abs(mc.value - oracle.value) <= slack

    def test_mc_discounts_walks_that_return(
        self, srw3: JumpLaw, rng: np.random.Generator
    ) -> None:
        oracle = capacity([(0, 0, 0)], srw3, "oracle", CapacityParams(half_widths=(12, 24)))
        params = CapacityParams(n_walks=4000, escape_radius=6.0)
        mc = capacity([(0, 0, 0)], srw3, "mc", params, rng=rng)
        assert mc.correction > 0.0
        assert mc.bias_bound <= mc.correction
        slack = 4 * math.hypot(mc.se, oracle.se) + oracle.bias_bound + mc.bias_bound
        assert abs(mc.value - oracle.value) <= slack
        # the raw escape fraction overshoots at this radius
        assert abs(mc.value + mc.correction - oracle.value) > abs(mc.value - oracle.value)

    def test_subadditive_and_monotone(self, srw3: JumpLaw) -> None:
        params = CapacityParams(half_widths=(6, 12))
        a = capacity([(0, 0, 0)], srw3, "oracle", params).value
        b = capacity([(1, 0, 0)], srw3, "oracle", params).value
        ab = capacity([(0, 0, 0), (1, 0, 0)], srw3, "oracle", params).value
        assert max(a, b) <= ab <= a + b

    def test_mc_needs_generator(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            capacity([(0, 0, 0)], srw3, "mc")

    def test_empty_target_rejected(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            capacity([], srw3, "oracle")

    def test_recurrent_dimension_rejected(self, srw2: JumpLaw) -> None:
        with pytest.raises(UnsupportedDimensionError):
            capacity([(0, 0)], srw2, "oracle")

    def test_spread_beyond_box_rejected(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            capacity([(0, 0, 0), (7, 0, 0)], srw3, "oracle", CapacityParams(half_widths=(6, 12)))


class TestHitting:
    def test_start_in_target(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        result = hitting_prob_rw((0, 0, 0), [(0, 0, 0)], srw3, 10, rng)
        assert result.value == 1.0

    def test_nested_targets_are_coupled(self, srw3: JumpLaw) -> None:
        x = (4, 0, 0)
        small = hitting_prob_rw(x, [(0, 0, 0)], srw3, 500, np.random.default_rng(5))
        large = hitting_prob_rw(x, [(0, 0, 0), (1, 0, 0)], srw3, 500, np.random.default_rng(5))
        assert small.value <= large.value

    def test_prediction_uses_capacity(self, srw3: JumpLaw, rng: np.random.Generator) -> None:
        result = hitting_prob_rw((6, 0, 0), [(0, 0, 0)], srw3, 200, rng, cap=0.66)
        assert result.prediction == pytest.approx(c_d(srw3) * 0.66 / 6)


class TestOvershoot:
    def test_nearest_neighbour_walk_never_overshoots(self, srw3: JumpLaw) -> None:
        bound = overshoot_bound((0, 0, 0), 10.0, 12.0, srw3)
        assert bound.value == 0.0 and bound.tail_prob == 0.0

    def test_heavy_walk_bound(self) -> None:
        law = heavy_walk(3, 8)
        bound = overshoot_bound((0, 0, 0), 3.0, 4.0, law)
        assert bound.tail_prob == pytest.approx(0.5)
        assert bound.value == pytest.approx(bound.tau_bound * 0.5)

    def test_simulated_exit_time(self, rng: np.random.Generator) -> None:
        law = heavy_walk(3, 8)
        bound = overshoot_bound((0, 0, 0), 3.0, 4.0, law, n_walks=200, rng=rng)
        assert bound.tau_estimate is not None
        assert bound.tau_estimate.value <= bound.tau_bound

    def test_requires_nested_radii(self, srw3: JumpLaw) -> None:
        with pytest.raises(ConfigError):
            overshoot_bound((0, 0, 0), 5.0, 4.0, srw3)
