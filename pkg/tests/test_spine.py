"""Tests for cbrw_lab.spine: spine samplers and the nu / BCap estimators."""

from __future__ import annotations

import math

import numpy as np
import pytest

from cbrw_lab.errors import ConfigError, StarvationError, UnsupportedDimensionError
from cbrw_lab.lattice_walk import JumpLaw
from cbrw_lab.offspring import OffspringLaw
from cbrw_lab.spine import (
    SpineBatch,
    SpineParams,
    SpineSample,
    bcap_from_samples,
    collect_spine_samples,
    default_escape_radius,
    estimate_bcap,
    estimate_nu,
    estimate_sigma_inf,
    nu_from_samples,
    nu_occupation_from_samples,
    poisoning_bound,
    sample_spine_forward,
    spine_occupation_mean,
)
from cbrw_lab.streams import StreamFactory

O5 = (0, 0, 0, 0, 0)
E5 = (3, 0, 0, 0, 0)


def _sample(
    y: tuple[int, ...], escaped: bool, sigma: int, *, poisoned: bool = False
) -> SpineSample:
    return SpineSample(
        y=y, escaped=escaped, poisoned=poisoned, sigma_trunc=sigma,
        k_used=1, walk_steps=1, escape_bound=0.0, truncation_bound=0.0,
    )


# ---------------------------------------------------------------------------
# Forward spine
# ---------------------------------------------------------------------------


class TestForwardSpine:
    def test_binary_spine_has_one_sibling(
        self, binary: OffspringLaw, srw3: JumpLaw, rng: np.random.Generator
    ) -> None:
        walk = sample_spine_forward((1, 2, 3), binary, srw3, 50, rng)
        assert walk.positions.shape == (51, 3)
        assert walk.positions[0].tolist() == [1, 2, 3]
        assert (np.abs(np.diff(walk.positions, axis=0)).sum(axis=1) == 1).all()
        assert ((walk.left + walk.right) == 1).all()

    def test_rejects_empty_horizon(
        self, binary: OffspringLaw, srw3: JumpLaw, rng: np.random.Generator
    ) -> None:
        with pytest.raises(ConfigError):
            sample_spine_forward((0, 0, 0), binary, srw3, 0, rng)

    def test_occupation_mean_is_many_to_one(
        self, geometric: OffspringLaw, srw1: JumpLaw, rng: np.random.Generator
    ) -> None:
        # P(S_0 = 0) + P(S_1 = 0) + P(S_2 = 0) = 1 + 0 + 1/2
        est = spine_occupation_mean((0,), [(0,)], geometric, srw1, 2, 4000, rng)
        assert est.n == 4000
        assert abs(est.value - 1.5) <= 4 * est.se


# ---------------------------------------------------------------------------
# Backward spine
# ---------------------------------------------------------------------------


class TestSigmaInf:
    def test_needs_dimension_four(
        self, geometric: OffspringLaw, srw3: JumpLaw, rng: np.random.Generator
    ) -> None:
        with pytest.raises(UnsupportedDimensionError):
            estimate_sigma_inf((0, 0, 0), [(0, 0, 0)], geometric, srw3, rng)

    def test_start_must_be_in_target(
        self, geometric: OffspringLaw, srw5: JumpLaw, rng: np.random.Generator
    ) -> None:
        with pytest.raises(ConfigError):
            estimate_sigma_inf(E5, [O5], geometric, srw5, rng)

    def test_immediate_escape(
        self, geometric: OffspringLaw, srw5: JumpLaw, rng: np.random.Generator
    ) -> None:
        sample = estimate_sigma_inf(O5, [O5, E5], geometric, srw5, rng, escape_radius=0.5)
        assert sample.escaped and not sample.poisoned
        assert sample.sigma_trunc == 0
        assert sample.walk_steps == sample.k_used == 1
        assert math.isfinite(sample.truncation_bound)

    def test_longer_truncation_extends_the_realization(
        self, geometric: OffspringLaw, srw5: JumpLaw
    ) -> None:
        compared = 0
        for seed in range(20):
            short = estimate_sigma_inf(
                O5, [O5], geometric, srw5, np.random.default_rng(seed),
                k_max=2, escape_radius=6.0, subtree_budget=20_000,
            )
            long = estimate_sigma_inf(
                O5, [O5], geometric, srw5, np.random.default_rng(seed),
                k_max=6, escape_radius=6.0, subtree_budget=20_000,
            )
            if short.poisoned or long.poisoned:
                continue
            compared += 1
            assert short.escaped == long.escaped
            assert short.walk_steps == long.walk_steps
            assert long.sigma_trunc >= short.sigma_trunc
        assert compared >= 12

    def test_occupation_counts_at_least_the_root(
        self, geometric: OffspringLaw, srw5: JumpLaw, rng: np.random.Generator
    ) -> None:
        sample = estimate_sigma_inf(
            O5, [O5], geometric, srw5, rng,
            k_max=3, escape_radius=5.0, subtree_budget=2000, track_occupation=True,
        )
        if not sample.poisoned:
            assert sample.occupation_trunc is not None and sample.occupation_trunc >= 1

    def test_default_escape_radius(self) -> None:
        assert default_escape_radius([O5]) == 64.0
        assert default_escape_radius([O5, E5]) == 64.0 * 3 + 64.0


# ---------------------------------------------------------------------------
# Estimators on hand-built batches
# ---------------------------------------------------------------------------


class TestEstimators:
    def test_bcap_from_samples(self) -> None:
        y1, y2 = (0,) * 5, (1, 0, 0, 0, 0)
        batch = SpineBatch(
            target=[y1, y2],
            samples=[
                _sample(y1, True, 0),
                _sample(y1, True, 1),
                _sample(y1, False, 2),
                _sample(y2, True, 3),
                _sample(y2, True, 0, poisoned=True),
            ],
            params=SpineParams(),
        )
        est = bcap_from_samples(batch)
        assert est.value == pytest.approx(0.5 + 0.25)
        assert est.coupled_cap == pytest.approx(2 / 3 + 1)
        assert est.poisoned_fraction == pytest.approx(0.2)
        assert est.n_samples == 5
        assert est.value <= est.coupled_cap

    def test_nu_from_samples_is_normalized(self) -> None:
        batch = SpineBatch(
            target=[O5],
            samples=[
                _sample(O5, True, 0),
                _sample(O5, True, 1),
                _sample(O5, True, 1),
                _sample(O5, False, 4),
            ],
            params=SpineParams(),
        )
        nu = nu_from_samples(batch)
        assert nu.support == pytest.approx({1: 0.5, 2: 0.5})
        assert math.fsum(nu.support.values()) == pytest.approx(1.0)
        assert nu.mean == pytest.approx(1.5)
        assert nu.n_escaped == 3
        assert nu.n_effective == pytest.approx(4 / 1.5)

    def test_nu_starves_without_escapes(self) -> None:
        batch = SpineBatch(
            target=[O5],
            samples=[_sample(O5, False, 0) for _ in range(10)],
            params=SpineParams(),
        )
        with pytest.raises(StarvationError) as info:
            nu_from_samples(batch)
        assert info.value.tried == 10

    def test_occupation_law_needs_tracking(self) -> None:
        batch = SpineBatch(target=[O5], samples=[_sample(O5, True, 0)], params=SpineParams())
        with pytest.raises(ConfigError):
            nu_occupation_from_samples(batch)


class TestPoisoningBound:
    def test_default_budget(self) -> None:
        assert SpineParams().subtree_budget == 10_000_000

    def test_geometric_default(self, geometric: OffspringLaw) -> None:
        params = SpineParams()
        tail = 2 / math.sqrt(2 * math.pi * geometric.sigma2 * 10_000_000)
        expected = geometric.sigma2 * 64 * tail
        assert poisoning_bound(params, geometric) == pytest.approx(expected)
        assert 0.02 < expected < 0.03

    def test_larger_budget_clears_one_percent(self, geometric: OffspringLaw) -> None:
        params = SpineParams(subtree_budget=100_000_000, track_occupation=True)
        assert poisoning_bound(params, geometric) < 0.01

    def test_tracking_adds_the_spine_tree(self, binary: OffspringLaw) -> None:
        plain = poisoning_bound(SpineParams(k_max=4), binary)
        tracked = poisoning_bound(SpineParams(k_max=4, track_occupation=True), binary)
        assert tracked / plain == pytest.approx(5 / 4)

    def test_capped_at_one(self, geometric: OffspringLaw) -> None:
        assert poisoning_bound(SpineParams(subtree_budget=10), geometric) == 1.0


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


class TestCollect:
    def test_needs_dimension_five(
        self, geometric: OffspringLaw, srw4: JumpLaw, streams: StreamFactory
    ) -> None:
        with pytest.raises(UnsupportedDimensionError):
            collect_spine_samples([(0, 0, 0, 0)], geometric, srw4, 5, SpineParams(), streams)

    def test_samples_are_grouped_by_point(
        self, geometric: OffspringLaw, srw5: JumpLaw, streams: StreamFactory
    ) -> None:
        params = SpineParams(k_max=2, escape_radius=4.0, subtree_budget=500)
        batch = collect_spine_samples(
            [E5, O5], geometric, srw5, 6, params, streams, block_size=4
        )
        assert batch.target == [O5, E5]
        assert [s.y for s in batch.samples] == [O5] * 6 + [E5] * 6
        again = collect_spine_samples([O5, E5], geometric, srw5, 6, params, streams)
        assert again.samples == batch.samples

    def test_instant_escape_gives_cardinality(
        self, geometric: OffspringLaw, srw5: JumpLaw, streams: StreamFactory
    ) -> None:
        params = SpineParams(escape_radius=0.5)
        bcap = estimate_bcap([O5, E5], geometric, srw5, 20, params, streams)
        assert bcap.value == pytest.approx(2.0)
        assert bcap.se == 0.0
        nu = estimate_nu([O5, E5], geometric, srw5, 20, params, streams)
        assert nu.support == pytest.approx({1: 1.0})
