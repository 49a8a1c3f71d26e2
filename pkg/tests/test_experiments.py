"""Tests for cbrw_lab.experiments: registry, output files and small runs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import pytest

from cbrw_lab.config import ExperimentConfig, ExperimentName
from cbrw_lab.errors import ConfigError, ExitStatus, UnsupportedDimensionError
from cbrw_lab.experiments import (
    CSV_HEADER,
    REGISTRY,
    ExperimentRegistry,
    ExperimentResult,
    RunSummary,
    SampleRow,
    _cluster,
    write_outputs,
)
from cbrw_lab.offspring import make_law, survival_prob_exact
from cbrw_lab.spine import SpineParams, poisoning_bound


def _config(name: str, **values: object) -> ExperimentConfig:
    defaults = REGISTRY.defaults_for(ExperimentName(name))
    return ExperimentConfig.model_validate({**defaults, "experiment": name, **values})


def _result(passed: bool | None) -> ExperimentResult:
    summary = RunSummary(experiment=ExperimentName.kolmogorov, seed=0, passed=passed)
    return ExperimentResult(rows=[], summary=summary)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


class TestRegistry:
    def test_every_experiment_is_registered(self) -> None:
        assert sorted(REGISTRY.names()) == sorted(e.value for e in ExperimentName)

    def test_register_and_run(self) -> None:
        registry = ExperimentRegistry()

        @registry.register(ExperimentName.kolmogorov, defaults={"n_trees": 5}, description="stub")
        def stub(config: ExperimentConfig) -> ExperimentResult:
            return _result(True)

        entry = registry.get("kolmogorov")
        assert entry.runner is stub and entry.description == "stub"
        defaults = registry.defaults_for(ExperimentName.kolmogorov)
        defaults["n_trees"] = 6
        assert registry.defaults_for(ExperimentName.kolmogorov) == {"n_trees": 5}
        result = registry.run(ExperimentConfig(experiment=ExperimentName.kolmogorov))
        assert result.summary.passed is True
        assert result.summary.wall_time >= 0.0

    def test_duplicate_registration(self) -> None:
        registry = ExperimentRegistry()
        registry.register(ExperimentName.capacity)(lambda config: _result(None))
        with pytest.raises(ConfigError, match="twice"):
            registry.register(ExperimentName.capacity)(lambda config: _result(None))

    def test_unregister_and_unknown_names(self) -> None:
        registry = ExperimentRegistry()
        registry.register(ExperimentName.capacity)(lambda config: _result(None))
        registry.unregister(ExperimentName.capacity)
        assert registry.names() == []
        with pytest.raises(ConfigError):
            registry.get(ExperimentName.capacity)
        with pytest.raises(ConfigError):
            registry.get("d9-limit")


# ---------------------------------------------------------------------------
# Results and files
# ---------------------------------------------------------------------------


class TestOutputs:
    def test_row_cells(self) -> None:
        row = SampleRow(
            experiment="d4-yaglom", d=4, jx=1 / 3, seed=9, worker=0, replicate=2,
            hit=True, censored=False, l_k=3,
        )
        cells = row.cells()
        assert len(cells) == len(CSV_HEADER)
        assert cells[:9] == ["d4-yaglom", "4", "0.333333333333", "9", "0", "2", "1", "0", "3"]
        assert cells[9:] == ["", "", "", ""]

    def test_exit_status(self) -> None:
        assert _result(True).exit_status is ExitStatus.ok
        assert _result(None).exit_status is ExitStatus.ok
        assert _result(False).exit_status is ExitStatus.acceptance_failed

    def test_write_outputs(self, tmp_path: Path) -> None:
        row = SampleRow(experiment="kolmogorov", d=1, seed=0, worker=1, replicate=4, z_k=7)
        result = ExperimentResult(
            rows=[row],
            summary=RunSummary(
                experiment=ExperimentName.kolmogorov, seed=0, estimate=0.5, passed=True
            ),
        )
        samples, summary = write_outputs(result, tmp_path / "nested" / "out")
        with samples.open(encoding="utf-8", newline="") as handle:
            lines = list(csv.reader(handle))
        assert tuple(lines[0]) == CSV_HEADER
        assert lines[1][CSV_HEADER.index("z_k")] == "7"
        data = json.loads(summary.read_text(encoding="utf-8"))
        assert data["experiment"] == "kolmogorov"
        assert data["passed"] is True
        assert data["estimate"] == 0.5

    def test_cluster_is_nested(self) -> None:
        assert _cluster(1, 2) == [(0, 0)]
        assert _cluster(3, 2) == [(0, 0), (0, 1), (1, 0)]
        assert _cluster(4, 3)[:3] == _cluster(3, 3)


# ---------------------------------------------------------------------------
# Small runs
# ---------------------------------------------------------------------------


class TestRunners:
    def test_kolmogorov(self) -> None:
        config = _config("kolmogorov", generation=5, n_trees=20_000, block_size=5000, seed=1)
        result = REGISTRY.run(config)
        summary = result.summary
        exact = survival_prob_exact(make_law("geometric"), 5)
        assert summary.prediction == pytest.approx(exact)
        assert summary.estimate is not None and summary.se is not None
        assert abs(summary.estimate - exact) <= 5 * summary.se
        assert len(result.rows) == summary.details["survivors"]
        assert all(row.z_k and row.z_k > 0 for row in result.rows)
        assert summary.passed is not None

    def test_kolmogorov_is_seed_deterministic(self) -> None:
        config = _config("kolmogorov", generation=5, n_trees=2000, block_size=500, seed=4)
        a = REGISTRY.run(config)
        b = REGISTRY.run(config.model_copy(update={"workers": 2}))
        assert a.rows == b.rows

    def test_progeny_tail_uses_exact_sums(self) -> None:
        result = REGISTRY.run(_config("progeny-tail", n_trees=200, block_size=50))
        summary = result.summary
        assert summary.passed is True
        assert summary.prediction == pytest.approx(math.sqrt(2 / math.pi))
        assert "exact_tail" in summary.details
        assert len(result.rows) == 200
        assert {row.worker for row in result.rows} == {0, 1, 2, 3}

    def test_many_to_one_reports_oracle(self) -> None:
        config = _config(
            "many-to-one", dim=3, n_trees=300, node_budget=20_000, n_walks=200,
            green_halfwidth=6, block_size=100,
        )
        result = REGISTRY.run(config)
        summary = result.summary
        assert summary.prediction is not None and summary.prediction > 0
        assert set(summary.bias_bounds) == {"censoring", "censoring_mass", "oracle"}
        assert summary.invariant_violations == 0
        assert all(row.hit or row.censored for row in result.rows)

    def test_d5_limit_fails_on_poisoned_spine(self) -> None:
        config = _config(
            "d5-limit", j_targets="3", target_hits=20, n_samples=100, k_max=2,
            escape_radius=4.0, subtree_budget=50, occupation_samples=0, block_size=50,
        )
        summary = REGISTRY.run(config).summary
        bounds = summary.bias_bounds
        assert {"spine_poisoned", "spine_poisoning"} <= set(bounds)
        assert bounds["spine_poisoned"] > 0.01
        assert summary.passed is False
        assert summary.details["occupation_samples"] == 0
        assert summary.details["by_j"][0]["tv_occupation"] is None

    def test_d5_limit_tracks_occupation_separately(self) -> None:
        config = _config(
            "d5-limit", j_targets="3", target_hits=20, n_samples=100, k_max=2,
            escape_radius=4.0, subtree_budget=100_000, occupation_samples=40, block_size=50,
        )
        summary = REGISTRY.run(config).summary
        params = SpineParams(k_max=2, escape_radius=4.0, subtree_budget=100_000)
        expected = poisoning_bound(params, make_law("geometric"))
        assert summary.bias_bounds["spine_poisoning"] == pytest.approx(expected)
        assert summary.details["occupation_samples"] == 40
        assert summary.details["by_j"][0]["tv_occupation"] is not None

    def test_lowd_scaling_in_one_dimension(self) -> None:
        config = _config(
            "lowd-scaling", dim=1, j_targets="2,4", target_hits=30,
            node_budget=10_000, max_trees=100_000, block_size=50,
        )
        result = REGISTRY.run(config)
        summary = result.summary
        assert len(result.rows) == 60
        assert all(row.hit and not row.censored for row in result.rows)
        assert [r["jx"] for r in summary.details["by_j"]] == [2.0, 4.0]
        assert summary.prediction == 3.0
        assert summary.invariant_violations == 0

    def test_start_inside_target_is_rejected(self) -> None:
        config = _config("lowd-scaling", dim=1, j_targets="0.1,4")
        with pytest.raises(ConfigError, match="lands in K"):
            REGISTRY.run(config)

    def test_grid_is_required(self) -> None:
        with pytest.raises(ConfigError, match="J-targets"):
            REGISTRY.run(_config("d4-yaglom", j_targets="20"))

    def test_dimension_is_checked(self) -> None:
        with pytest.raises(UnsupportedDimensionError):
            REGISTRY.run(_config("d4-mrca", dim=3))
        with pytest.raises(UnsupportedDimensionError):
            REGISTRY.run(_config("d5-limit", dim=4))
        with pytest.raises(UnsupportedDimensionError):
            REGISTRY.run(_config("many-to-one", dim=2))

    @pytest.mark.slow
    def test_d4_mrca(self) -> None:
        config = _config(
            "d4-mrca", j_targets="3,4", target_hits=20, node_budget=20_000,
            max_trees=10_000_000, block_size=500,
        )
        result = REGISTRY.run(config)
        by_j = result.summary.details["by_j"]
        assert len(by_j) == 2
        assert all(0.0 <= r["p_n_equals_2"] <= 1.0 for r in by_j)
        assert all(row.n_x is not None and row.n_x >= 1 for row in result.rows)
        assert result.summary.passed is not None
