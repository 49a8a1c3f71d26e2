"""Tests for cbrw_lab.config."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import pytest
from pydantic import ValidationError

from cbrw_lab.config import (
    ExperimentConfig,
    ExperimentName,
    load_config,
    parse_config_text,
    parse_overrides,
)
from cbrw_lab.errors import ConfigError

SAMPLE = """
# d=4 Yaglom run
experiment = d4-yaglom
dim = 4
target = 0,0,0,0; 1,0,0,0   # two neighbours
j_targets = 8, 16
"""


class TestParseConfigText:
    def test_parses_keys_and_strips_comments(self) -> None:
        values = parse_config_text(SAMPLE)
        assert values == {
            "experiment": "d4-yaglom",
            "dim": "4",
            "target": "0,0,0,0; 1,0,0,0",
            "j_targets": "8, 16",
        }

    def test_rejects_line_without_equals(self) -> None:
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("dim = 4\nseed 7\n")

    def test_rejects_repeated_key(self) -> None:
        with pytest.raises(ConfigError, match="repeat"):
            parse_config_text("seed = 1\nseed = 2\n")


class TestParseOverrides:
    def test_later_flags_win(self) -> None:
        assert parse_overrides(["seed=1", "dim = 5", "seed=2"]) == {"seed": "2", "dim": "5"}

    def test_value_may_contain_equals(self) -> None:
        assert parse_overrides(["offspring=custom:0.5,0,0.5"])["offspring"] == "custom:0.5,0,0.5"

    @pytest.mark.parametrize("pair", ["seed", "=3"])
    def test_rejects_malformed(self, pair: str) -> None:
        with pytest.raises(ConfigError):
            parse_overrides([pair])


class TestExperimentConfig:
    def test_parses_string_values(self) -> None:
        config = ExperimentConfig.model_validate(
            {**parse_config_text(SAMPLE), "escape_radius": "auto", "capacity_sizes": "1,3"}
        )
        assert config.experiment is ExperimentName.d4_yaglom
        assert config.target == [(0, 0, 0, 0), (1, 0, 0, 0)]
        assert config.j_targets == [8.0, 16.0]
        assert config.escape_radius is None
        assert config.capacity_sizes == [1, 3]

    def test_target_defaults_to_origin(self) -> None:
        config = ExperimentConfig(experiment=ExperimentName.kolmogorov, dim=3)
        assert config.target_set() == frozenset({(0, 0, 0)})

    def test_half_widths(self) -> None:
        assert ExperimentConfig(experiment="capacity", dim=3).half_widths() == (12, 24)
        config = ExperimentConfig(experiment="capacity", dim=3, green_halfwidth=6)
        assert config.half_widths() == (6, 12)

    def test_derived_laws(self) -> None:
        config = ExperimentConfig(experiment="d5-limit", dim=5, offspring="binary", jump="lazy")
        assert config.offspring_law().sigma2 == 1.0
        assert config.jump_law().dim == 5

    @pytest.mark.parametrize(
        "values",
        [
            {"colour": "red"},
            {"target": "0,0;1"},
            {"target": "a,b"},
            {"start": "1,0,0"},
            {"j_targets": "16,8"},
            {"j_targets": "0,8"},
            {"capacity_sizes": "0"},
            {"offspring": "custom:0.5,0.5"},
            {"jump": "levy"},
            {"dim": "0"},
        ],
    )
    def test_rejects_invalid_values(self, values: dict[str, Any]) -> None:
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"experiment": "d4-yaglom", "dim": "2", **values})

    def test_is_frozen(self) -> None:
        config = ExperimentConfig(experiment="kolmogorov")
        with pytest.raises(ValidationError):
            config.seed = 3  # type: ignore[misc]


class TestLoadConfig:
    def test_precedence(self, tmp_path: Path) -> None:
        path = tmp_path / "run.conf"
        path.write_text("experiment = kolmogorov\nseed = 1\ngeneration = 30\nn_trees = 50\n")
        config = load_config(
            None,
            path=path,
            defaults_for=lambda name: {"generation": 10, "n_trees": 10, "workers": 3},
            overrides={"seed": "2", "n_trees": "60"},
            flags={"seed": 3, "workers": None},
        )
        assert config.experiment is ExperimentName.kolmogorov
        assert config.seed == 3
        assert config.n_trees == 60
        assert config.generation == 30
        assert config.workers == 3

    def test_experiment_argument_must_match_file(self, tmp_path: Path) -> None:
        path = tmp_path / "run.conf"
        path.write_text("experiment = kolmogorov\n")
        with pytest.raises(ConfigError, match="names"):
            load_config("capacity", path=path)
        assert load_config("kolmogorov", path=path).experiment is ExperimentName.kolmogorov

    def test_unknown_experiment(self) -> None:
        with pytest.raises(ConfigError, match="known"):
            load_config("d7-limit")

    def test_missing_experiment(self) -> None:
        with pytest.raises(ConfigError):
            load_config(None, overrides={"seed": "1"})

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="Cannot read"):
            load_config("kolmogorov", path=tmp_path / "absent.conf")

    def test_unknown_override_key(self) -> None:
        with pytest.raises(ValidationError):
            load_config("kolmogorov", overrides={"n_tress": "10"})
