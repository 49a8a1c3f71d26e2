"""CLI entry point for cbrw-lab."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from . import __version__
from .config import load_config, parse_overrides
from .errors import CbrwLabError, ExitStatus, StarvationError
from .experiments import REGISTRY, write_outputs

_EXIT_STATUSES = """\b
Exit statuses:
  0  acceptance predicate holds (or exploratory run)
  1  acceptance predicate failed
  2  usage error
  3  configuration error
  4  starvation: no hits or no escaped spine samples
  5  numerical failure (solver did not converge)
  6  too few samples for a requested statistic
"""


@click.group()
@click.version_option(version=__version__, prog_name="cbrw-lab")
def main() -> None:
    """cbrw-lab: Monte Carlo checks of limit laws for critical branching random walks."""


@main.command("run", epilog=_EXIT_STATUSES)
@click.option(
    "--experiment",
    "-e",
    default=None,
    type=click.Choice([e.name.value for e in REGISTRY.entries()]),
    help="Experiment to run; may also come from the config file.",
)
@click.option(
    "--config",
    "config_path",
    default=None,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="key=value config file.",
)
@click.option("--seed", default=None, type=int, help="Master 64-bit seed.")
@click.option("--workers", default=None, type=int, help="Worker processes.")
@click.option(
    "--out-dir",
    default=None,
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for samples.csv and summary.json.",
)
@click.option(
    "--override",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override one config key; repeatable.",
)
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG logging.")
def run_command(
    experiment: str | None,
    config_path: Path | None,
    seed: int | None,
    workers: int | None,
    out_dir: Path | None,
    overrides: tuple[str, ...],
    verbose: int,
) -> None:
    """Run one registered experiment and write its artifacts."""
    _configure_logging(verbose)
    try:
        config = load_config(
            experiment,
            path=config_path,
            defaults_for=REGISTRY.defaults_for,
            overrides=parse_overrides(overrides),
            flags={"seed": seed, "workers": workers, "out_dir": out_dir},
        )
        result = REGISTRY.run(config)
    except ValidationError as exc:
        click.echo(f"Error: invalid configuration: {exc}", err=True)
        sys.exit(ExitStatus.config)
    except StarvationError as exc:
        click.echo(f"Error: {exc}", err=True)
        click.echo(f"  tried={exc.tried}, hit-rate upper bound={exc.upper_bound:.3g}", err=True)
        sys.exit(exc.exit_status)
    except CbrwLabError as exc:
        click.echo(f"Error: {exc}", err=True)
        sys.exit(exc.exit_status)

    samples, summary_path = write_outputs(result, config.out_dir)
    summary = result.summary
    click.echo(f"Experiment : {summary.experiment.value}")
    click.echo(f"Seed       : {summary.seed}")
    if summary.estimate is not None:
        se = f" +- {summary.se:.4g}" if summary.se is not None else ""
        click.echo(f"Estimate   : {summary.estimate:.6g}{se}")
    if summary.prediction is not None:
        click.echo(f"Prediction : {summary.prediction:.6g}")
    click.echo(f"Censored   : {100 * summary.censored_fraction:.2f}%")
    verdict = {True: "passed", False: "FAILED", None: "no acceptance"}[summary.passed]
    click.echo(f"Acceptance : {verdict} ({summary.acceptance})")
    click.echo(f"Samples    : {samples}")
    click.echo(f"Summary    : {summary_path}")
    sys.exit(result.exit_status)


@main.command("list")
def list_command() -> None:
    """List the registered experiments."""
    for entry in REGISTRY.entries():
        click.echo(f"{entry.name.value:<18}  {entry.description}")


def _configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


if __name__ == "__main__":
    main()
