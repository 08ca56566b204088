"""Command-line entry points for the pipeline stages.

Exit codes: 0 success, 2 configuration error, 3 data or schema error,
4 estimation error.
"""

from __future__ import annotations

import sys

import click

from creditscan.errors import (
    ConfigError,
    DependencyError,
    EstimationError,
    SchemaError,
)
from creditscan.pipeline import STAGE_ORDER, PipelineConfig, run_pipeline

EXIT_CONFIG = 2
EXIT_SCHEMA = 3
EXIT_ESTIMATION = 4


def _build_config(config, **overrides):
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "years" in overrides:
        try:
            overrides["years"] = tuple(
                int(y) for y in str(overrides["years"]).split(",") if y)
        except ValueError:
            raise ConfigError(f"cannot parse years {overrides['years']!r}")
    if "bandwidths" in overrides:
        try:
            overrides["bandwidths"] = tuple(
                int(b) for b in str(overrides["bandwidths"]).split(",") if b)
        except ValueError:
            raise ConfigError(
                f"cannot parse bandwidths {overrides['bandwidths']!r}")
    if config is not None:
        return PipelineConfig.from_file(config, **overrides)
    return PipelineConfig.from_dict(overrides)


def _run(stages, config, **overrides):
    try:
        cfg = _build_config(config, **overrides)
        run_pipeline(cfg, stages=stages)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (SchemaError, DependencyError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)
    except EstimationError as exc:
        click.echo(f"estimation error: {exc}", err=True)
        sys.exit(EXIT_ESTIMATION)
    click.echo(f"done: {', '.join(s for s in STAGE_ORDER if s in set(stages))}")


def _stage_options(f):
    decorators = [
        click.option("--config", type=click.Path(), default=None,
                     help="JSON config file; flags override its values."),
        click.option("--out", type=click.Path(), default=None,
                     help="Run directory for inputs and outputs."),
        click.option("--seed", type=int, default=None),
        click.option("--workers", type=int, default=None),
        click.option("--bandwidth", type=int, default=None,
                     help="Headline bandwidth for the estimate tables."),
        click.option("--bandwidths", type=str, default=None,
                     help="Comma-separated bandwidth list, e.g. 5,10,15."),
        click.option("--years", type=str, default=None,
                     help="Comma-separated election years, e.g. 2012,2014."),
    ]
    for d in reversed(decorators):
        f = d(f)
    return f


@click.group()
def main():
    """Threshold detection, share construction, and panel estimation."""


@main.command()
@_stage_options
def simulate(config, **overrides):
    """Generate a synthetic world into the run directory."""
    _run(("simulate",), config, **overrides)


@main.command()
@_stage_options
def scan(config, **overrides):
    """Detect credit-limit thresholds in the credit panel."""
    _run(("scan",), config, **overrides)


@main.command()
@_stage_options
def shares(config, **overrides):
    """Compute threshold-proximity population shares."""
    _run(("shares",), config, **overrides)


@main.command()
@_stage_options
@click.option("--subset", type=str, default=None,
              help="Ideology subset: all, rep, or dem.")
@click.option("--gerrymander/--no-gerrymander", default=None,
              help="Also fit the fixed-boundary 2012-2016 window.")
@click.option("--ols", "instrumented", flag_value=False, default=None,
              help="Plain within-OLS instead of 2SLS (diagnostic).")
def estimate(config, **overrides):
    """Fit the vote-share and ideology models."""
    _run(("estimate",), config, **overrides)


@main.command()
@_stage_options
def report(config, **overrides):
    """Render the text tables from the estimate stage."""
    _run(("report",), config, **overrides)


@main.command()
@_stage_options
@click.option("--stage", "stage", type=click.Choice(STAGE_ORDER),
              default=None, help="Run a single stage instead of all five.")
@click.option("--subset", type=str, default=None)
@click.option("--gerrymander/--no-gerrymander", default=None)
@click.option("--ols", "instrumented", flag_value=False, default=None)
def run(config, stage, **overrides):
    """Run the full pipeline (or one stage of it)."""
    stages = (stage,) if stage else STAGE_ORDER
    _run(stages, config, **overrides)


if __name__ == "__main__":
    main()
