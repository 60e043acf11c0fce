"""Command line entry point: gpje check|init|solve|verify|export --config <path>."""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("GPJE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import logging  # noqa: E402

import click  # noqa: E402

from .config import ConfigError, RunConfig  # noqa: E402
from .pipeline import INVALID, RUNTIME, STAGES, StageError  # noqa: E402

log = logging.getLogger("gpje")


def _run(stage: str, config: str, seed, **kw) -> int:
    try:
        cfg = RunConfig.load(config)
    except FileNotFoundError:
        click.echo(f"error: config file not found: {config}", err=True)
        return INVALID
    except ConfigError as exc:
        click.echo(f"error: {config}: {exc}", err=True)
        return INVALID
    try:
        code, report = STAGES[stage](cfg, seed=seed, **kw)
    except StageError as exc:
        click.echo(f"{stage}: {exc}", err=True)
        return exc.code
    except ConfigError as exc:
        click.echo(f"error: {config}: {exc}", err=True)
        return INVALID
    except Exception as exc:  # surfaced as a runtime failure with context
        click.echo(f"{stage}: runtime failure: {type(exc).__name__}: {exc}", err=True)
        return RUNTIME
    click.echo(f"{stage}: {'ok' if code == 0 else 'validation failed'} ({cfg.output_dir})")
    return code


_config = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                       help="TOML run configuration.")
_seed = click.option("--seed", type=int, default=None, help="Override the config seed.")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Generated prescribed Jacobian equation solver."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@main.command()
@_config
@_seed
def check(config, seed):
    """Sample the structure conditions and domain convexity."""
    sys.exit(_run("check", config, seed))


@main.command()
@_config
@_seed
@click.option("--force", is_flag=True, help="Skip the condition gate.")
@click.option("--skip-envelope", is_flag=True, help="Use the bare g_rho field.")
def init(config, seed, force, skip_envelope):
    """Build the initial uniformly g-convex field."""
    sys.exit(_run("init", config, seed, force=force, skip_envelope=skip_envelope))


@main.command()
@_config
@_seed
def solve(config, seed):
    """Run the homotopy continuation."""
    sys.exit(_run("solve", config, seed))


@main.command()
@_config
@_seed
def verify(config, seed):
    """Ray-trace and pushforward checks of a field."""
    sys.exit(_run("verify", config, seed))


@main.command()
@_config
@_seed
def export(config, seed):
    """Write plot-friendly CSV tables of the solution."""
    sys.exit(_run("export", config, seed))


if __name__ == "__main__":  # pragma: no cover
    main()
