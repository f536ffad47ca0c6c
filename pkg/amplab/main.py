import logging
import os
import sys

import click

from amplab.errors import AmpLabError
from amplab.services import harness
from amplab.services.config_loader import apply_overrides, load_config, resolve_experiment_config
from amplab.services.display import plot_curves

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger(__name__)


def build_config(config_path, seed=None, out=None, workers=None):
    """
    Task: Load the config file, apply command-line overrides and resolve it.
    Relative matrix paths are read next to the config file.
    """
    raw = apply_overrides(load_config(config_path), seed=seed, out=out, workers=workers)
    base_dir = os.path.dirname(os.path.abspath(config_path)) if config_path else None
    cfg = resolve_experiment_config(raw, base_dir)
    logging.basicConfig(level=cfg.log_level, format=LOG_FORMAT, force=True)
    return cfg


def run_guarded(action):
    """Library errors end the command with a one-line message and exit status 1."""
    try:
        return action()
    except AmpLabError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             default=None, help="YAML or JSON experiment config (default: packaged config.yaml).")
seed_option = click.option("--seed", type=int, default=None, help="Run a single seed instead of the configured list.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
workers_option = click.option("--workers", type=int, default=None, help="Rollout worker processes.")


@click.group()
def cli():
    """Variance reduction lab: AMP value targets, PPO training and exact oracles."""


@cli.command()
@config_option
@seed_option
@out_option
@workers_option
def train(config_path, seed, out, workers):
    """Train every configured estimator mode and normalization on every seed."""
    def action():
        cfg = build_config(config_path, seed, out, workers)
        out_dir = harness.run_experiment(cfg)
        click.echo(out_dir)
    run_guarded(action)


@cli.command()
@config_option
@seed_option
@out_option
@workers_option
def variance(config_path, seed, out, workers):
    """Target variance per estimator mode and sample size with a fixed policy and zeta."""
    def action():
        cfg = build_config(config_path, seed, out, workers)
        frame = harness.variance_study(cfg)
        click.echo(frame.to_string(index=False))
    run_guarded(action)


@cli.command()
@config_option
@out_option
def oracle(config_path, out):
    """Solve the truncated queueing network exactly and export its relative values."""
    def action():
        cfg = build_config(config_path, out=out)
        if cfg.environment != "mqn":
            raise AmpLabError("the oracle command needs environment.name: mqn")
        summary = harness.export_oracle(cfg)
        for key, value in summary.items():
            click.echo(f"{key}: {value}")
    run_guarded(action)


@cli.command()
@click.argument("artifact_dir", type=click.Path(exists=True, file_okay=False))
def timing(artifact_dir):
    """Re-render timing.csv (minutes per phase and mode) from a training run."""
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    run_guarded(lambda: click.echo(harness.rerender_timing(artifact_dir).to_string(index=False)))


@cli.command()
@click.argument("artifact_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--output", type=click.Path(dir_okay=False), default=None, help="PNG path (default: <dir>/curves.png).")
def plot(artifact_dir, output):
    """Plot learning curves and value losses of a training run."""
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    run_guarded(lambda: click.echo(plot_curves(artifact_dir, output)))


if __name__ == "__main__":
    if sys.version_info < (3, 10):
        raise RuntimeError("Python 3.10 or newer is required")
    cli()
