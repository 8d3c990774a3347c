"""Command-line entry points: run, validate, report."""

import sys

import click

from .experiments import (
    ConfigValidationError,
    load_config,
    run_experiment,
)
from .reporting import plot_error_vs_round, summarize, write_csv


@click.group()
def main():
    """Semi-supervised GAN self-training experiments."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--workers", type=int, default=None,
              help="Override experiment.workers.")
@click.option("--resume", is_flag=True, help="Skip cells already done.")
def run(config_path, preset, workers, resume):
    """Run the configured experiment grid."""
    try:
        cfg = load_config(config_path, preset=preset)
    except ConfigValidationError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(1)
    if workers is not None:
        from dataclasses import replace

        cfg = replace(cfg, workers=workers)

    def progress(key, status):
        click.echo(f"[{status}] {key}")

    try:
        manifest = run_experiment(cfg, resume=resume, on_cell_done=progress)
    except FileNotFoundError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(1)
    statuses = [c["status"] for c in manifest.cells.values()]
    failed = statuses.count("failed")
    click.echo(
        f"{statuses.count('done')} done, {failed} failed "
        f"out of {len(statuses)} cells -> {cfg.out_dir}"
    )
    sys.exit(2 if failed else 0)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
def validate(config_path, preset):
    """Validate a config file and print the resolved values."""
    try:
        cfg = load_config(config_path, preset=preset)
    except ConfigValidationError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(1)
    for key, value in sorted(cfg.raw.items()):
        click.echo(f"{key} = {value}")
    sys.exit(0)


@main.command()
@click.option("--run-dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--plot", "plot_path", type=click.Path(dir_okay=False), default=None)
def report(run_dir, csv_path, plot_path):
    """Summarize a finished run as a table, CSV and plot."""
    rows = summarize(run_dir)
    header = f"{'scheme':<12}{'count':>6}{'mean_err':>12}{'std':>10}" \
             f"{'improve':>12}{'std':>10}{'pl_acc':>9}{'added/rd':>10}"
    click.echo(header)
    for row in rows:
        click.echo(
            f"{row.scheme:<12}{row.count:>6}"
            f"{row.mean_error:>12.4f}{row.std_error:>10.4f}"
            + (f"{row.mean_improvement:>12.4f}" if row.mean_improvement is not None
               else f"{'-':>12}")
            + (f"{row.std_improvement:>10.4f}" if row.std_improvement is not None
               else f"{'-':>10}")
            + (f"{row.pseudo_label_acc:>9.3f}" if row.pseudo_label_acc is not None
               else f"{'-':>9}")
            + f"{row.mean_added:>10.1f}"
        )
    if any(row.std_error == 0.0 for row in rows):
        click.echo("note: std = 0 by convention where only a single seed ran")
    if csv_path:
        write_csv(rows, csv_path)
        click.echo(f"wrote {csv_path}")
    if plot_path:
        plot_error_vs_round(run_dir, plot_path)
        click.echo(f"wrote {plot_path}")
    sys.exit(0)


if __name__ == "__main__":
    main()
