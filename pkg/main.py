"""
flowlab - command line entry point
"""

import logging
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.table import Table

from flowlab import __version__
from flowlab.core.config import settings
from flowlab.core.exceptions import FlowlabError
from flowlab.core.logging import setup_logging
from flowlab.schemas.config import load_config, load_manifest
from flowlab.schemas.report import RunReport
from flowlab.services.fields import describe_catalog
from flowlab.services.harness import experiment_service

logger = logging.getLogger(__name__)
console = Console()

EXIT_FAILED_CHECKS = 1
EXIT_ERROR = 2


def _configure(verbose: bool) -> None:
    setup_logging(level="DEBUG" if verbose else settings.LOG_LEVEL)


def _print_report(report: RunReport) -> None:
    table = Table(title=f"{report.config.name} ({report.config.kind})")
    table.add_column("check")
    table.add_column("value", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("se", justify="right")
    table.add_column("result")
    for check in report.checks:
        table.add_row(
            check.name,
            "-" if check.value is None else f"{check.value:.6g}",
            "-" if check.tolerance is None else f"{check.tolerance:.6g}",
            "-" if check.se is None else f"{check.se:.3g}",
            "[green]pass[/green]" if check.passed else "[red]FAIL[/red]",
        )
    console.print(table)


def create_application() -> typer.Typer:
    """Create and configure the typer application"""

    app = typer.Typer(
        name="flowlab",
        help="Numerical laboratory for stochastic flows of SDEs with bounded measurable drift",
        add_completion=False,
        no_args_is_help=True,
    )

    @app.command()
    def run(
        config: Path = typer.Option(..., "--config", help="Experiment config (JSON)"),
        out: Optional[Path] = typer.Option(None, "--out", help="Output directory (overrides the config)"),
        seed: Optional[int] = typer.Option(None, "--seed", help="Root seed (overrides the config)"),
        threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Worker threads; results do not depend on it"),
        verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
    ):
        """Run one experiment config."""
        _configure(verbose)
        try:
            experiment = load_config(config)
            if seed is not None:
                experiment = experiment.model_copy(update={"seed": seed})
            report = experiment_service.run(experiment, threads=threads, out=out)
        except FlowlabError as e:
            logger.error(f"Run failed: {e}")
            console.print(f"[red]error:[/red] {e}")
            raise typer.Exit(code=EXIT_ERROR)
        _print_report(report)
        raise typer.Exit(code=0 if report.passed else EXIT_FAILED_CHECKS)

    @app.command()
    def suite(
        config: Path = typer.Option(..., "--config", help="Manifest listing experiment configs (JSON)"),
        out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
        seed: Optional[int] = typer.Option(None, "--seed", help="Root seed for every config"),
        threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Worker threads; results do not depend on it"),
        verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
    ):
        """Run every config of a manifest and aggregate the reports."""
        _configure(verbose)
        try:
            configs = load_manifest(config)
            if seed is not None:
                configs = [c.model_copy(update={"seed": seed}) for c in configs]
            report = experiment_service.suite(configs, threads=threads, out=out)
        except FlowlabError as e:
            logger.error(f"Suite failed: {e}")
            console.print(f"[red]error:[/red] {e}")
            raise typer.Exit(code=EXIT_ERROR)
        for run_report in report.runs:
            _print_report(run_report)
        console.print("[green]suite passed[/green]" if report.passed else "[red]suite failed[/red]")
        raise typer.Exit(code=0 if report.passed else EXIT_FAILED_CHECKS)

    @app.command("list-catalog")
    def list_catalog():
        """Show the drift catalog."""
        table = Table(title="Drift catalog")
        table.add_column("key")
        table.add_column("formula")
        table.add_column("params")
        for key, entry in describe_catalog().items():
            table.add_row(key, entry["formula"], ", ".join(entry["params"]))
        console.print(table)

    @app.command()
    def version():
        """Show the flowlab version."""
        console.print(f"flowlab {__version__}")

    return app


app = create_application()


if __name__ == "__main__":
    app()
