from pathlib import Path

import click

from cli.boundary import EXIT_FINDINGS, EXIT_OK, command_boundary
from config import config
from pksim.harness.pentest import run_suite
from pksim.harness.persistence import save_report

router = click.Group()


@router.command("pentest", help="Run the six penetration tests against the fully defended system.")
@click.option("--necessity/--no-necessity", default=True, show_default=True,
              help="Also re-run the suite with each defense switched off in turn")
@click.option("--report-dir", type=click.Path(file_okay=False, path_type=Path), default=config.harness.report_dir,
              show_default=True)
@click.option("--save/--no-save", default=True, show_default=True)
@command_boundary
def pentest_command(necessity: bool, report_dir: Path, save: bool) -> int:
    results, report = run_suite(with_necessity=necessity, show_progress=True)
    click.echo(report.text())
    if save:
        saved = save_report("pentest", report, report_dir=report_dir)
        if saved is not None:
            click.echo(f"saved to {saved}")
    return EXIT_FINDINGS if report.failed else EXIT_OK
