from pathlib import Path
from typing import Tuple

import click
from tqdm import tqdm

from cli.boundary import EXIT_FINDINGS, EXIT_OK, command_boundary
from config import config
from pksim.harness.runner import run_scenario

router = click.Group()


@router.command("run", help="Run scenario files and compare every verdict with its expectation.")
@click.argument("scenarios", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--report-dir", type=click.Path(file_okay=False, path_type=Path), default=config.harness.report_dir,
              show_default=True, help="Directory receiving one sub-directory per scenario")
@click.option("--save/--no-save", default=True, show_default=True, help="Write report, table and logs")
@command_boundary
def run_command(scenarios: Tuple[Path, ...], report_dir: Path, save: bool) -> int:
    failed = []
    for path in tqdm(scenarios, desc="Scenarios", disable=len(scenarios) < 2):
        result = run_scenario(path, save=save, report_dir=report_dir)
        click.echo(result.report.text())
        if result.saved_to is not None:
            click.echo(f"saved to {result.saved_to}")
        if result.report.failed:
            failed.append(result.name)
    if failed:
        click.echo(f"{len(failed)} scenario(s) with unexpected results: {', '.join(failed)}", err=True)
        return EXIT_FINDINGS
    return EXIT_OK
