from pathlib import Path

import click

from cli.boundary import EXIT_FINDINGS, EXIT_OK, command_boundary
from config import config
from pksim.harness.bench import BUILTIN_WORKLOADS, bench, bench_report, load_workload
from pksim.harness.persistence import save_report

router = click.Group()


@router.command("bench", help=f"Count switch costs for a workload: one of {', '.join(BUILTIN_WORKLOADS)} "
                              "or a workload JSON file.")
@click.argument("workload", default="all")
@click.option("--report-dir", type=click.Path(file_okay=False, path_type=Path), default=config.harness.report_dir,
              show_default=True)
@click.option("--save/--no-save", default=True, show_default=True)
@command_boundary
def bench_command(workload: str, report_dir: Path, save: bool) -> int:
    spec = load_workload(workload)
    result = bench(spec, show_progress=True)
    report = bench_report(result)
    click.echo(report.text())
    if save:
        saved = save_report(f"bench-{spec.name}", report, report_dir=report_dir)
        if saved is not None:
            click.echo(f"saved to {saved}")
    return EXIT_FINDINGS if report.failed else EXIT_OK
