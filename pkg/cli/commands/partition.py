import csv
import io
from pathlib import Path

import click

from cli.boundary import EXIT_OK, command_boundary
from config import config
from pksim.policy.graph import DependencyGraph
from pksim.policy.partition import partition

router = click.Group()


@router.command("partition", help="Group the modules of a dependency graph (JSON or modules.dep) into address spaces.")
@click.argument("graph_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--capacity", type=click.IntRange(min=1), default=config.partition.capacity, show_default=True,
              help="Module pkeys per address space")
@click.option("--table", is_flag=True, help="Print module,space,pkey rows instead of the summary")
@command_boundary
def partition_command(graph_file: Path, capacity: int, table: bool) -> int:
    result = partition(DependencyGraph.load(graph_file), capacity)
    if table:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["module", "space", "pkey"])
        writer.writerows(result.rows())
        click.echo(out.getvalue(), nl=False)
    else:
        click.echo(result.report(), nl=False)
    return EXIT_OK
