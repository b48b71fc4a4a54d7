import click

from cli.commands.bench import router as bench_router
from cli.commands.deprivilege import router as deprivilege_router
from cli.commands.partition import router as partition_router
from cli.commands.pentest import router as pentest_router
from cli.commands.scenario import router as scenario_router

# Every command group contributes its verbs at the top level: pksim run, pksim scan, ...
cli_router = click.CommandCollection(
    name="pksim",
    help="PKS kernel compartmentalization simulator.",
    sources=[scenario_router, pentest_router, bench_router, partition_router, deprivilege_router],
)
