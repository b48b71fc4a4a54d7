import json
from pathlib import Path
from typing import Optional

import click

from cli.boundary import EXIT_FINDINGS, EXIT_OK, command_boundary
from config import config
from pksim.deprivilege.equivalence import verify_equivalence
from pksim.deprivilege.rewriter import GateStubSpec, read_sidecar, rewrite
from pksim.deprivilege.scanner import report, scan
from pksim.errors import LoadError
from pksim.isa.listing import listing
from pksim.logger import setup_logger

logger = setup_logger()

router = click.Group()

CODE_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
STUBS_SUFFIX = ".stubs.json"


def _address(ctx, param, value):
    if value is None or isinstance(value, int):
        return value
    try:
        return int(value, 0)
    except ValueError:
        raise click.BadParameter(f"not an address: {value}")


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise LoadError(f"cannot read {path}: {e}") from e


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + STUBS_SUFFIX)


@router.command("scan", help="List privileged byte sequences: offset, bytes, classification.")
@click.argument("file", type=CODE_FILE)
@command_boundary
def scan_command(file: Path) -> int:
    occurrences = scan(_read(file))
    click.echo(report(occurrences), nl=False)
    logger.info(f"Scanned {file}: {len(occurrences)} occurrence(s)")
    return EXIT_FINDINGS if occurrences else EXIT_OK


@router.command("rewrite", help="Rewrite a code file until no privileged sequence is left.")
@click.argument("source", type=CODE_FILE)
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--stub", callback=_address, default=hex(config.rewriter.stub_base), show_default=True,
              help="Base address of the gate stub table")
@click.option("--base", callback=_address, default=hex(config.rewriter.program_base), show_default=True,
              help="Load address of the program")
@command_boundary
def rewrite_command(source: Path, out: Path, stub: int, base: int) -> int:
    code, plan = rewrite(_read(source), GateStubSpec(stub), base_address=base)
    try:
        out.write_bytes(code)
        sidecar_path(out).write_text(json.dumps(plan.sidecar(base), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise LoadError(f"cannot write {out}: {e}") from e
    click.echo(plan.report(), nl=False)
    click.echo(f"wrote {len(code)} bytes to {out} ({sidecar_path(out).name})")
    return EXIT_OK


@router.command("verify", help="Compare two programs on random initial states.")
@click.argument("original", type=CODE_FILE)
@click.argument("rewritten", type=CODE_FILE)
@click.option("--runs", type=click.IntRange(min=1), default=config.harness.verify_runs, show_default=True)
@click.option("--seed", type=int, default=config.harness.default_seed, show_default=True)
@click.option("--stubs", "stubs_file", type=CODE_FILE, default=None,
              help=f"Stub sidecar of the rewritten program (default: <rewritten>{STUBS_SUFFIX} if present)")
@command_boundary
def verify_command(original: Path, rewritten: Path, runs: int, seed: int, stubs_file: Optional[Path]) -> int:
    base, stubs, scratch = config.rewriter.program_base, {}, set()
    stubs_file = stubs_file or (sidecar_path(rewritten) if sidecar_path(rewritten).exists() else None)
    if stubs_file is not None:
        try:
            data = json.loads(stubs_file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise LoadError(f"cannot read stub sidecar {stubs_file}: {e}") from e
        base, stubs, scratch = read_sidecar(data)
    verdict = verify_equivalence(_read(original), _read(rewritten), runs, stubs=stubs, scratch=scratch,
                                 seed=seed, base_address=base)
    if verdict.ok:
        click.echo(f"Pass ({runs} runs, seed {seed})")
        return EXIT_OK
    click.echo(f"Counterexample: {verdict.value.describe()}")
    return EXIT_FINDINGS


@router.command("listing", help="Disassemble a code file.")
@click.argument("file", type=CODE_FILE)
@click.option("--base", callback=_address, default="0", show_default=True, help="Address of the first byte")
@command_boundary
def listing_command(file: Path, base: int) -> int:
    for line in listing(_read(file), base):
        click.echo(line)
    return EXIT_OK
