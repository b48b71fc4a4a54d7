"""
Switch-cost bench: call rings over generated compartment populations, measured in
micro-steps and transition counts rather than time.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError
from tqdm import tqdm

from config import config
from pksim.errors import LoadError
from pksim.harness.boot import boot
from pksim.harness.fixtures import population_policy
from pksim.harness.metrics import CROSS, INTRA, Metrics, TimeMetric, capture, live_metrics, logged_metrics
from pksim.harness.report import Report
from pksim.logger import setup_logger
from pksim.monitor import PrivilegedOp
from pksim.sgt import SwitchTrace, switch

logger = setup_logger()

PATTERNS = ("intra", "cross", "monitor_heavy")
MONITOR_SHARE_FLOOR = 0.9


class Workload(BaseModel):
    name: str = Field("default", description="Workload name shown in the report")
    patterns: List[Literal["intra", "cross", "monitor_heavy"]] = Field(
        list(PATTERNS), description="Call patterns to run")
    populations: List[int] = Field([4, 20, 160], description="Total module counts to generate")
    calls: int = Field(config.harness.bench_calls, ge=1, description="Gate calls per run")
    ring_size: int = Field(4, ge=2, description="Compartments taking part in the ring")
    updates_per_call: int = Field(config.harness.monitor_heavy_updates, ge=0,
                                  description="Page-table updates a callee asks for in the monitor-heavy pattern")
    use_pcid: bool = Field(config.machine.use_pcid, description="Tag TLB entries with ASIDs")
    seed: int = Field(config.harness.default_seed, description="Seed of the generated dependency graphs")


BUILTIN_WORKLOADS: Dict[str, Workload] = {
    "all": Workload(name="all"),
    "intra-ring": Workload(name="intra-ring", patterns=["intra"]),
    "cross-ring": Workload(name="cross-ring", patterns=["cross"], populations=[20, 160]),
    "monitor-heavy": Workload(name="monitor-heavy", patterns=["monitor_heavy"]),
    "no-pcid": Workload(name="no-pcid", patterns=["intra", "cross"], populations=[20], use_pcid=False),
}


def load_workload(spec: str) -> Workload:
    """A built-in workload name or a JSON workload file."""
    if spec in BUILTIN_WORKLOADS:
        return BUILTIN_WORKLOADS[spec]
    path = Path(spec)
    try:
        return Workload.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise LoadError(f"workload {spec} is neither built in ({', '.join(BUILTIN_WORKLOADS)}) "
                        f"nor a readable workload file: {e}") from e


@dataclass
class RingRun:
    pattern: str
    population: int
    ring: List[str]
    metrics: Metrics
    trace_complete: bool

    @property
    def skipped(self) -> bool:
        return not self.ring


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"  [{'ok' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class BenchResult:
    workload: Workload
    runs: List[RingRun] = field(default_factory=list)
    checks: List[Check] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(not c.passed for c in self.checks)

    def run(self, pattern: str, population: int) -> Optional[RingRun]:
        for r in self.runs:
            if r.pattern == pattern and r.population == population and not r.skipped:
                return r
        return None


def run_ring(pattern: str, population: int, workload: Workload) -> RingRun:
    """Boots a population and drives workload.calls switches around its ring."""
    cross = pattern == "cross"
    policy, ring = population_policy(population, cross=cross, ring_size=workload.ring_size, seed=workload.seed)
    if not ring:
        logger.info(f"Bench {pattern}/{population}: no ring possible in {len(policy.spaces)} address space(s)")
        return RingRun(pattern, population, [], Metrics(), True)

    system = boot(policy, use_pcid=workload.use_pcid)
    machine = system.machine
    system.become(ring[0])
    baseline = capture(machine)

    traces: List[SwitchTrace] = []
    for i in range(workload.calls):
        src, tgt = ring[i % len(ring)], ring[(i + 1) % len(ring)]
        traces.append(switch(machine, system.gate_ids(f"{src}->{tgt}")[0]))
        if pattern == "monitor_heavy":
            callee = system.compartment(tgt)
            for _ in range(workload.updates_per_call):
                verdict = system.monitor.call(PrivilegedOp("pt_update", {"vaddr": callee.data.start}), callee)
                if not verdict:
                    logger.warning(f"Bench page-table update by {tgt} rejected: {verdict.reason}")

    live = live_metrics(machine, baseline, traces)
    logged = logged_metrics(machine, baseline)
    return RingRun(pattern, population, ring, live, live == logged)


def _checks(result: BenchResult) -> List[Check]:
    workload = result.workload
    checks: List[Check] = []
    for pattern, kind in (("intra", INTRA), ("cross", CROSS), ("monitor_heavy", INTRA)):
        runs = [r for r in result.runs if r.pattern == pattern and not r.skipped]
        if not runs:
            continue
        steps = {r.population: r.metrics.steps_per_switch(kind) for r in runs}
        checks.append(Check(f"{pattern} steps independent of population", len(set(steps.values())) == 1,
                            ", ".join(f"{p}: {s}" for p, s in sorted(steps.items()))))

    deltas: List[Tuple[int, int]] = []
    for population in workload.populations:
        intra, cross = result.run("intra", population), result.run("cross", population)
        if intra and cross:
            deltas.append((population, cross.metrics.steps_per_switch(CROSS) - intra.metrics.steps_per_switch(INTRA)))
    if deltas:
        constant = {d for _, d in deltas}
        checks.append(Check("cross-space switch = intra-space switch + constant",
                            len(constant) == 1 and min(constant) > 0,
                            ", ".join(f"{p}: +{d}" for p, d in deltas)))

    for r in result.runs:
        if r.pattern == "cross" and not r.skipped and workload.use_pcid:
            checks.append(Check(f"no TLB flush across ASID switches ({r.population})", r.metrics.tlb_flushes == 0,
                                f"flushes={r.metrics.tlb_flushes}"))
        if r.pattern == "monitor_heavy" and not r.skipped:
            share = r.metrics.monitor_share()
            checks.append(Check(f"monitor transitions dominate ({r.population})", share > MONITOR_SHARE_FLOOR,
                                f"share={share:.4f}"))
        if not r.skipped:
            checks.append(Check(f"counters match the logs ({r.pattern}/{r.population})", r.trace_complete,
                                "live == recomputed" if r.trace_complete else "differ"))
    return checks


def bench(workload: Workload, show_progress: bool = False) -> BenchResult:
    logger.info(f"Bench workload: {workload.name} patterns={workload.patterns} populations={workload.populations}")
    timer = TimeMetric().start()
    result = BenchResult(workload)
    plan = [(p, n) for p in workload.patterns for n in workload.populations]
    for pattern, population in tqdm(plan, desc=f"Bench {workload.name}", disable=not show_progress):
        run = run_ring(pattern, population, workload)
        result.runs.append(run)
        if not run.skipped:
            logger.debug(f"Bench {pattern}/{population}: {run.metrics.get_metrics()}")
    result.checks = _checks(result)
    timer.stop()
    failed = [c.name for c in result.checks if not c.passed]
    logger.info(f"Verdict summary: {len(result.checks) - len(failed)}/{len(result.checks)} bench checks hold"
                + (f", failing: {'; '.join(failed)}" if failed else ""))
    return result


def bench_report(result: BenchResult) -> Report:
    workload = result.workload
    report = Report(f"bench {workload.name}", workload.seed)
    report.add(f"calls per run: {workload.calls}, ring size: {workload.ring_size}, pcid: {workload.use_pcid}")
    for r in result.runs:
        report.add("")
        if r.skipped:
            report.add(f"{r.pattern} / {r.population} compartments: skipped (needs two address spaces)")
            report.row("bench", f"{r.pattern}/{r.population}", "skipped", "true")
            continue
        report.add(f"{r.pattern} / {r.population} compartments, ring {' -> '.join(r.ring)}")
        report.add_metrics("bench", f"{r.pattern}/{r.population}", r.metrics)
    report.add("")
    report.add("checks:")
    report.lines += [c.line() for c in result.checks]
    for c in result.checks:
        report.row("check", c.name, "passed", str(c.passed).lower())
    report.failed = result.failed
    return report
