"""
Executes a loaded scenario against a freshly booted system, one action at a time,
and compares each observed verdict with the expected one.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

from pksim.deprivilege.rewriter import GateStubSpec, rewrite
from pksim.errors import (
    AccessFault, ExpectationMismatch, LoadError, MonitorRejected, PksimError, PoolExhausted, PrivilegeTrap,
    SwitchFault,
)
from pksim.harness.boot import System, boot
from pksim.harness.metrics import Metrics, capture, live_metrics, logged_metrics
from pksim.harness.persistence import AUDIT_FILE, TRACE_FILE, save_report
from pksim.harness.report import Report
from pksim.harness.scenario import Action, LoadedScenario, Target, load_scenario
from pksim.isa.instr import REG64, RDI
from pksim.isa.interpreter import RunResult
from pksim.logger import setup_logger
from pksim.machine import Defenses
from pksim.monitor import PrivilegedOp
from pksim.sgt import SwitchTrace, adversarial_start, data_probe, register_gate, switch

logger = setup_logger()

BOOT_AUDIT_FILE = "boot-audit.log"


@dataclass
class Outcome:
    index: int
    action: str
    observed: str
    expected: Optional[str] = None
    detail: str = ""

    @property
    def matches(self) -> bool:
        return self.expected is None or self.expected == self.observed

    def line(self) -> str:
        text = f"[{self.index}] {self.action}"
        if self.detail:
            text += f" {self.detail}"
        text += f": {self.observed}"
        if not self.matches:
            text += f"  MISMATCH expected {self.expected}"
        return text


@dataclass
class ScenarioResult:
    name: str
    seed: int
    outcomes: List[Outcome]
    metrics: Metrics
    logged: Metrics
    report: Report
    audit: str = ""
    trace: str = ""
    boot_audit: str = ""
    saved_to: Optional[Path] = None

    @property
    def mismatches(self) -> List[Outcome]:
        return [o for o in self.outcomes if not o.matches]

    @property
    def trace_complete(self) -> bool:
        return self.metrics == self.logged

    def raise_for_mismatch(self) -> None:
        if self.mismatches:
            lines = "; ".join(o.line() for o in self.mismatches)
            raise ExpectationMismatch(f"{self.name}: {len(self.mismatches)} unexpected verdicts: {lines}")


def run_outcome(result: RunResult) -> str:
    """Verdict string of a program run."""
    if result.status != "fault":
        return result.status
    fault = result.fault
    if isinstance(fault, PrivilegeTrap):
        return f"trap({fault.opcode})"
    if isinstance(fault, AccessFault):
        return f"deny({fault.reason})"
    if isinstance(fault, MonitorRejected):
        return f"rejected({fault.reason})"
    return f"fault({type(fault).__name__})"


class ScenarioRunner:
    def __init__(self, loaded: LoadedScenario, defenses: Optional[Defenses] = None):
        self.loaded = loaded
        self.scenario = loaded.scenario
        self.system: System = boot(loaded.policy, defenses)
        self.machine = self.system.machine
        self.monitor = self.system.monitor
        self.switches: List[SwitchTrace] = []

    # --- Addresses ---

    def address(self, target: Target) -> int:
        s = self.system
        if target.compartment is not None:
            c = s.compartment(target.compartment)
            if target.region in ("heap", "jit"):
                pages = c.heap if target.region == "heap" else c.jit
                if target.index >= len(pages):
                    raise LoadError(f"{c.name} has {len(pages)} {target.region} pages, index {target.index}")
                base = pages[target.index].start
            else:
                base = getattr(c, target.region).start
        elif target.object is not None:
            base = s.objects[target.object]
        elif target.page_table is not None:
            frames = sorted(self.machine.mmu.ptmap.values())
            base = frames[target.page_table % len(frames)]
        elif target.save_area is not None:
            base = self.monitor.save_pages[target.save_area]
        elif target.gate_table:
            base = sorted(s.sgt.pages.values())[0]
        else:
            base = target.address
        return base + target.offset

    def _arg(self, value):
        """Operation arguments may name values: 'pkrs:<compartment>', 'cr3:<asid>', 'gate:<name>'."""
        if not isinstance(value, str):
            return value
        kind, _, name = value.partition(":")
        if kind == "pkrs":
            return self.system.compartment(name).pkrs
        if kind == "cr3":
            return self.machine.mmu.space(int(name)).cr3
        if kind == "gate":
            return self.system.gate_ids(name)[0]
        return int(value, 0)

    def _probe(self, action: Action):
        return data_probe(self.system.compartment(action.probe)) if action.probe else None

    # --- Actions ---

    def _become(self, action: Action) -> str:
        self.system.become(action.compartment)
        return "ok"

    def _run_program(self, action: Action) -> str:
        code = bytes.fromhex(action.code)
        return run_outcome(self.system.run_program(action.compartment, code, action.offset))

    def _run_rewritten(self, action: Action) -> str:
        c = self.system.compartment(action.compartment)
        code, plan = rewrite(bytes.fromhex(action.code), GateStubSpec(self.system.stub_base),
                             base_address=c.code_address(action.offset))
        self.system.install_stubs(plan.stubs)
        return run_outcome(self.system.run_program(action.compartment, code, action.offset))

    def _switch(self, action: Action, which: int) -> str:
        gate_id = self.system.gate_ids(action.gate)[which]
        try:
            trace = switch(self.machine, gate_id, action.interrupt_before, self._probe(action))
        except SwitchFault as e:
            return f"fault({e.reason})"
        self.switches.append(trace)
        if trace.interrupts:
            return f"executed probe={trace.interrupts[0].verdict}"
        return "executed"

    def _call_gate(self, action: Action) -> str:
        return self._switch(action, 0)

    def _return_gate(self, action: Action) -> str:
        return self._switch(action, 1)

    def _interrupt(self, action: Action) -> str:
        self.monitor.interrupt_entry()
        try:
            verdict = self._probe(action)(self.machine) if action.probe else None
        finally:
            self.monitor.interrupt_exit()
        return str(verdict) if verdict is not None else "ok"

    def _adversarial_start(self, action: Action) -> str:
        forged = {REG64.index(name): value for name, value in sorted(action.registers.items())}
        if action.gate is not None and RDI not in forged:
            forged[RDI] = self.system.gate_ids(action.gate)[0]
        outcome = adversarial_start(self.machine, action.start_step, forged,
                                    action.interrupt_before, self._probe(action))
        return "breach" if outcome.breach else "contained"

    def _access(self, action: Action) -> str:
        if action.compartment is not None:
            self.system.become(action.compartment)
        data = bytes.fromhex(action.data) if action.data else b"\x00" * 4
        return str(self.machine.attempt(self.address(action.target), action.kind, data))

    def _monitor_call(self, action: Action) -> str:
        caller = self.system.compartment(action.compartment) if action.compartment else None
        args = {key: self._arg(value) for key, value in action.args.items()}
        return str(self.monitor.call(PrivilegedOp(action.op, args), caller))

    def _register_gate(self, action: Action) -> str:
        verdict = register_gate(self.machine, action.spec, action.requester)
        if verdict:
            self.system.gates[action.spec.name] = verdict.value
        return str(verdict)

    def _jit_update(self, action: Action) -> str:
        c = self.system.compartment(action.compartment)
        if action.target is not None:
            address = self.address(action.target)
        else:
            address = c.jit[action.index].start + action.offset
        return str(self.monitor.jit_update(address, bytes.fromhex(action.data), c))

    def _alloc_heap(self, action: Action) -> str:
        try:
            self.monitor.alloc_heap(self.system.compartment(action.compartment), action.pages)
        except PoolExhausted:
            return "error(PoolExhausted)"
        return "executed"

    def _spawn(self, action: Action) -> str:
        return f"tid={self.system.spawn(action.compartment).tid}"

    def _context_switch(self, action: Action) -> str:
        self.monitor.context_switch(action.tid)
        return "ok"

    def perform(self, action: Action) -> str:
        if action.action == "run_program" and action.rewrite:
            return self._run_rewritten(action)
        return getattr(self, f"_{action.action}")(action)

    # --- Whole scenario ---

    def _setup(self) -> None:
        for init in self.scenario.memory:
            owner = init.target.compartment
            asid = self.system.compartment(owner).asid if owner else None
            self.machine.load_bytes(self.address(init.target), bytes.fromhex(init.data), asid)
        for spec in self.scenario.gates:
            verdict = register_gate(self.machine, spec)
            if not verdict:
                raise LoadError(f"scenario gate {spec.name} rejected: {verdict.reason} {verdict.detail}")
            self.system.gates[spec.name] = verdict.value

    def run(self) -> ScenarioResult:
        scenario = self.scenario
        logger.info(f"Running scenario: {scenario.name} ({len(scenario.script)} actions, seed {scenario.seed})")
        self._setup()
        baseline = capture(self.machine)

        outcomes: List[Outcome] = []
        for i, action in enumerate(scenario.script):
            observed = self.perform(action)
            detail = action.gate or action.compartment or action.op or ""
            outcome = Outcome(i, action.action, observed, action.expect, detail)
            outcomes.append(outcome)
            if outcome.matches:
                logger.debug(outcome.line())
            else:
                logger.warning(outcome.line())

        metrics = live_metrics(self.machine, baseline, self.switches)
        logged = logged_metrics(self.machine, baseline)

        report = Report(f"scenario {scenario.name}", scenario.seed)
        report.lines += [o.line() for o in outcomes]
        report.add("")
        report.add("metrics:")
        report.add_metrics("scenario", scenario.name, metrics)
        complete = metrics == logged
        report.add(f"trace completeness: {'ok' if complete else 'MISMATCH'}")
        mismatches = sum(1 for o in outcomes if not o.matches)
        report.row("scenario", scenario.name, "actions", len(outcomes))
        report.row("scenario", scenario.name, "mismatches", mismatches)
        report.failed = bool(mismatches) or not complete

        result = ScenarioResult(
            scenario.name, scenario.seed, outcomes, metrics, logged, report,
            audit="".join(e.line(True) + "\n" for e in self.machine.audit.since(baseline.audit_mark)),
            trace="".join(e.line() + "\n" for e in self.machine.trace.since(baseline.trace_mark)),
            boot_audit="".join(e.line(True) + "\n" for e in list(self.machine.audit)[:baseline.audit_mark]),
        )
        if not complete:
            logger.error(f"Scenario {scenario.name}: live counters {metrics.get_metrics()} differ from "
                         f"log-derived {logged.get_metrics()}")
        logger.info(f"Verdict summary: {len(outcomes) - mismatches}/{len(outcomes)} as expected")
        return result


def run_scenario(source: Union[Path, str, LoadedScenario], defenses: Optional[Defenses] = None,
                 save: bool = True, report_dir: Optional[Path] = None) -> ScenarioResult:
    """
    Loads (if needed) and runs a scenario, saving report, table and logs.
    Raises LoadError; mismatches are reported, see ScenarioResult.raise_for_mismatch.
    """
    loaded = source if isinstance(source, LoadedScenario) else load_scenario(Path(source))
    try:
        result = ScenarioRunner(loaded, defenses).run()
    except (LoadError, ExpectationMismatch):
        raise
    except PksimError as e:
        raise LoadError(f"scenario {loaded.name} failed: {e}") from e
    if save:
        result.saved_to = save_report(
            loaded.name, result.report,
            {AUDIT_FILE: result.audit, TRACE_FILE: result.trace, BOOT_AUDIT_FILE: result.boot_audit},
            report_dir)
    return result
