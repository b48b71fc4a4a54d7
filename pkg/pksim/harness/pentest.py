"""
Penetration suite: six attacks a compromised module (or core kernel) can try.
Each attack records the verdict of every attempt; any attempt that gets through is
a breach. Running the suite with one defense switched off shows which attacks that
defense stops.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from tqdm import tqdm

from config import config
from pksim.errors import NotMonitor, SwitchFault
from pksim.harness.boot import System, boot
from pksim.harness.fixtures import ATTACKER, LENGTH_RANGE, OPCODE_RANGE, REMOTE, REQUEST, VICTIM, pentest_policy
from pksim.harness.metrics import TimeMetric
from pksim.harness.report import Report
from pksim.harness.runner import run_outcome
from pksim.isa.encoder import assemble, call, mov_cr_r, mov_imm, wrmsr
from pksim.isa.instr import RAX, RCX, RDI, RDX
from pksim.logger import setup_logger
from pksim.machine import Defenses
from pksim.mmu import PAGE_SIZE, READ, WRITE, PageDescriptor
from pksim.monitor import PrivilegedOp
from pksim.policy.model import CompiledPolicy
from pksim.sgt import START_STEPS, STEPS, adversarial_start, data_probe, switch

logger = setup_logger()

KEYS = ("P1", "P2", "P3", "P4", "P5", "P6")
# Attacker-chosen PKRS: every pkey open
ALL_OPEN = 0
UNREGISTERED_GATE = 1000


@dataclass
class Attempt:
    description: str
    observed: str
    breach: bool

    def line(self) -> str:
        return f"    {'BREACH' if self.breach else 'held  '} {self.description}: {self.observed}"


@dataclass
class PentestResult:
    key: str
    title: str
    attempts: List[Attempt] = field(default_factory=list)

    @property
    def breach(self) -> bool:
        return any(a.breach for a in self.attempts)

    @property
    def verdict(self) -> str:
        return "breach" if self.breach else "contained"

    def record(self, description: str, observed: str, breach: bool) -> None:
        self.attempts.append(Attempt(description, observed, breach))
        if breach:
            logger.warning(f"{self.key} breach: {description}: {observed}")

    def summary(self) -> str:
        held = sum(1 for a in self.attempts if not a.breach)
        return f"{self.key} {self.title}: {self.verdict} ({held}/{len(self.attempts)} attempts held)"


def _denied(observed: str) -> bool:
    return observed.startswith(("deny", "trap", "rejected", "denied", "fault"))


# --- P1: another compartment's heap object ---

def modify_foreign_heap(system: System) -> PentestResult:
    result = PentestResult("P1", "modify another compartment's heap object")
    victim = system.compartment(VICTIM)
    heap = system.monitor.alloc_heap(victim)
    system.become(ATTACKER)
    for description, address, kind in (
        ("write victim heap", heap.start + 64, WRITE),
        ("read victim heap", heap.start, READ),
        ("write victim data", victim.data.start, WRITE),
        ("write victim stack", victim.stack.start + PAGE_SIZE - 8, WRITE),
    ):
        observed = str(system.machine.attempt(address, kind, b"\x41" * 8))
        result.record(description, observed, not _denied(observed))
    return result


# --- P2: tamper with page tables and other monitor state ---

def tamper_page_tables(system: System) -> PentestResult:
    result = PentestResult("P2", "tamper with the page tables directly")
    machine = system.machine
    mmu = machine.mmu
    table_pages = sorted(mmu.ptmap.values())
    protected = [("page-table frame", table_pages[0]), ("last page-table frame", table_pages[-1]),
                 ("gate table", sorted(system.sgt.pages.values())[0]),
                 ("saved PKRS", system.monitor.save_pages[machine.current_tid])]
    for actor in (ATTACKER, "core"):
        system.become(actor)
        for description, address in protected:
            # Writing back what is there keeps the machine intact if the write goes through
            frame, offset = mmu.physical_address(address)
            original = mmu.physical.read(frame, offset, 4)
            observed = str(machine.attempt(address, WRITE, original))
            result.record(f"{actor} writes {description}", observed, not _denied(observed))

    system.become(ATTACKER)
    victim = system.compartment(VICTIM)
    try:
        mmu.map_page(victim.data.start, PageDescriptor(frame=victim.data.frames[0],
                                                       pkey=system.compartment(ATTACKER).pkey), ATTACKER)
        result.record("map victim data without monitor authority", "executed", True)
    except NotMonitor:
        result.record("map victim data without monitor authority", "rejected(NotMonitor)", False)
    return result


# --- P3: forge page tables through CR3 ---

def forge_cr3(system: System) -> PentestResult:
    result = PentestResult("P3", "forge page tables by writing CR3")
    machine = system.machine
    attacker = system.compartment(ATTACKER)
    # Pretend the attacker's own data page is a page directory
    forged = (attacker.data.frames[0] << config.machine.page_shift) | 1
    system.become(ATTACKER)
    before = machine.regs.cr[3]
    program = assemble([mov_imm(RAX, forged), mov_cr_r(3, RAX)], attacker.code_address())
    observed = run_outcome(system.run_program(ATTACKER, program))
    result.record("mov cr3 from module code", observed, machine.regs.cr[3] != before or not _denied(observed))

    verdict = system.monitor.call(PrivilegedOp("write_cr3", {"value": forged}), attacker)
    result.record("delegate forged cr3", str(verdict), verdict.ok)

    remote = machine.mmu.space(system.compartment(REMOTE).asid).cr3
    verdict = system.monitor.call(PrivilegedOp("write_cr3", {"value": remote}), attacker)
    result.record("delegate registered cr3 outside a gate", str(verdict), verdict.ok)
    return result


# --- P4: write PKRS directly ---

def write_pkrs(system: System) -> PentestResult:
    result = PentestResult("P4", "update PKRS directly")
    machine = system.machine
    attacker = system.compartment(ATTACKER)
    msr = [mov_imm(RCX, config.machine.pkrs_msr), mov_imm(RAX, ALL_OPEN), mov_imm(RDX, 0)]

    program = assemble(msr + [wrmsr()], attacker.code_address())
    observed = run_outcome(system.run_program(ATTACKER, program))
    result.record("wrmsr PKRS from module code", observed, machine.regs.pkrs == ALL_OPEN or not _denied(observed))

    verdict = system.monitor.call(PrivilegedOp("write_pkrs", {"value": ALL_OPEN}), attacker)
    result.record("delegate unregistered PKRS", str(verdict), verdict.ok)

    # Look for a wrmsr gadget in monitor code, then jump to it
    monitor_code = system.compartment("monitor").code.start
    system.become(ATTACKER)
    observed = str(machine.attempt(monitor_code, READ, b"\x00" * 8))
    result.record("read monitor code for gadgets", observed, not _denied(observed))

    program = assemble([mov_imm(RAX, ALL_OPEN), mov_imm(RDX, 0), call(abs_target=monitor_code)],
                       attacker.code_address())
    observed = run_outcome(system.run_program(ATTACKER, program))
    result.record("jump to monitor wrmsr gadget", observed, machine.regs.pkrs == ALL_OPEN or not _denied(observed))
    return result


# --- P5: abuse the switch gate ---

def abuse_switch_gate(system: System, show_progress: bool = False) -> PentestResult:
    result = PentestResult("P5", "abuse the switch gate")
    machine = system.machine
    ids = sorted(e.gate_id for e in system.sgt.entries())
    forged_ids = ids + [config.monitor.entry_gate, config.monitor.exit_gate, UNREGISTERED_GATE]
    forged_pkrs = sorted({ALL_OPEN, *system.sgt.target_pkrs_values()})

    runs = [(start, gate_id, value) for start in START_STEPS for gate_id in forged_ids for value in forged_pkrs]
    breaches = 0
    for start, gate_id, value in tqdm(runs, desc="P5 adversarial starts", disable=not show_progress):
        system.become(ATTACKER)
        outcome = adversarial_start(machine, start, {RDI: gate_id, RAX: value})
        if outcome.breach:
            breaches += 1
            result.record(f"start {start} gate {gate_id} rax {value:#x}",
                          f"pkrs {outcome.trace.pkrs:#x} ip {outcome.trace.ip:#x}", True)
    result.record(f"{len(runs)} adversarial starts", f"{len(runs) - breaches} contained", False)

    # Interrupts at every micro-step; the handler tries to read the target's data
    probed = 0
    for entry in system.sgt.entries():
        target = system.compartment(entry.tgt.compartment)
        if target.kind != "module":
            continue
        for step in STEPS:
            system.become(entry.src.compartment, entry.src.address)
            try:
                trace = switch(machine, entry.gate_id, step, data_probe(target))
            except SwitchFault as e:
                result.record(f"gate {entry.gate_id} interrupted before {step}", f"fault({e.reason})", False)
                continue
            for probe in trace.interrupts:
                probed += 1
                if probe.verdict:
                    result.record(f"handler read of {target.name} before {step} (gate {entry.gate_id})",
                                  str(probe.verdict), True)
    result.record(f"{probed} interrupt handler probes", "checked", False)
    return result


# --- P6: malicious data through an interface ---

def malicious_transfer(system: System) -> PentestResult:
    result = PentestResult("P6", "pass malicious data through interfaces")
    machine = system.machine
    address = system.objects[REQUEST]
    cases = [
        ("opcode above range", OPCODE_RANGE[1] + 1, LENGTH_RANGE[0], True),
        ("length zero", OPCODE_RANGE[0], LENGTH_RANGE[0] - 1, True),
        ("length past buffer", OPCODE_RANGE[0], LENGTH_RANGE[1] + 1, True),
        ("well-formed request", OPCODE_RANGE[1], LENGTH_RANGE[1], False),
    ]
    for description, opcode, length, malicious in cases:
        system.become(ATTACKER)
        payload = opcode.to_bytes(4, "little") + length.to_bytes(4, "little")
        # Only the last case hands the page over, so the attacker still owns it here
        machine.attempt(address, WRITE, payload)
        system.become(VICTIM)
        mark = machine.audit.mark()
        machine.attempt(address, READ)
        events = [e for e in machine.audit.since(mark) if e.kind == "transfer"]
        # No transfer event: the victim already owned the page
        observed = events[-1].verdict if events else "owned"
        if malicious:
            result.record(description, observed, observed == "resumed")
        else:
            # A legitimate transfer must still go through
            result.record(description, observed, False)
            if observed != "resumed":
                logger.warning(f"P6 legitimate transfer was not resumed: {observed}")
    return result


ATTACKS: Dict[str, Callable[[System], PentestResult]] = {
    "P1": modify_foreign_heap,
    "P2": tamper_page_tables,
    "P3": forge_cr3,
    "P4": write_pkrs,
    "P5": abuse_switch_gate,
    "P6": malicious_transfer,
}


def run_pentest(key: str, defenses: Optional[Defenses] = None,
                policy: Optional[CompiledPolicy] = None) -> PentestResult:
    """One attack on a freshly booted pentest system."""
    system = boot(policy or pentest_policy(), defenses)
    logger.info(f"Pentest {key}: defenses off: {', '.join(system.defenses.disabled()) or 'none'}")
    result = ATTACKS[key](system)
    logger.info(result.summary())
    return result


def pentest_suite(defenses: Optional[Defenses] = None) -> List[PentestResult]:
    """P1..P6 in order; every result must be contained when all defenses are on."""
    policy = pentest_policy()
    return [run_pentest(key, defenses, policy) for key in KEYS]


def defense_necessity(show_progress: bool = False) -> Dict[str, List[str]]:
    """Defense name -> keys of the attacks that breach once that defense alone is off."""
    policy = pentest_policy()
    out: Dict[str, List[str]] = {}
    for name in tqdm(Defenses.names(), desc="Defense necessity", disable=not show_progress):
        results = [run_pentest(key, Defenses().without(name), policy) for key in KEYS]
        out[name] = [r.key for r in results if r.breach]
        logger.info(f"Without {name}: breached {', '.join(out[name]) or 'nothing'}")
    return out


def suite_report(results: List[PentestResult], necessity: Optional[Dict[str, List[str]]] = None,
                 seed: int = config.harness.default_seed) -> Report:
    report = Report("pentest suite", seed)
    for r in results:
        report.add(r.summary())
        report.lines += [a.line() for a in r.attempts]
        report.row("pentest", r.key, "verdict", r.verdict)
        report.row("pentest", r.key, "attempts", len(r.attempts))
        report.row("pentest", r.key, "breaches", sum(1 for a in r.attempts if a.breach))
    report.failed = any(r.breach for r in results)
    if necessity is not None:
        report.add("")
        report.add("defense necessity (attacks breached with only that defense off):")
        for name, keys in necessity.items():
            report.add(f"  {name}: {', '.join(keys) or 'NONE'}")
            report.row("necessity", name, "breached", " ".join(keys) or "none")
        if any(not keys for keys in necessity.values()):
            report.failed = True
    return report


def run_suite(with_necessity: bool = True, show_progress: bool = False) -> Tuple[List[PentestResult], Report]:
    timer = TimeMetric().start()
    results = pentest_suite()
    necessity = defense_necessity(show_progress) if with_necessity else None
    report = suite_report(results, necessity)
    timer.stop()
    breached = [r.key for r in results if r.breach]
    logger.info(f"Suite complete: {len(results) - len(breached)}/{len(results)} contained"
                + (f", breached: {', '.join(breached)}" if breached else ""))
    return results, report
