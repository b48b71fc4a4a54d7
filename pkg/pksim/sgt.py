"""
Switch-gate table and the switch micro-sequence.

Entries live in 64-byte slots on monitor pages, one slot per gate id:

    u32 gate_id | u32 flags (bit 0 valid, bit 1 stack switch, bit 2 monitor gate)
    src: compartment, pgdir, asid, address, pkrs, stack pointer
    tgt: compartment, pgdir, asid, address, pkrs, stack pointer
    u32 reserved x 2

The sequence reads the table through physical memory every time (S1 and the S5
re-read), so a forged register can only select another registered entry.
"""
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from config import config
from pksim.errors import NotMonitor, SwitchFault
from pksim.isa.instr import RAX, RDI, RSP
from pksim.logger import setup_logger
from pksim.machine import Compartment, Machine
from pksim.mmu import PAGE_SIZE, READ, AccessVerdict, format_pkrs
from pksim.monitor import Monitor, PrivilegedOp
from pksim.policy.model import GateSpec
from pksim.verdicts import DUPLICATE_GATE, MALFORMED_METADATA, TRANSITION_NOT_ALLOWED, Executed, Rejected, Verdict

logger = setup_logger()

ENTRY_FORMAT = struct.Struct("<16I")
SLOT_SIZE = ENTRY_FORMAT.size
SLOTS_PER_PAGE = PAGE_SIZE // SLOT_SIZE
MAX_GATE_ID = 1023

VALID, STACK_SWITCH, MONITOR_GATE = 1, 2, 4
MONITOR_GATES = (config.monitor.entry_gate, config.monitor.exit_gate)

STEPS = ("S1", "S2", "S3", "S4", "S5", "S6", "S7")
# Adversarial entry points; S4b is the delegated write right after the accumulator load
START_STEPS = ("S2", "S3", "S4", "S4b", "S5", "S6", "S7")


@dataclass(frozen=True)
class Endpoint:
    compartment: str
    pgdir: int
    asid: int  # 0 for the shared part
    address: int
    pkrs: int
    stack_pointer: int


@dataclass(frozen=True)
class GateEntry:
    gate_id: int
    src: Endpoint
    tgt: Endpoint
    stack_switch: bool = True
    monitor_gate: bool = False

    @property
    def cross_space(self) -> bool:
        return bool(self.src.asid and self.tgt.asid and self.src.asid != self.tgt.asid)


class SwitchGateTable:
    """Append-only table on monitor-owned pages; writes need the monitor's authority."""

    def __init__(self, monitor: Monitor):
        self.monitor = monitor
        self.machine = monitor.machine
        self.names: List[str] = []
        self.pages: Dict[int, int] = {}
        self.ids: List[int] = []
        monitor.sgt = self
        self._register_monitor_gates()

    def _index(self, name: str) -> int:
        if name not in self.names:
            self.names.append(name)
        return self.names.index(name)

    def _slot(self, gate_id: int, create: bool = False) -> Optional[Tuple[int, int]]:
        page_no, slot = divmod(gate_id, SLOTS_PER_PAGE)
        if page_no not in self.pages:
            if not create:
                return None
            self.pages[page_no] = self.monitor.monitor_page()
        frame, _ = self.machine.mmu.physical_address(self.pages[page_no])
        return frame, slot * SLOT_SIZE

    def _pack(self, e: GateEntry) -> bytes:
        flags = VALID | (STACK_SWITCH if e.stack_switch else 0) | (MONITOR_GATE if e.monitor_gate else 0)
        fields = [e.gate_id, flags]
        for ep in (e.src, e.tgt):
            fields += [self._index(ep.compartment), ep.pgdir, ep.asid, ep.address, ep.pkrs, ep.stack_pointer]
        return ENTRY_FORMAT.pack(*fields, 0, 0)

    def _unpack(self, raw: bytes) -> Optional[GateEntry]:
        f = ENTRY_FORMAT.unpack(raw)
        if not f[1] & VALID:
            return None
        src = Endpoint(self.names[f[2]], *f[3:8])
        tgt = Endpoint(self.names[f[8]], *f[9:14])
        return GateEntry(f[0], src, tgt, bool(f[1] & STACK_SWITCH), bool(f[1] & MONITOR_GATE))

    def write(self, entry: GateEntry, actor) -> None:
        if actor is not self.monitor.authority:
            self.machine.audit.record("sgt_write", str(actor), f"gate={entry.gate_id}", "deny")
            raise NotMonitor(actor, "sgt_write")
        if self.read(entry.gate_id) is not None:
            raise ValueError(f"gate {entry.gate_id} is already registered")
        frame, offset = self._slot(entry.gate_id, create=True)
        self.machine.mmu.physical.write(frame, offset, self._pack(entry))
        self.ids.append(entry.gate_id)

    def read(self, gate_id: int) -> Optional[GateEntry]:
        if not 0 <= gate_id <= MAX_GATE_ID:
            return None
        where = self._slot(gate_id)
        if where is None:
            return None
        frame, offset = where
        return self._unpack(self.machine.mmu.physical.read(frame, offset, SLOT_SIZE))

    def entries(self, include_monitor: bool = False) -> List[GateEntry]:
        out = [self.read(g) for g in sorted(self.ids)]
        return [e for e in out if include_monitor or not e.monitor_gate]

    def target_pkrs_values(self) -> Set[int]:
        return {e.tgt.pkrs for e in self.entries()}

    def endpoints(self) -> Set[Tuple[int, int, int, int]]:
        """(pkrs, asid, entry address, stack pointer) of every registered target."""
        return {(e.tgt.pkrs, e.tgt.asid, e.tgt.address, e.tgt.stack_pointer) for e in self.entries()}

    def next_free_id(self) -> int:
        gate_id = 2
        while self.read(gate_id) is not None or self.read(gate_id + 1) is not None:
            gate_id += 2
        return gate_id

    def endpoint(self, c: Compartment, address: int) -> Endpoint:
        pgdir = self.machine.mmu.space(c.asid).pgdir if c.asid is not None else 0
        return Endpoint(c.name, pgdir, c.asid or 0, address, c.pkrs, c.stack_pointer)

    def _register_monitor_gates(self) -> None:
        machine = self.machine
        core = machine.compartments.get("core")
        mon = machine.compartments.get("monitor")
        if core is None or mon is None:
            return
        entry = self.endpoint(mon, mon.code.start if mon.code else 0)
        caller = self.endpoint(core, core.code.start if core.code else 0)
        entry = Endpoint(entry.compartment, entry.pgdir, entry.asid, entry.address,
                         self.monitor.monitor_pkrs, entry.stack_pointer)
        ids = MONITOR_GATES
        self.write(GateEntry(ids[0], caller, entry, False, True), self.monitor.authority)
        self.write(GateEntry(ids[1], entry, caller, False, True), self.monitor.authority)
        machine.audit.record("register_gate", "boot", f"ids={ids[0]},{ids[1]} monitor", "executed")


# --- Registration ---

def register_gate(machine: Machine, spec: GateSpec, requester: str = "core") -> Verdict:
    """
    Registers call gate x and its return gate x+1 if the policy allows src -> tgt.
    Nothing is appended unless both entries are valid.
    """
    monitor = machine.monitor
    table: SwitchGateTable = monitor.sgt
    with monitor.session(requester):
        verdict = _check_and_register(machine, table, spec)
    machine.audit.record("register_gate", requester, f"name={spec.name} {spec.src}->{spec.tgt} {verdict.detail}",
                         str(verdict))
    if verdict:
        logger.debug(f"Registered gate pair {verdict.value} for {spec.src} -> {spec.tgt}")
    else:
        logger.warning(f"Gate registration {spec.name} rejected: {verdict.reason} {verdict.detail}")
    return verdict


def _check_and_register(machine: Machine, table: SwitchGateTable, spec: GateSpec) -> Verdict:
    src = machine.compartments.get(spec.src)
    tgt = machine.compartments.get(spec.tgt)
    if src is None or tgt is None or src is tgt:
        return Rejected(MALFORMED_METADATA, f"endpoints {spec.src}, {spec.tgt}")
    if "monitor" in (src.kind, tgt.kind):
        return Rejected(MALFORMED_METADATA, "monitor transitions use the entry/exit gates")
    if not machine.monitor.policy.allows(spec.src, spec.tgt):
        return Rejected(TRANSITION_NOT_ALLOWED, f"{spec.src}->{spec.tgt}")
    gate_id = table.next_free_id() if spec.gate_id is None else spec.gate_id
    if gate_id % 2 or gate_id + 1 > MAX_GATE_ID:
        return Rejected(MALFORMED_METADATA, f"gate id {gate_id}")
    if gate_id in MONITOR_GATES or table.read(gate_id) is not None or table.read(gate_id + 1) is not None:
        return Rejected(DUPLICATE_GATE, f"gate id {gate_id}")
    if src.code is None or tgt.code is None:
        return Rejected(MALFORMED_METADATA, "endpoint without code")
    entry_address = tgt.code.start + spec.entry_offset
    return_address = src.code.start + spec.return_offset
    if entry_address not in tgt.code or return_address not in src.code:
        return Rejected(MALFORMED_METADATA, "entry or return address outside the compartment's code")

    call_src = table.endpoint(src, return_address)
    call_tgt = table.endpoint(tgt, entry_address)
    authority = machine.monitor.authority
    table.write(GateEntry(gate_id, call_src, call_tgt, spec.stack_switch), authority)
    table.write(GateEntry(gate_id + 1, call_tgt, call_src, spec.stack_switch), authority)
    return Executed((gate_id, gate_id + 1), f"ids={gate_id},{gate_id + 1}")


# --- Switch ---

Probe = Callable[[Machine], AccessVerdict]


@dataclass
class InterruptProbe:
    step: str
    handler_pkrs: int
    verdict: AccessVerdict


@dataclass
class SwitchTrace:
    gate_id: int
    steps: List[str] = field(default_factory=list)
    cross_space: bool = False
    loopbacks: int = 0
    pkrs: int = 0
    asid: Optional[int] = None
    ip: int = 0
    stack_pointer: int = 0
    fault: Optional[SwitchFault] = None
    interrupts: List[InterruptProbe] = field(default_factory=list)

    @property
    def micro_steps(self) -> int:
        return len(self.steps)


class _Sequence:
    """One run of the switch micro-sequence on the live machine."""

    def __init__(self, machine: Machine, trace: SwitchTrace, interrupt_before: Optional[str],
                 probe: Optional[Probe]):
        self.machine = machine
        self.monitor: Monitor = machine.monitor
        self.table: SwitchGateTable = machine.monitor.sgt
        self.trace = trace
        self.interrupt_before = interrupt_before
        self.probe = probe
        self.entry: Optional[GateEntry] = None

    def _record(self, step: str, detail: str = "", verdict: str = "ok") -> None:
        self.trace.steps.append(step)
        self.machine.audit.record("switch", self.machine.actor(), f"gate={self.trace.gate_id} step={step} {detail}".strip(),
                                  verdict)
        logger.debug(f"Gate {self.trace.gate_id} {step} {detail} {verdict}")

    def _fault(self, reason: str, step: str, detail: str = "") -> None:
        self.machine.fault_counts[reason] += 1
        self.machine.audit.record("switch", self.machine.actor(), f"gate={self.trace.gate_id} step={step} {detail}".strip(),
                                  f"fault({reason})")
        raise SwitchFault(reason, step, detail)

    def _maybe_interrupt(self, step: str) -> None:
        if self.interrupt_before != step:
            return
        # The handler runs with whatever PKRS interrupt entry leaves live
        self.monitor.interrupt_entry()
        handler_pkrs = self.machine.regs.pkrs
        verdict = self.probe(self.machine) if self.probe else AccessVerdict(True)
        self.trace.interrupts.append(InterruptProbe(step, handler_pkrs, verdict))
        self.monitor.interrupt_exit()

    def _load(self) -> GateEntry:
        gate_id = self.machine.regs.read(RDI)
        entry = self.table.read(gate_id)
        if entry is None or entry.monitor_gate:
            self._fault("UnknownGate", "S1", f"id={gate_id}")
        return entry

    def run(self, start: str) -> None:
        order = ("S1", "S2", "S3", "S4", "S4b", "S5", "S6", "S7")
        for step in order[order.index(start):]:
            if step == "S4b":
                # Only reachable as an adversarial entry point; S4 already delegates
                if start == "S4b":
                    self._delegate_pkrs()
                continue
            self._maybe_interrupt(step)
            getattr(self, f"_{step.lower()}")()

    def _s1(self) -> None:
        self.entry = self._load()
        self._record("S1", f"src={self.entry.src.compartment} tgt={self.entry.tgt.compartment}")

    def _s2(self) -> None:
        e = self.entry or self._load()
        regs = self.machine.regs
        caller = self.machine.compartments.get(e.src.compartment)
        if regs.pkrs != e.src.pkrs:
            self._fault("SourceMismatch", "S2", f"pkrs={format_pkrs(regs.pkrs)}")
        if caller is None or not caller.in_code(regs.ip):
            self._fault("SourceMismatch", "S2", f"return={regs.ip:#x}")
        if e.src.asid and self.machine.mmu.active_asid != e.src.asid:
            self._fault("SourceMismatch", "S2", f"asid={self.machine.mmu.active_asid}")
        self._record("S2")

    def _s3(self) -> None:
        e = self.entry = self._load()
        if not e.tgt.asid or e.tgt.asid == self.machine.mmu.active_asid:
            return
        self.trace.cross_space = True
        cr3 = (e.tgt.pgdir << config.machine.page_shift) | e.tgt.asid
        verdict = self.monitor.call(PrivilegedOp("write_cr3", {"value": cr3, "gate": e.gate_id}))
        if not verdict:
            self._fault(verdict.reason, "S3", verdict.detail)
        self._record("S3", f"asid={e.tgt.asid}")

    def _s4(self) -> None:
        e = self._load()
        self.machine.regs.write(RAX, e.tgt.pkrs, 4)
        self._delegate_pkrs()

    def _delegate_pkrs(self) -> None:
        value = self.machine.regs.read(RAX, 4)
        verdict = self.monitor.call(PrivilegedOp("write_pkrs", {"value": value}))
        self._record("S4", f"pkrs={format_pkrs(value)}", str(verdict))

    def _s5(self) -> None:
        machine = self.machine
        for _ in range(config.monitor.max_loopbacks + 1):
            self.entry = e = self._load()
            space_ok = not e.tgt.asid or machine.mmu.active_asid == e.tgt.asid
            if machine.regs.pkrs == e.tgt.pkrs and space_ok:
                self._record("S5")
                return
            if not machine.defenses.loopback_check:
                self._record("S5", "unchecked")
                return
            self._record("S5", f"pkrs={format_pkrs(machine.regs.pkrs)}", "loopback")
            self.trace.loopbacks += 1
            if not space_ok:
                self._s3()
            self._s4()
        self._fault("LoopbackExhausted", "S5")

    def _s6(self) -> None:
        e = self.entry or self._load()
        if not e.stack_switch:
            return
        self.machine.regs.write(RSP, e.tgt.stack_pointer)
        self._record("S6", f"rsp={e.tgt.stack_pointer:#x}")

    def _s7(self) -> None:
        e = self.entry or self._load()
        self.machine.regs.ip = e.tgt.address
        self._record("S7", f"ip={e.tgt.address:#x}")


def _deliver_fault(machine: Machine, start_pkrs: int, fault: SwitchFault) -> None:
    """A fault after the PKRS write is taken with the default restricted rights."""
    if machine.regs.pkrs != start_pkrs:
        machine.monitor.fault_entry(fault.reason)


def _finish(machine: Machine, trace: SwitchTrace) -> SwitchTrace:
    regs = machine.regs
    trace.pkrs = regs.pkrs
    trace.asid = machine.mmu.active_asid
    trace.ip = regs.ip
    trace.stack_pointer = regs.rsp
    return trace


def switch(machine: Machine, gate_id: int, interrupt_before: Optional[str] = None,
           probe: Optional[Probe] = None) -> SwitchTrace:
    """
    Runs S1..S7 for gate_id from the live context. The caller's current instruction
    pointer is taken as its return address. Raises SwitchFault.
    """
    actor = machine.actor()
    start_pkrs = machine.regs.pkrs
    machine.regs.write(RDI, gate_id)
    trace = SwitchTrace(gate_id)
    try:
        _Sequence(machine, trace, interrupt_before, probe).run("S1")
    except SwitchFault as e:
        _deliver_fault(machine, start_pkrs, e)
        raise
    _finish(machine, trace)
    kind = "cross" if trace.cross_space else "intra"
    machine.audit.record("transition", actor, f"gate={gate_id} kind={kind} steps={trace.micro_steps}")
    return trace


@dataclass
class AdversarialOutcome:
    start_step: str
    forged: Dict[int, int]
    start_pkrs: int
    trace: SwitchTrace
    legal: bool
    endpoint_ok: bool

    @property
    def breach(self) -> bool:
        return not (self.legal and self.endpoint_ok)


def legal_pkrs(machine: Machine) -> Set[int]:
    return machine.monitor.sgt.target_pkrs_values() | {machine.monitor.default_restricted}


def adversarial_start(machine: Machine, start_step: str, forged_registers: Dict[int, int],
                      interrupt_before: Optional[str] = None, probe: Optional[Probe] = None) -> AdversarialOutcome:
    """
    Enters the sequence at start_step with attacker-chosen registers. Faults are
    valid terminal outcomes if they leave the starting or the default restricted PKRS.
    Otherwise the terminal PKRS must be legal, and if it changed it must come with the
    registered address space, entry point and stack of that target.
    """
    if start_step not in START_STEPS:
        raise ValueError(f"start step must be one of {', '.join(START_STEPS)}")
    regs = machine.regs
    for reg, value in forged_registers.items():
        regs.write(reg, value)
    start_pkrs = regs.pkrs
    trace = SwitchTrace(regs.read(RDI))
    try:
        _Sequence(machine, trace, interrupt_before, probe).run(start_step)
    except SwitchFault as e:
        trace.fault = e
        _deliver_fault(machine, start_pkrs, e)
    _finish(machine, trace)

    legal = trace.pkrs in legal_pkrs(machine)
    endpoint_ok = True
    if trace.fault is not None:
        endpoint_ok = trace.pkrs in (start_pkrs, machine.monitor.default_restricted)
    elif trace.pkrs != start_pkrs:
        endpoints = machine.monitor.sgt.endpoints()
        endpoint_ok = any(p == trace.pkrs and (not a or a == trace.asid) and ip == trace.ip and sp == trace.stack_pointer
                          for p, a, ip, sp in endpoints)
    outcome = AdversarialOutcome(start_step, dict(forged_registers), start_pkrs, trace, legal, endpoint_ok)
    machine.audit.record("adversarial", machine.actor(),
                         f"start={start_step} gate={trace.gate_id} pkrs={format_pkrs(trace.pkrs)}",
                         "breach" if outcome.breach else "contained")
    return outcome


def data_probe(target: Compartment) -> Probe:
    """Handler probe that tries to read the target's private data."""

    def probe(machine: Machine) -> AccessVerdict:
        return machine.attempt(target.data.start, READ)

    return probe
