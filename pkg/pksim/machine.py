"""
The simulated machine: MMU, threads with their own register files, the compartments
resident in it and the memory port through which the interpreter touches memory.
"""
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

from config import config
from pksim.errors import AccessFault, MonitorRejected, PrivilegeTrap, UnmappedAddress
from pksim.events import EventLog
from pksim.isa.instr import Instr
from pksim.isa.interpreter import (
    CpuState, PrivilegeHooks, RegisterFile, RunResult, perform_privileged, run,
)
from pksim.logger import setup_logger
from pksim.mmu import (
    EXECUTE, PAGE_SIZE, READ, WRITE, AccessVerdict, Mmu, PageDescriptor, PageRange,
    PhysicalMemory, check_access, dir_base, format_pkrs, open_pkeys,
)

logger = setup_logger()


@dataclass(frozen=True)
class Defenses:
    """Switches for each protection; all on outside of tests."""
    xom: bool = True
    loopback_check: bool = True
    interrupt_reset: bool = True
    pt_protection: bool = True
    deprivation: bool = True
    transfer_validation: bool = True

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def without(self, name: str) -> "Defenses":
        return replace(self, **{name: False})

    def disabled(self) -> List[str]:
        return [n for n in self.names() if not getattr(self, n)]


@dataclass
class Compartment:
    name: str
    kind: str  # "core", "monitor" or "module"
    pkey: int
    # None for the shared part (core kernel, monitor)
    asid: Optional[int]
    pkrs: int = 0
    code: Optional[PageRange] = None
    data: Optional[PageRange] = None
    stack: Optional[PageRange] = None
    heap: List[PageRange] = field(default_factory=list)
    jit: List[PageRange] = field(default_factory=list)

    @property
    def stack_pointer(self) -> int:
        return self.stack.end - 16 if self.stack else 0

    def in_code(self, address: int) -> bool:
        return self.code is not None and address in self.code

    def code_address(self, offset: int = 0) -> int:
        return self.code.start + offset


@dataclass
class Thread:
    tid: int
    regs: RegisterFile
    # Monitor save-area page of this thread (set by the monitor)
    save_page: Optional[int] = None


class MachinePort:
    """Memory port that translates through the MMU and enforces the PKS check."""

    def __init__(self, machine: "Machine"):
        self.machine = machine

    def _resolve(self, vaddr: int, kind: str) -> Tuple[int, int]:
        m = self.machine
        actor = m.actor()
        try:
            desc, _ = m.mmu.translate(vaddr, actor=actor)
        except UnmappedAddress:
            m.record_fault(actor, vaddr, kind, "unmapped")
            raise AccessFault(vaddr, kind, "unmapped")
        verdict = check_access(m.effective_pkrs(), desc, kind)
        if not verdict and kind != EXECUTE and m.monitor is not None and verdict.reason in ("AD", "WD"):
            handled = m.monitor.handle_page_fault(vaddr, kind, m.current_compartment())
            if handled:
                desc, _ = m.mmu.translate(vaddr, actor=actor)
                verdict = check_access(m.effective_pkrs(), desc, kind)
        if kind != EXECUTE or not verdict:
            m.trace.record("access", actor, f"{vaddr:#x} {kind}", str(verdict))
        if not verdict:
            m.record_fault(actor, vaddr, kind, verdict.reason)
            raise AccessFault(vaddr, kind, verdict.reason)
        return desc.frame, vaddr & (PAGE_SIZE - 1)

    def fetch(self, address: int, length: int) -> bytes:
        frame, offset = self._resolve(address, EXECUTE)
        out = self.machine.mmu.physical.read(frame, offset, min(length, PAGE_SIZE - offset))
        if len(out) < length:
            # Instructions may straddle into the next page when it is executable too
            try:
                frame, _ = self._resolve(address + len(out), EXECUTE)
                out += self.machine.mmu.physical.read(frame, 0, length - len(out))
            except AccessFault:
                pass
        return out

    def read(self, address: int, length: int) -> bytes:
        out = bytearray()
        while length > 0:
            frame, offset = self._resolve(address, READ)
            n = min(length, PAGE_SIZE - offset)
            out += self.machine.mmu.physical.read(frame, offset, n)
            address, length = address + n, length - n
        return bytes(out)

    def write(self, address: int, data: bytes) -> None:
        # Check every page first so a denied store leaves memory untouched
        chunks = []
        pos = 0
        while pos < len(data):
            frame, offset = self._resolve(address + pos, WRITE)
            n = min(len(data) - pos, PAGE_SIZE - offset)
            chunks.append((frame, offset, data[pos:pos + n]))
            pos += n
        for frame, offset, chunk in chunks:
            self.machine.mmu.physical.write(frame, offset, chunk)


class MachineHooks(PrivilegeHooks):
    """
    Privileged instructions execute only in monitor context; elsewhere they trap.
    Gate stubs hand the instruction to the monitor for validation.
    """

    def __init__(self, machine: "Machine"):
        self.machine = machine

    def privileged(self, state: CpuState, instr: Instr) -> None:
        m = self.machine
        if m.in_monitor or not m.defenses.deprivation:
            m.trace.record("privileged", m.actor(), instr.op.value, "executed")
            perform_privileged(state, instr)
            return
        m.fault_counts["PrivilegeTrap"] += 1
        m.audit.record("trap", m.actor(), f"op={instr.op.value}", "trap")
        raise PrivilegeTrap(instr.op.value, state.regs.ip)

    def gate(self, state: CpuState, instr: Instr) -> None:
        m = self.machine
        from pksim.monitor import privileged_op_for
        op = privileged_op_for(instr, state)
        verdict = m.monitor.call(op, m.current_compartment())
        if not verdict:
            raise MonitorRejected(verdict.reason, verdict.detail)
        if op.kind == "read_cr":
            state.regs.write(op.args["reg"], verdict.value)

    def stub_at(self, address: int) -> Optional[Instr]:
        return self.machine.stubs.get(address)


class Machine:
    def __init__(self, defenses: Optional[Defenses] = None, use_pcid: bool = config.machine.use_pcid):
        self.defenses = defenses or Defenses()
        self.trace = EventLog("trace")
        self.audit = EventLog("audit", verdict_first=True)
        self.mmu = Mmu(PhysicalMemory(), self.trace, use_pcid)
        self.compartments: Dict[str, Compartment] = {}
        self._by_key: Dict[Tuple[Optional[int], int], str] = {}
        self.cpu = CpuState(RegisterFile(), MachinePort(self))
        self.threads: Dict[int, Thread] = {0: Thread(0, self.cpu.regs)}
        self.current_tid = 0
        self.monitor = None
        # Nesting depth of monitor operations in progress
        self.in_monitor = 0
        # PKRS used for data accesses made on someone else's behalf
        self._pkrs_override: List[int] = []
        # Gate stub slot address -> privileged instruction it stands for
        self.stubs: Dict[int, Instr] = {}
        self.fault_counts: Counter = Counter()
        self._shared_cursor: Dict[int, int] = {}

    # --- Registers and identity ---

    @property
    def regs(self) -> RegisterFile:
        return self.cpu.regs

    @property
    def pkrs(self) -> int:
        return self.regs.pkrs

    def effective_pkrs(self) -> int:
        return self._pkrs_override[-1] if self._pkrs_override else self.regs.pkrs

    def add_compartment(self, compartment: Compartment) -> Compartment:
        self.compartments[compartment.name] = compartment
        self._by_key[(compartment.asid, compartment.pkey)] = compartment.name
        if compartment.asid is not None:
            self.mmu.space(compartment.asid).compartments.append(compartment.name)
        return compartment

    def compartment(self, name: str) -> Compartment:
        return self.compartments[name]

    def owner_of(self, asid: Optional[int], pkey: int) -> Optional[Compartment]:
        name = self._by_key.get((asid, pkey)) or self._by_key.get((None, pkey))
        return self.compartments.get(name) if name else None

    def current_compartment(self) -> Optional[Compartment]:
        """Compartment identified by the single open pkey of the live PKRS."""
        if self.in_monitor:
            return self.compartments.get("monitor")
        keys = open_pkeys(self.regs.pkrs)
        if len(keys) != 1:
            return None
        return self.owner_of(self.mmu.active_asid, keys[0])

    def actor(self) -> str:
        c = self.current_compartment()
        return c.name if c else f"pkrs={format_pkrs(self.regs.pkrs)}"

    # --- Memory access ---

    def acting_as(self, pkrs: int):
        machine = self

        class _Override:
            def __enter__(self):
                machine._pkrs_override.append(pkrs)

            def __exit__(self, *exc):
                machine._pkrs_override.pop()
                return False

        return _Override()

    def record_fault(self, actor: str, vaddr: int, kind: str, reason: str) -> None:
        self.fault_counts[reason] += 1
        self.audit.record("fault", actor, f"vaddr={vaddr:#x} kind={kind} reason={reason}", "deny")

    def read(self, vaddr: int, length: int) -> bytes:
        return self.cpu.memory.read(vaddr, length)

    def write(self, vaddr: int, data: bytes) -> None:
        self.cpu.memory.write(vaddr, data)

    def attempt(self, vaddr: int, kind: str, data: bytes = b"\x00" * 4) -> AccessVerdict:
        """One raw access by the current context; faults come back as a Deny verdict."""
        try:
            if kind == WRITE:
                self.write(vaddr, data)
            elif kind == READ:
                self.read(vaddr, len(data))
            else:
                self.cpu.memory.fetch(vaddr, 1)
        except AccessFault as e:
            return AccessVerdict(False, e.reason)
        return AccessVerdict(True)

    def map_shared(self, directory: int, n_pages: int, pkey: int, actor,
                   writable: bool = True, executable: bool = False) -> PageRange:
        """Fresh frames mapped at the next free pages of a shared directory."""
        start = self._shared_cursor.get(directory, dir_base(directory))
        self._shared_cursor[directory] = start + n_pages * PAGE_SIZE
        return self._map_fresh(start, n_pages, pkey, actor, writable, executable, self.mmu.active)

    def map_private(self, asid: int, n_pages: int, pkey: int, actor,
                    writable: bool = True, executable: bool = False) -> PageRange:
        """Fresh frames mapped into the private part of address space asid."""
        start = self.mmu.next_private_range(n_pages)
        return self._map_fresh(start, n_pages, pkey, actor, writable, executable, self.mmu.space(asid))

    def _map_fresh(self, start: int, n_pages: int, pkey: int, actor, writable: bool,
                   executable: bool, space) -> PageRange:
        frames = []
        for i in range(n_pages):
            fid = self.mmu.physical.allocate()
            frames.append(fid)
            self.mmu.map_page(start + i * PAGE_SIZE,
                              PageDescriptor(frame=fid, writable=writable, no_execute=not executable, pkey=pkey),
                              actor, space)
        return PageRange(start, n_pages, tuple(frames))

    def descriptor(self, vaddr: int) -> PageDescriptor:
        return self.mmu.descriptor(vaddr)

    def frame_bytes(self, vaddr: int) -> bytes:
        frame, _ = self.mmu.physical_address(vaddr)
        return bytes(self.mmu.physical.frame(frame))

    def load_bytes(self, vaddr: int, data: bytes, asid: Optional[int] = None) -> None:
        """Loader path: writes straight into the frames behind vaddr, in space asid if given."""
        space = self.mmu.space(asid)
        pos = 0
        while pos < len(data):
            frame, offset = self.mmu.physical_address(vaddr + pos, space)
            n = min(len(data) - pos, PAGE_SIZE - offset)
            self.mmu.physical.write(frame, offset, data[pos:pos + n])
            pos += n
        self.cpu.invalidate_decode_cache()

    # --- Execution ---

    def hooks(self) -> MachineHooks:
        return MachineHooks(self)

    def run(self, max_steps: int = config.rewriter.max_steps, halt_at: Optional[int] = None) -> RunResult:
        self.cpu.halt_at = halt_at
        result = run(self.cpu, self.hooks(), max_steps)
        logger.debug(f"Machine run: {result.status} after {result.steps} steps")
        return result

    # --- Threads ---

    def spawn_thread(self, pkrs: int) -> Thread:
        tid = max(self.threads) + 1
        regs = RegisterFile()
        regs.cr = dict(self.regs.cr)
        regs.msr[config.machine.pkrs_msr] = pkrs
        thread = Thread(tid, regs)
        self.threads[tid] = thread
        if self.monitor is not None:
            self.monitor.attach_thread(thread)
        return thread

    @property
    def thread(self) -> Thread:
        return self.threads[self.current_tid]

    def install_thread(self, tid: int) -> None:
        """Makes tid the running thread (called by the monitor's context switch)."""
        self.current_tid = tid
        self.cpu.regs = self.threads[tid].regs
