"""
The reference monitor.

It is the only holder of page-table authority, validates every delegated
privileged operation, keeps the per-thread PKRS save areas on pages tagged with
its own pkey, resets PKRS on interrupt entry and performs zero-copy ownership
transfers from the page-fault path.

Per-thread save page (32-bit slots):

    slot 0       interrupt nesting depth
    slots 1..8   PKRS saved by interrupt entries (LIFO)
    slot 16      PKRS saved by the last context switch away from the thread
    slot 32      monitor entry nesting depth
    slots 33..   PKRS of the caller, restored on monitor exit
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Set

from config import config
from pksim.errors import AccessFault, InterruptOverflow, NoMatchingRule, UnbalancedExit, UnmappedAddress
from pksim.isa.instr import RAX, RCX, RDX, RSP, SGDT, SIDT, SYSREG_NAMES, Instr, Op
from pksim.isa.interpreter import CpuState, MASK32, effective_address
from pksim.logger import setup_logger
from pksim.machine import Compartment, Machine, Thread
from pksim.mmu import PAGE_SIZE, compartment_pkrs, format_pkrs
from pksim.policy.model import CompiledPolicy
from pksim.policy.transfer import validate_transfer
from pksim.verdicts import (
    FORGED_PGDIR, NO_TRANSFER_RULE, NOT_JIT_PAGE, PKS_DISABLE_ATTEMPT, POLICY_VIOLATION,
    UNREGISTERED_PKRS, Denied, Executed, Rejected, Resumed, Verdict,
)

logger = setup_logger()

PKRS_MSR = config.machine.pkrs_msr
PKS_BIT = 1 << config.machine.cr4_pks_bit

# Save page slots
IRQ_DEPTH = 0
IRQ_SLOTS = 1
CONTEXT_SLOT = 16
ENTRY_DEPTH = 32
ENTRY_SLOTS = 33
MAX_ENTRY_DEPTH = 16

OP_KINDS = ("write_pkrs", "write_cr3", "write_cr4", "write_cr", "write_msr", "read_cr",
            "system_reg_store", "system_reg_load", "pt_update", "jit_code_update")


@dataclass(frozen=True)
class PrivilegedOp:
    kind: str
    args: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown privileged operation '{self.kind}'")

    def describe(self) -> str:
        parts = [f"op={self.kind}"]
        for key, value in sorted(self.args.items()):
            if isinstance(value, int):
                parts.append(f"{key}={value:#x}")
            elif isinstance(value, (bytes, bytearray)):
                parts.append(f"{key}={len(value)}B")
            else:
                parts.append(f"{key}={value}")
        return " ".join(parts)


def privileged_op_for(instr: Instr, state: CpuState) -> PrivilegedOp:
    """Request the monitor receives for a privileged instruction reached through a gate stub."""
    regs = state.regs
    if instr.op is Op.WRMSR:
        msr = regs.read(RCX, 4)
        value = (regs.read(RDX, 4) << 32) | regs.read(RAX, 4)
        if msr == PKRS_MSR:
            return PrivilegedOp("write_pkrs", {"value": value & MASK32})
        return PrivilegedOp("write_msr", {"msr": msr, "value": value})
    if instr.op is Op.MOV_CR_R:
        cr, value = instr.reg_field, regs.read(instr.rm_field)
        if cr == 3:
            return PrivilegedOp("write_cr3", {"value": value})
        if cr == 4:
            return PrivilegedOp("write_cr4", {"value": value})
        return PrivilegedOp("write_cr", {"cr": cr, "value": value})
    if instr.op is Op.MOV_R_CR:
        return PrivilegedOp("read_cr", {"cr": instr.reg_field, "reg": instr.rm_field})
    if instr.op is Op.SYSREG:
        kind = instr.reg_field
        op = "system_reg_store" if kind in (SGDT, SIDT) else "system_reg_load"
        return PrivilegedOp(op, {"reg": SYSREG_NAMES[kind], "address": effective_address(regs, instr)})
    raise ValueError(f"{instr.op} is not privileged")


class Monitor:
    def __init__(self, machine: Machine, policy: CompiledPolicy):
        self.machine = machine
        self.policy = policy
        self.defenses = machine.defenses
        self.authority = machine.mmu.claim_authority(protect_tables=self.defenses.pt_protection)
        machine.monitor = self
        # Set by the switch-gate table once it is created
        self.sgt = None

        self.default_restricted = self.pkrs_for(config.machine.core_pkey)
        self.monitor_pkrs = compartment_pkrs(config.machine.monitor_pkey)
        # Page vaddr -> privilege class of shared-object pages
        self.page_classes: Dict[int, str] = {}
        self.jit_pages: Set[int] = set()
        self.entries = 0
        self.exits = 0
        self.save_pages: Dict[int, int] = {}

        if self.defenses.pt_protection:
            self.protect_page_tables()
        for thread in machine.threads.values():
            self.attach_thread(thread)
        logger.info(f"Monitor initialized: default PKRS {format_pkrs(self.default_restricted)}, "
                    f"disabled defenses: {', '.join(self.defenses.disabled()) or 'none'}")

    # --- PKRS values ---

    def pkrs_for(self, pkey: int) -> int:
        """Configured PKRS of the compartment owning pkey: monitor data read-only, code execute-only."""
        readable = [config.machine.monitor_pkey]
        if not self.defenses.xom:
            readable.append(config.machine.code_pkey)
        return compartment_pkrs(pkey, tuple(readable))

    def whitelist(self) -> Set[int]:
        values = {self.default_restricted}
        if self.sgt is not None:
            values |= self.sgt.target_pkrs_values()
        return values

    def _set_pkrs(self, value: int, via: str, regs=None) -> None:
        regs = regs or self.machine.regs
        old = regs.msr.get(PKRS_MSR, 0)
        regs.msr[PKRS_MSR] = value
        if old != value:
            self.machine.audit.record("pkrs", "monitor", f"{format_pkrs(old)}->{format_pkrs(value)} via={via}")

    # --- Protected storage ---

    def protect_page_tables(self) -> List[int]:
        """Retags every page-table frame that does not carry the monitor pkey."""
        mmu = self.machine.mmu
        retagged = []
        for fid, vaddr in sorted(mmu.ptmap.items()):
            if mmu.descriptor(vaddr).pkey != config.machine.monitor_pkey:
                mmu.set_pkey(vaddr, config.machine.monitor_pkey, self.authority)
                retagged.append(fid)
        if retagged:
            self.machine.audit.record("protect_pt", "monitor", f"frames={len(retagged)}")
        return retagged

    def monitor_page(self) -> int:
        """A fresh writable page in the monitor's directory, tagged with its pkey."""
        pages = self.machine.map_shared(config.machine.monitor_dir, 1, config.machine.monitor_pkey, self.authority)
        return pages.start

    def attach_thread(self, thread: Thread) -> None:
        vaddr = self.monitor_page()
        thread.save_page = vaddr
        self.save_pages[thread.tid] = vaddr
        self._slot_write(thread, CONTEXT_SLOT, thread.regs.pkrs)

    def start_thread(self, thread: Thread, pkrs: int) -> None:
        """Initial PKRS of a thread, installed live and in its save page."""
        self._set_pkrs(pkrs, "start", thread.regs)
        self._slot_write(thread, CONTEXT_SLOT, pkrs)

    def _frame(self, thread: Thread) -> int:
        frame, _ = self.machine.mmu.physical_address(thread.save_page)
        return frame

    def _slot_read(self, thread: Thread, slot: int) -> int:
        return self.machine.mmu.physical.read_u32(self._frame(thread), slot)

    def _slot_write(self, thread: Thread, slot: int, value: int) -> None:
        self.machine.mmu.physical.write_u32(self._frame(thread), slot, value)

    # --- Entry and exit gates ---

    def enter(self, caller: str) -> None:
        thread = self.machine.thread
        depth = self._slot_read(thread, ENTRY_DEPTH)
        if depth >= MAX_ENTRY_DEPTH:
            raise InterruptOverflow(f"monitor entry nesting deeper than {MAX_ENTRY_DEPTH}")
        self._slot_write(thread, ENTRY_SLOTS + depth, thread.regs.pkrs)
        self._slot_write(thread, ENTRY_DEPTH, depth + 1)
        self.entries += 1
        self.machine.audit.record("enter", caller, f"gate={config.monitor.entry_gate}")
        self._set_pkrs(self.monitor_pkrs, "enter")
        self.machine.in_monitor += 1

    def exit(self, caller: str) -> None:
        thread = self.machine.thread
        depth = self._slot_read(thread, ENTRY_DEPTH)
        if depth == 0:
            raise UnbalancedExit("monitor exit without entry")
        value = self._slot_read(thread, ENTRY_SLOTS + depth - 1)
        self._slot_write(thread, ENTRY_SLOTS + depth - 1, 0)
        self._slot_write(thread, ENTRY_DEPTH, depth - 1)
        self.machine.in_monitor -= 1
        self._set_pkrs(value, "exit")
        self.exits += 1
        self.machine.audit.record("exit", caller, f"gate={config.monitor.exit_gate}")

    def _set_return_pkrs(self, value: int) -> None:
        thread = self.machine.thread
        depth = self._slot_read(thread, ENTRY_DEPTH)
        self._slot_write(thread, ENTRY_SLOTS + depth - 1, value)

    def _caller_pkrs(self) -> int:
        thread = self.machine.thread
        depth = self._slot_read(thread, ENTRY_DEPTH)
        return self._slot_read(thread, ENTRY_SLOTS + depth - 1)

    @contextmanager
    def session(self, caller: str) -> Iterator[None]:
        """Monitor context between the entry and exit gates."""
        self.enter(caller)
        try:
            yield
        finally:
            self.exit(caller)

    def call(self, op: PrivilegedOp, caller: Optional[Compartment] = None) -> Verdict:
        """Entry gate, delegated operation, exit gate."""
        if caller is None:
            caller = self.machine.current_compartment()
        name = caller.name if caller else self.machine.actor()
        with self.session(name):
            verdict = self.delegate(op, caller)
        return verdict

    # --- Delegation ---

    def delegate(self, op: PrivilegedOp, caller: Optional[Compartment]) -> Verdict:
        """Validates op against the policy and, if it passes, performs it."""
        handler = getattr(self, f"_op_{op.kind}")
        verdict = handler(op.args, caller)
        name = caller.name if caller else "unknown"
        self.machine.audit.record("delegate", name, op.describe(), str(verdict))
        if not verdict:
            logger.warning(f"Monitor rejected {op.kind} from {name}: {verdict.reason} {verdict.detail}")
        return verdict

    def _op_write_pkrs(self, args, caller) -> Verdict:
        value = args["value"] & MASK32
        if value not in self.whitelist():
            return Rejected(UNREGISTERED_PKRS, format_pkrs(value))
        self._set_return_pkrs(value)
        return Executed(value)

    def _op_write_cr3(self, args, caller) -> Verdict:
        value = args["value"]
        pgdir, asid = value >> config.machine.page_shift, value & ((1 << config.machine.page_shift) - 1)
        if (pgdir, asid) not in self.machine.mmu.registered_cr3():
            return Rejected(FORGED_PGDIR, f"pgdir={pgdir} asid={asid}")
        gate = args.get("gate")
        if gate is not None:
            entry = self.sgt.read(gate) if self.sgt is not None else None
            if entry is None or entry.tgt.asid != asid:
                return Rejected(POLICY_VIOLATION, f"gate {gate} does not lead to asid {asid}")
        elif caller is None or caller.kind != "core":
            return Rejected(POLICY_VIOLATION, "address-space switches go through switch gates")
        self.machine.mmu.switch_address_space(asid, self.authority)
        self.machine.regs.cr[3] = value
        return Executed(value)

    def _op_write_cr4(self, args, caller) -> Verdict:
        value = args["value"]
        if not value & PKS_BIT:
            return Rejected(PKS_DISABLE_ATTEMPT, f"cr4={value:#x}")
        self.machine.regs.cr[4] = value
        return Executed(value)

    def _op_write_cr(self, args, caller) -> Verdict:
        return Rejected(POLICY_VIOLATION, f"cr{args['cr']} is not writable from compartments")

    def _op_write_msr(self, args, caller) -> Verdict:
        return Rejected(POLICY_VIOLATION, f"msr {args['msr']:#x} is not delegable")

    def _op_read_cr(self, args, caller) -> Verdict:
        return Executed(self.machine.regs.cr.get(args["cr"], 0))

    def _op_system_reg_store(self, args, caller) -> Verdict:
        reg, address = args["reg"], args["address"]
        limit, base = self.machine.regs.gdtr if reg == SYSREG_NAMES[SGDT] else self.machine.regs.idtr
        data = (limit & 0xFFFF).to_bytes(2, "little") + base.to_bytes(8, "little")
        # The store is made with the caller's rights, not the monitor's
        try:
            with self.machine.acting_as(self._caller_pkrs()):
                self.machine.write(address, data)
        except AccessFault as e:
            return Rejected(POLICY_VIOLATION, f"{reg} store to {address:#x} denied ({e.reason})")
        return Executed(address)

    def _op_system_reg_load(self, args, caller) -> Verdict:
        return Rejected(POLICY_VIOLATION, f"{args['reg']} is never delegated")

    def _op_pt_update(self, args, caller) -> Verdict:
        vaddr = args["vaddr"] & ~(PAGE_SIZE - 1)
        if caller is None or caller.kind != "module":
            return Rejected(POLICY_VIOLATION, "page-table updates are made for module compartments only")
        try:
            desc = self.machine.mmu.descriptor(vaddr)
        except UnmappedAddress:
            return Rejected(POLICY_VIOLATION, f"{vaddr:#x} is not mapped")
        if desc.pkey != caller.pkey or not desc.no_execute:
            return Rejected(POLICY_VIOLATION, f"{caller.name} does not own data page {vaddr:#x}")
        pkey = args.get("pkey", caller.pkey)
        if pkey not in (caller.pkey, config.machine.core_pkey):
            return Rejected(POLICY_VIOLATION, f"pkey {pkey} cannot be assigned by {caller.name}")
        writable = args.get("writable", desc.writable)
        self.machine.mmu.update_page(vaddr, self.authority, pkey=pkey, writable=bool(writable))
        return Executed(vaddr)

    def _op_jit_code_update(self, args, caller) -> Verdict:
        return self._jit_write(args["address"], bytes(args["data"]))

    # --- Interrupts ---

    def interrupt_entry(self, thread: Optional[Thread] = None) -> int:
        """Saves the live PKRS and installs the default restricted value. Returns the nesting depth."""
        thread = thread or self.machine.thread
        depth = self._slot_read(thread, IRQ_DEPTH)
        if depth >= config.monitor.max_interrupt_depth:
            raise InterruptOverflow(f"thread {thread.tid}: more than {depth} nested interrupts")
        saved = thread.regs.pkrs
        self._slot_write(thread, IRQ_SLOTS + depth, saved)
        self._slot_write(thread, IRQ_DEPTH, depth + 1)
        if self.defenses.interrupt_reset:
            self._set_pkrs(self.default_restricted, "interrupt", thread.regs)
        self.machine.audit.record("interrupt_entry", f"thread{thread.tid}", f"depth={depth + 1} saved={format_pkrs(saved)}")
        return depth + 1

    def interrupt_exit(self, thread: Optional[Thread] = None) -> int:
        thread = thread or self.machine.thread
        depth = self._slot_read(thread, IRQ_DEPTH)
        if depth == 0:
            self.machine.audit.record("interrupt_exit", f"thread{thread.tid}", "depth=0", "unbalanced")
            raise UnbalancedExit(f"thread {thread.tid}: interrupt exit without entry")
        value = self._slot_read(thread, IRQ_SLOTS + depth - 1)
        self._slot_write(thread, IRQ_SLOTS + depth - 1, 0)
        self._slot_write(thread, IRQ_DEPTH, depth - 1)
        self._set_pkrs(value, "iret", thread.regs)
        self.machine.audit.record("interrupt_exit", f"thread{thread.tid}", f"depth={depth - 1}")
        return depth - 1

    def fault_entry(self, reason: str) -> None:
        """Exception delivery: the handler runs with the default restricted PKRS."""
        if self.defenses.interrupt_reset:
            self._set_pkrs(self.default_restricted, f"fault:{reason}")

    def interrupt_depth(self, thread: Optional[Thread] = None) -> int:
        return self._slot_read(thread or self.machine.thread, IRQ_DEPTH)

    # --- Threads ---

    def context_switch(self, tid: int) -> Thread:
        """Parks the running thread's PKRS in its save page and resumes tid with its own."""
        machine = self.machine
        if tid not in machine.threads:
            raise KeyError(f"no thread {tid}")
        current = machine.thread
        self._slot_write(current, CONTEXT_SLOT, current.regs.pkrs)
        machine.install_thread(tid)
        nxt = machine.thread
        self._set_pkrs(self._slot_read(nxt, CONTEXT_SLOT), "context", nxt.regs)
        machine.audit.record("context_switch", "monitor", f"tid={current.tid}->{tid}")
        return nxt

    def place(self, compartment: Compartment, address: Optional[int] = None) -> None:
        """Scheduler path: resumes the running thread inside compartment at address."""
        machine = self.machine
        regs = machine.regs
        if compartment.asid is not None and machine.mmu.active_asid != compartment.asid:
            space = machine.mmu.switch_address_space(compartment.asid, self.authority)
            regs.cr[3] = space.cr3
        self._set_pkrs(compartment.pkrs, "place")
        regs.ip = compartment.code.start if address is None else address
        regs.write(RSP, compartment.stack_pointer)
        machine.audit.record("place", compartment.name, f"ip={regs.ip:#x}")

    # --- Ownership transfer ---

    def handle_page_fault(self, vaddr: int, kind: str, accessor: Optional[Compartment]) -> Verdict:
        """
        Retags a shared page to the faulting compartment when a transfer rule covers
        the (owner, accessor, class) triple and every declared field is in range.
        """
        machine = self.machine
        page = vaddr & ~(PAGE_SIZE - 1)
        name = accessor.name if accessor else machine.actor()
        privilege_class = self.page_classes.get(page)
        if privilege_class is None:
            # Not a shared-object page; the access fault itself is the report
            return Denied(NO_TRANSFER_RULE, f"{page:#x}")
        if accessor is None or accessor.kind != "module":
            return self._transfer_verdict(name, page, Denied(NO_TRANSFER_RULE, f"{page:#x}"))
        desc = machine.mmu.descriptor(page)
        owner = machine.owner_of(machine.mmu.active_asid, desc.pkey)
        if owner is None or owner.kind != "module" or owner is accessor:
            return self._transfer_verdict(name, page, Denied(NO_TRANSFER_RULE, f"{page:#x} owner pkey {desc.pkey}"))

        with self.session(name):
            try:
                self.policy.rules.find(owner.name, accessor.name, privilege_class)
            except NoMatchingRule as e:
                return self._transfer_verdict(name, page, Denied(NO_TRANSFER_RULE, str(e)))
            snapshot = bytes(machine.mmu.physical.frame(desc.frame))
            if self.defenses.transfer_validation:
                result = validate_transfer(self.policy.rules, owner.name, accessor.name, snapshot, privilege_class)
                if not result:
                    return self._transfer_verdict(name, page, Denied(result.reason, result.detail))
            machine.mmu.set_pkey(page, accessor.pkey, self.authority)
        return self._transfer_verdict(
            name, page, Resumed(f"{page:#x} {owner.name}->{accessor.name} frame={desc.frame}"))

    def _transfer_verdict(self, name: str, page: int, verdict: Verdict) -> Verdict:
        self.machine.audit.record("transfer", name, verdict.detail or f"{page:#x}", str(verdict))
        if not verdict:
            logger.warning(f"Transfer of {page:#x} to {name} denied: {verdict.reason}")
        return verdict

    # --- JIT pages ---

    def jit_update(self, vaddr: int, data: bytes, caller: Optional[Compartment] = None) -> Verdict:
        return self.call(PrivilegedOp("jit_code_update", {"address": vaddr, "data": bytes(data)}), caller)

    @contextmanager
    def _grant(self, page: int) -> Iterator[None]:
        """Scoped write access for the monitor to one code page."""
        mmu = self.machine.mmu
        self.machine.audit.record("grant_open", "monitor", f"{page:#x}")
        mmu.update_page(page, self.authority, pkey=config.machine.monitor_pkey, writable=True, no_execute=True)
        try:
            yield
        finally:
            mmu.update_page(page, self.authority, pkey=config.machine.code_pkey, writable=False, no_execute=False)
            self.machine.audit.record("grant_close", "monitor", f"{page:#x}")

    def _jit_write(self, address: int, data: bytes) -> Verdict:
        page = address & ~(PAGE_SIZE - 1)
        if page not in self.jit_pages or (address + len(data) - 1) & ~(PAGE_SIZE - 1) != page:
            return Rejected(NOT_JIT_PAGE, f"{address:#x}")
        with self._grant(page):
            self.machine.write(address, data)
        self.machine.cpu.invalidate_decode_cache()
        return Executed(address, f"{len(data)} bytes")

    # --- Private heap ---

    def alloc_heap(self, compartment: Compartment, n_pages: int = 1):
        """Maps pages from the compartment's reserved pool (raises PoolExhausted)."""
        with self.session(compartment.name):
            pages = self.machine.mmu.alloc_private(compartment.name, n_pages, self.authority)
        compartment.heap.append(pages)
        return pages
