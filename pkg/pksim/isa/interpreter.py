"""
Reference interpreter for the instruction subset.

Every fetch, load and store goes through a MemoryPort; the machine's port performs
the MMU translation and access check, the flat port used by the rewriter's
equivalence runs is a plain sparse memory. Privileged instructions never execute
here directly: they are handed to a PrivilegeHooks object.
"""
import copy
from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol, Tuple

from config import config
from pksim.errors import AccessFault, DecodeError, DecodeFault, MachineFault, PrivilegeTrap
from pksim.isa.decoder import Program, decode
from pksim.isa.instr import (
    ALU_ADD, ALU_AND, ALU_OR, ALU_XOR, LGDT, LIDT, RAX, RCX, RDX, RSP, SGDT, SIDT, Instr, Op,
)
from pksim.logger import setup_logger

logger = setup_logger()

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1
MAX_INSTR_LEN = 15
PKRS_MSR = config.machine.pkrs_msr


def _mask(width: int) -> int:
    return (1 << (8 * width)) - 1


def _sign_extend(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


# --- Register file ---

@dataclass
class RegisterFile:
    gpr: list = field(default_factory=lambda: [0] * 8)
    ip: int = 0
    zf: bool = False
    cr: Dict[int, int] = field(default_factory=lambda: {0: 0, 2: 0, 3: 0, 4: 0})
    msr: Dict[int, int] = field(default_factory=lambda: {PKRS_MSR: 0})
    # (limit, base)
    gdtr: Tuple[int, int] = (0, 0)
    idtr: Tuple[int, int] = (0, 0)

    def read(self, reg: int, width: int = 8) -> int:
        if width == 1:
            if reg < 4:
                return self.gpr[reg] & 0xFF
            return (self.gpr[reg - 4] >> 8) & 0xFF
        return self.gpr[reg] & _mask(width)

    def write(self, reg: int, value: int, width: int = 8) -> None:
        if width == 1:
            value &= 0xFF
            if reg < 4:
                self.gpr[reg] = (self.gpr[reg] & ~0xFF & MASK64) | value
            else:
                self.gpr[reg - 4] = (self.gpr[reg - 4] & ~0xFF00 & MASK64) | (value << 8)
        elif width == 4:
            # 32-bit writes zero-extend
            self.gpr[reg] = value & MASK32
        else:
            self.gpr[reg] = value & MASK64

    @property
    def rsp(self) -> int:
        return self.gpr[RSP]

    @property
    def pkrs(self) -> int:
        return self.msr.get(PKRS_MSR, 0)

    def copy(self) -> "RegisterFile":
        return copy.deepcopy(self)

    def architectural(self) -> tuple:
        """Comparable snapshot of all architectural state."""
        return (tuple(self.gpr), self.ip, self.zf, tuple(sorted(self.cr.items())),
                tuple(sorted(self.msr.items())), self.gdtr, self.idtr)


# --- Memory ports ---

class MemoryPort(Protocol):
    def fetch(self, address: int, length: int) -> bytes: ...

    def read(self, address: int, length: int) -> bytes: ...

    def write(self, address: int, data: bytes) -> None: ...


class FlatMemory:
    """
    Sparse byte memory with a deterministic background pattern and one code region.
    Unwritten bytes read as a function of (seed, address).
    """

    def __init__(self, program: Program, seed: int = 0):
        self.program = program
        self.seed = seed & MASK64
        self.written: Dict[int, int] = {}

    def _in_code(self, address: int) -> bool:
        return self.program.base_address <= address < self.program.end_address

    def _background(self, address: int) -> int:
        x = (address * 0x9E3779B97F4A7C15 + self.seed) & MASK64
        x ^= x >> 29
        return (x * 0xBF58476D1CE4E5B9 >> 32) & 0xFF

    def fetch(self, address: int, length: int) -> bytes:
        if not self._in_code(address):
            raise AccessFault(address, "execute", "outside code")
        start = address - self.program.base_address
        return self.program.code[start:start + length]

    def read(self, address: int, length: int) -> bytes:
        out = bytearray()
        for a in range(address, address + length):
            a &= MASK64
            if self._in_code(a):
                out.append(self.program.code[a - self.program.base_address])
            else:
                out.append(self.written.get(a, self._background(a)))
        return bytes(out)

    def write(self, address: int, data: bytes) -> None:
        for i, b in enumerate(data):
            a = (address + i) & MASK64
            if self._in_code(a):
                raise AccessFault(a, "write", "code is not writable")
            self.written[a] = b


# --- Privilege hooks ---

class PrivilegeHooks:
    """Deprived context: every privileged instruction traps."""

    def privileged(self, state: "CpuState", instr: Instr) -> None:
        raise PrivilegeTrap(instr.op.value, state.regs.ip)

    def gate(self, state: "CpuState", instr: Instr) -> None:
        """Privileged instruction reached through a gate stub."""
        self.privileged(state, instr)

    def stub_at(self, address: int) -> Optional[Instr]:
        return None


class DirectHooks(PrivilegeHooks):
    """Privileged context: the instruction takes effect directly."""

    def privileged(self, state: "CpuState", instr: Instr) -> None:
        perform_privileged(state, instr)


class StubHooks(PrivilegeHooks):
    """
    Adds gate stubs: a call into a stub slot executes the original privileged
    instruction through the inner hooks and returns to the caller.
    """

    def __init__(self, inner: PrivilegeHooks, stubs: Dict[int, Instr]):
        self.inner = inner
        self.stubs = dict(stubs)

    def privileged(self, state: "CpuState", instr: Instr) -> None:
        self.inner.privileged(state, instr)

    def gate(self, state: "CpuState", instr: Instr) -> None:
        self.inner.gate(state, instr)

    def stub_at(self, address: int) -> Optional[Instr]:
        return self.stubs.get(address)


def perform_privileged(state: "CpuState", instr: Instr) -> None:
    """Architectural effect of a privileged instruction."""
    regs = state.regs
    op = instr.op
    if op is Op.WRMSR:
        value = (regs.read(RDX, 4) << 32) | regs.read(RAX, 4)
        regs.msr[regs.read(RCX, 4)] = value
    elif op is Op.MOV_CR_R:
        regs.cr[instr.reg_field] = regs.read(instr.rm_field)
    elif op is Op.MOV_R_CR:
        regs.write(instr.rm_field, regs.cr.get(instr.reg_field, 0))
    elif op is Op.SYSREG:
        address = effective_address(regs, instr)
        kind = instr.reg_field
        if kind in (SGDT, SIDT):
            limit, base = regs.gdtr if kind == SGDT else regs.idtr
            state.memory.write(address, (limit & 0xFFFF).to_bytes(2, "little") + (base & MASK64).to_bytes(8, "little"))
        elif kind in (LGDT, LIDT):
            raw = state.memory.read(address, 10)
            value = (int.from_bytes(raw[:2], "little"), int.from_bytes(raw[2:], "little"))
            if kind == LGDT:
                regs.gdtr = value
            else:
                regs.idtr = value
    else:
        raise ValueError(f"{op} is not privileged")


# --- CPU state ---

@dataclass
class CpuState:
    regs: RegisterFile
    memory: MemoryPort
    # Address at which run() stops (usually the end of the program)
    halt_at: Optional[int] = None
    decode_cache: Dict[int, Instr] = field(default_factory=dict)
    steps: int = 0

    def invalidate_decode_cache(self) -> None:
        self.decode_cache.clear()


@dataclass
class StepOutcome:
    instr: Instr
    address: int
    next_ip: int
    stub: bool = False


@dataclass
class RunResult:
    steps: int
    status: str  # "halted", "fault" or "step_limit"
    fault: Optional[Exception] = None


def effective_address(regs: RegisterFile, instr: Instr) -> int:
    m = instr.mem_operand()
    address = m.disp
    if m.base is not None:
        address += regs.read(m.base)
    if m.index is not None:
        address += regs.read(m.index) * m.scale
    return address & MASK64


def _fetch_instr(state: CpuState, ip: int) -> Instr:
    cached = state.decode_cache.get(ip)
    if cached is not None:
        return cached
    raw = state.memory.fetch(ip, MAX_INSTR_LEN)
    try:
        instr = decode(raw, 0)
    except DecodeError as e:
        raise DecodeFault(ip, e) from e
    state.decode_cache[ip] = instr
    return instr


def _load(state: CpuState, instr: Instr, width: int) -> int:
    if instr.has_memory_operand:
        return int.from_bytes(state.memory.read(effective_address(state.regs, instr), width), "little")
    return state.regs.read(instr.rm_field, width)


def _store(state: CpuState, instr: Instr, value: int, width: int) -> None:
    if instr.has_memory_operand:
        state.memory.write(effective_address(state.regs, instr), (value & _mask(width)).to_bytes(width, "little"))
    else:
        state.regs.write(instr.rm_field, value, width)


def _alu(kind: int, a: int, b: int, width: int) -> int:
    if kind == ALU_ADD:
        r = a + b
    elif kind == ALU_OR:
        r = a | b
    elif kind == ALU_AND:
        r = a & b
    elif kind == ALU_XOR:
        r = a ^ b
    else:
        raise ValueError(f"unsupported alu kind {kind}")
    return r & _mask(width)


def _push(state: CpuState, value: int) -> None:
    rsp = (state.regs.rsp - 8) & MASK64
    state.memory.write(rsp, (value & MASK64).to_bytes(8, "little"))
    state.regs.write(RSP, rsp)


def _pop(state: CpuState) -> int:
    rsp = state.regs.rsp
    value = int.from_bytes(state.memory.read(rsp, 8), "little")
    state.regs.write(RSP, rsp + 8)
    return value


def step(state: CpuState, hooks: PrivilegeHooks) -> StepOutcome:
    """Executes exactly one instruction (or one gate stub)."""
    regs = state.regs
    ip = regs.ip

    stub = hooks.stub_at(ip)
    if stub is not None:
        saved_rsp = regs.rsp
        return_address = _pop(state)
        regs.ip = return_address
        try:
            hooks.gate(state, stub)
        except Exception:
            regs.write(RSP, saved_rsp)
            regs.ip = ip
            raise
        regs.ip = return_address
        state.steps += 1
        return StepOutcome(stub, ip, return_address, stub=True)

    instr = _fetch_instr(state, ip)
    nxt = (ip + instr.encoded_len) & MASK64
    op = instr.op
    width = instr.width

    if instr.is_privileged:
        regs.ip = nxt
        try:
            hooks.privileged(state, instr)
        except PrivilegeTrap as e:
            regs.ip = ip
            e.address = ip
            raise
        except Exception:
            regs.ip = ip
            raise
        state.steps += 1
        return StepOutcome(instr, ip, regs.ip)

    new_ip = nxt
    if op is Op.NOP:
        pass
    elif op is Op.MOV_R_IMM:
        regs.write(instr.opcode_reg, instr.imm, width)
    elif op is Op.MOV_R8_IMM8:
        regs.write(instr.opcode_reg, instr.imm, 1)
    elif op is Op.MOV_RM_R:
        _store(state, instr, regs.read(instr.reg_field, width), width)
    elif op is Op.MOV_R_RM:
        regs.write(instr.reg_field, _load(state, instr, width), width)
    elif op is Op.LEA:
        regs.write(instr.reg_field, effective_address(regs, instr), width)
    elif op in (Op.ADD_RM_R, Op.XOR_RM_R, Op.XOR_RM8_R8):
        kind = ALU_ADD if op is Op.ADD_RM_R else ALU_XOR
        result = _alu(kind, _load(state, instr, width), regs.read(instr.reg_field, width), width)
        _store(state, instr, result, width)
        regs.zf = result == 0
    elif op is Op.ALU_RM_IMM:
        imm = _sign_extend(instr.imm, 32) & _mask(width)
        result = _alu(instr.reg_field, _load(state, instr, width), imm, width)
        _store(state, instr, result, width)
        regs.zf = result == 0
    elif op is Op.PUSH:
        _push(state, regs.read(instr.opcode_reg))
    elif op is Op.POP:
        regs.write(instr.opcode_reg, _pop(state))
    elif op is Op.JMP:
        new_ip = (nxt + instr.rel) & MASK64
    elif op is Op.JZ:
        new_ip = (nxt + instr.rel) & MASK64 if regs.zf else nxt
    elif op is Op.JNZ:
        new_ip = nxt if regs.zf else (nxt + instr.rel) & MASK64
    elif op is Op.CALL:
        _push(state, nxt)
        new_ip = (nxt + instr.rel) & MASK64
    elif op is Op.RET:
        new_ip = _pop(state)
    elif op is Op.RDMSR:
        value = regs.msr.get(regs.read(RCX, 4), 0)
        regs.write(RAX, value & MASK32, 4)
        regs.write(RDX, value >> 32, 4)
    else:
        raise ValueError(f"no semantics for {op}")

    regs.ip = new_ip
    state.steps += 1
    return StepOutcome(instr, ip, new_ip)


def run(state: CpuState, hooks: PrivilegeHooks, max_steps: int = 4096) -> RunResult:
    """Steps until ip reaches halt_at, a fault is raised or max_steps is exhausted."""
    taken = 0
    while taken < max_steps:
        if state.halt_at is not None and state.regs.ip == state.halt_at:
            return RunResult(taken, "halted")
        try:
            step(state, hooks)
        except MachineFault as e:
            logger.debug(f"Run stopped at {state.regs.ip:#x}: {e}")
            return RunResult(taken, "fault", e)
        taken += 1
    if state.halt_at is not None and state.regs.ip == state.halt_at:
        return RunResult(taken, "halted")
    return RunResult(taken, "step_limit")
