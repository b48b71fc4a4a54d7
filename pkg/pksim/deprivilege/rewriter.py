"""
Removes privileged byte sequences from a code buffer.

Intended privileged instructions become calls to gate stubs; unintended
occurrences are broken up by the strategy registered for their kind. Strategies are
applied to every occurrence, the buffer is re-laid out and re-scanned, and the loop
repeats until the scan is clean or the iteration bound is hit.
"""
import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from config import config
from pksim.deprivilege.scanner import (
    IN_DISPLACEMENT, IN_IMMEDIATE, IN_MODRM_OR_OPCODE, SPANS_BOUNDARY, Occurrence, contains_target, scan_decoded,
)
from pksim.errors import LoadError, RewriteStuck, UnresolvableBranch
from pksim.isa.decoder import decode, decode_program
from pksim.isa.encoder import call, encode, layout, lea, mem, mov_imm, movabs, nop, reg_reg, with_memory, with_registers
from pksim.isa.instr import (
    ALU_ADD, ALU_AND, ALU_OR, ALU_XOR, RAX, RBP, RBX, RCX, RDI, RDX, REG64, RSI, RSP, Instr, MemOperand, Op,
)
from pksim.logger import setup_logger

logger = setup_logger()

STRATEGIES = ("insert_nop", "reorder", "data_adjust", "register_reassign", "equivalent_replace", "gate_substitute")

# Fix-up constants tried in order; each candidate is checked clean before use
ADDITIVE = (1, 2, 3, 4, 5, 7, 0x10, 0x11, 0x100, 0x101, 0x1000, 0x1001, 0x10000, 0x10001, 0x1000000, 0x1010101)
MASKS = (0xFF, 0xFF00, 0xFF0000, 0xFF000000, 0x00FF00FF, 0xFF00FF00, 0x0F0F0F0F, 0xF0F0F0F0)
SCRATCH_ORDER = (RBX, RSI, RDI, RDX, RCX, RAX, RBP)

# ModRM ops whose reg field names a full-width register
REG_FIELD_OPS = frozenset({Op.MOV_RM_R, Op.MOV_R_RM, Op.LEA, Op.ADD_RM_R, Op.XOR_RM_R})
REG_FIELD_WRITERS = frozenset({Op.MOV_R_RM, Op.LEA})
RM_FIELD_READERS = frozenset({Op.ADD_RM_R, Op.XOR_RM_R, Op.ALU_RM_IMM})

MASK32 = 0xFFFFFFFF
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class GateStubSpec:
    base: int = config.rewriter.stub_base
    slot_size: int = config.rewriter.stub_slot_size

    def slot(self, index: int) -> int:
        return self.base + index * self.slot_size


@dataclass
class PlanStep:
    iteration: int
    occurrence: Occurrence
    strategy: str

    def line(self) -> str:
        o = self.occurrence
        return f"{self.iteration}  {o.offset:#06x}  {o.sequence.hex()}  {o.classification}  {self.strategy}"


@dataclass
class RewritePlan:
    steps: List[PlanStep] = field(default_factory=list)
    iterations: int = 0
    # Registers whose final value may differ from the original program's
    scratch: Set[int] = field(default_factory=set)
    # Stub slot address -> privileged instruction it stands for
    stubs: Dict[int, Instr] = field(default_factory=dict)

    def strategy_counts(self) -> Counter:
        return Counter(s.strategy for s in self.steps)

    def stub_table(self) -> Dict[str, str]:
        return {f"{address:#x}": encode(instr).hex() for address, instr in sorted(self.stubs.items())}

    def sidecar(self, base_address: int) -> dict:
        """What an equivalence check of the rewritten file needs besides its bytes."""
        return {
            "base": f"{base_address:#x}",
            "stubs": self.stub_table(),
            "scratch": [REG64[r] for r in sorted(self.scratch)],
        }

    def report(self) -> str:
        lines = [s.line() for s in self.steps]
        lines.append(f"iterations: {self.iterations}")
        if self.scratch:
            lines.append(f"scratch: {' '.join(REG64[r] for r in sorted(self.scratch))}")
        for address, raw in self.stub_table().items():
            lines.append(f"stub {address}: {raw}")
        return "\n".join(lines) + "\n"


def _clean(*instrs: Instr) -> bool:
    return not contains_target(b"".join(encode(i) for i in instrs))


def _fits_i32(value: int) -> bool:
    return -(1 << 31) <= value < (1 << 31)


def _index(instrs: List[Instr], instr: Instr) -> Optional[int]:
    return next((i for i, x in enumerate(instrs) if x is instr), None)


class Rewriter:
    def __init__(self, stub_spec: GateStubSpec, base_address: int = config.rewriter.program_base,
                 iteration_bound: int = config.rewriter.iteration_bound,
                 prefer_reorder: bool = config.rewriter.prefer_reorder):
        self.stub_spec = stub_spec
        self.base_address = base_address
        self.iteration_bound = iteration_bound
        self.prefer_reorder = prefer_reorder
        self.plan = RewritePlan()
        self._slots: Dict[bytes, int] = {}

    # --- Driver ---

    def run(self, code: bytes) -> Tuple[bytes, RewritePlan]:
        code = bytes(code)
        instrs = decode_program(code, self.base_address)
        occurrences = scan_decoded(code, instrs)
        while occurrences:
            if self.plan.iterations >= self.iteration_bound:
                raise RewriteStuck(f"{len(occurrences)} occurrences left after {self.iteration_bound} iterations",
                                   occurrences[0].offset)
            self.plan.iterations += 1
            before = len(occurrences)
            self._apply(instrs, occurrences)
            try:
                code = layout(instrs, self.base_address).code
            except UnresolvableBranch as e:
                raise RewriteStuck(f"cannot lay out the rewritten program: {e}", e.offset) from e
            instrs = decode_program(code, self.base_address)
            occurrences = scan_decoded(code, instrs)
            if occurrences and len(occurrences) >= before:
                raise RewriteStuck(f"iteration {self.plan.iterations} made no progress "
                                   f"({len(occurrences)} occurrences left)", occurrences[0].offset)
        logger.debug(f"Rewrite finished after {self.plan.iterations} iterations: {dict(self.plan.strategy_counts())}")
        return code, self.plan

    def _apply(self, instrs: List[Instr], occurrences: List[Occurrence]) -> None:
        by_offset = {i.offset: i for i in instrs}
        handled: Set[Tuple[int, str]] = set()
        # Instructions that become stub calls take their inner sequences with them
        substituted = {id(by_offset[o.instr_offset]) for o in occurrences if o.intended}
        # Highest offsets first so an instruction's later bytes are fixed before it is replaced
        for occ in sorted(occurrences, key=lambda o: -o.offset):
            instr = by_offset[occ.instr_offset]
            key = (id(instr), occ.classification)
            if key in handled or _index(instrs, instr) is None:
                continue
            if not occ.intended and id(instr) in substituted:
                continue
            handled.add(key)
            strategy = self._fix(instrs, instr, occ)
            self.plan.steps.append(PlanStep(self.plan.iterations, occ, strategy))

    def _fix(self, instrs: List[Instr], instr: Instr, occ: Occurrence) -> str:
        if occ.intended:
            return self._gate_substitute(instrs, instr)
        attempts: List[Tuple[str, Callable[[List[Instr], Instr], bool]]]
        if occ.kind == SPANS_BOUNDARY:
            attempts = [("insert_nop", self._nop_after)]
            if self.prefer_reorder:
                attempts.insert(0, ("reorder", self._reorder))
        elif occ.kind == IN_IMMEDIATE:
            attempts = [("data_adjust", self._adjust_immediate), ("equivalent_replace", self._equivalent_replace)]
        elif occ.kind == IN_DISPLACEMENT:
            if instr.is_branch:
                attempts = [("insert_nop", self._nop_in_span)]
            else:
                attempts = [("equivalent_replace", self._equivalent_replace),
                            ("data_adjust", self._adjust_displacement)]
        elif occ.kind == IN_MODRM_OR_OPCODE:
            attempts = [("register_reassign", self._register_reassign),
                        ("equivalent_replace", self._equivalent_replace)]
        else:
            raise ValueError(f"unknown occurrence kind {occ.kind}")
        for name, strategy in attempts:
            if strategy(instrs, instr):
                return name
        raise RewriteStuck(f"no clean strategy for {occ.classification} {occ.name} at {occ.offset:#x}", occ.offset)

    # --- List editing ---

    def _replace(self, instrs: List[Instr], old: Instr, new: List[Instr]) -> None:
        idx = _index(instrs, old)
        instrs[idx:idx + 1] = new
        for i in instrs:
            if i.target is old:
                i.target = new[0]

    def _branch_targets(self, instrs: List[Instr]) -> Set[int]:
        return {id(i.target) for i in instrs if isinstance(i.target, Instr)}

    def _reads(self, instr: Instr) -> Set[int]:
        if instr.op is Op.CALL and instr.abs_target in self.plan.stubs:
            return set(self.plan.stubs[instr.abs_target].effects().reads) | {RSP}
        return set(instr.effects().reads)

    def _has_backward_branch(self, instrs: List[Instr]) -> bool:
        position = {id(x): n for n, x in enumerate(instrs)}
        return any(isinstance(i.target, Instr) and position.get(id(i.target), n + 1) <= n
                   for n, i in enumerate(instrs))

    def _dead_after(self, instrs: List[Instr], idx: int, reg: int) -> bool:
        """
        Linear liveness: reg is overwritten before it is read in the rest of idx's block,
        or never read past the block. Programs that loop fall back to a whole-program check.
        """
        if self._has_backward_branch(instrs):
            return not any(reg in self._reads(i) for n, i in enumerate(instrs) if n != idx)
        for n in range(idx + 1, len(instrs)):
            instr = instrs[n]
            if reg in self._reads(instr):
                return False
            effects = instr.effects()
            if effects.control:
                return not any(reg in self._reads(i) for i in instrs[n + 1:])
            if reg in effects.writes:
                return True
        return True

    def _free_registers(self, instrs: List[Instr], instr: Instr) -> List[int]:
        """Scratch candidates for instr: not referenced by it and dead after it."""
        idx = _index(instrs, instr)
        effects = instr.effects()
        referenced = set(effects.reads) | set(effects.writes)
        return [r for r in SCRATCH_ORDER if r not in referenced and self._dead_after(instrs, idx, r)]

    # --- Strategies ---

    def _gate_substitute(self, instrs: List[Instr], instr: Instr) -> str:
        raw = encode(instr)
        if raw not in self._slots:
            address = self.stub_spec.slot(len(self._slots))
            self._slots[raw] = address
            self.plan.stubs[address] = dataclasses.replace(instr, offset=None, target=None)
        self._replace(instrs, instr, [call(abs_target=self._slots[raw])])
        return "gate_substitute"

    def _nop_after(self, instrs: List[Instr], instr: Instr) -> bool:
        instrs.insert(_index(instrs, instr) + 1, nop())
        return True

    def _nop_in_span(self, instrs: List[Instr], instr: Instr) -> bool:
        """Puts a nop between a branch and its target so the displacement changes by one."""
        idx = _index(instrs, instr)
        target = instr.target
        if isinstance(target, Instr):
            forward = _index(instrs, target) > idx
        else:
            # PROGRAM_END lies ahead; an absolute target stays put while the branch moves
            forward = instr.abs_target is None
        instrs.insert(idx + 1 if forward else idx, nop())
        return True

    def _reorder(self, instrs: List[Instr], instr: Instr) -> bool:
        """Swaps instr with its successor when the two are independent."""
        idx = _index(instrs, instr)
        if idx + 1 >= len(instrs):
            return False
        a, b = instrs[idx], instrs[idx + 1]
        targets = self._branch_targets(instrs)
        if id(a) in targets or id(b) in targets:
            return False
        ea, eb = a.effects(), b.effects()
        if ea.control or eb.control or ea.privileged or eb.privileged:
            return False
        if ea.writes & (eb.reads | eb.writes) or eb.writes & ea.reads:
            return False
        if (ea.mem_write and (eb.mem_read or eb.mem_write)) or (eb.mem_write and ea.mem_read):
            return False
        if (ea.flags_write and (eb.flags_write or eb.flags_read)) or (eb.flags_write and ea.flags_read):
            return False
        if not _clean(b, a):
            return False
        instrs[idx], instrs[idx + 1] = b, a
        return True

    def _adjust_immediate(self, instrs: List[Instr], instr: Instr) -> bool:
        """Splits an immediate into two clean constants that combine to the original."""
        if instr.op is Op.MOV_R_IMM:
            reg, wide = instr.opcode_reg, instr.rex_w
            mask = MASK64 if wide else MASK32
            for k in ADDITIVE:
                first = movabs(reg, (instr.imm - k) & mask) if wide else mov_imm(reg, (instr.imm - k) & mask)
                # lea leaves the flags alone
                second = lea(reg, mem(base=reg, disp=k), wide=wide)
                if _clean(first, second):
                    self._replace(instrs, instr, [first, second])
                    return True
            return False
        if instr.op is Op.ALU_RM_IMM:
            kind, imm = instr.reg_field, instr.imm
            if kind == ALU_ADD:
                pairs = [((imm - k) & MASK32, k) for k in ADDITIVE]
            elif kind == ALU_XOR:
                pairs = [(imm ^ k, k) for k in ADDITIVE + MASKS]
            elif kind == ALU_OR:
                pairs = [(imm & ~k & MASK32, imm & k) for k in MASKS]
            elif kind == ALU_AND:
                pairs = [(imm | k, (imm | ~k) & MASK32) for k in MASKS]
            else:
                return False
            for a, b in pairs:
                first = dataclasses.replace(instr, imm=a, offset=None)
                second = dataclasses.replace(instr, imm=b, offset=None, target=None)
                if _clean(first, second):
                    self._replace(instrs, instr, [first, second])
                    return True
        return False

    def _adjust_displacement(self, instrs: List[Instr], instr: Instr) -> bool:
        """Moves part of the displacement into the base register and back out."""
        m = instr.mem_operand()
        if m is None or m.base is None:
            return False
        effects = instr.effects()
        others = set()
        if m.index is not None:
            others.add(m.index)
        if instr.op in REG_FIELD_OPS:
            others.add(instr.reg_field)
        if instr.op is Op.XOR_RM8_R8:
            others.add(instr.reg_field & 3)
        if m.base not in effects.writes and m.base not in others:
            for k in ADDITIVE:
                disp = m.disp - k
                if not _fits_i32(disp):
                    continue
                pre = lea(m.base, mem(base=m.base, disp=k))
                mid = with_memory(instr, MemOperand(m.base, m.index, m.scale, disp))
                post = lea(m.base, mem(base=m.base, disp=-k))
                if _clean(pre, mid, post):
                    self._replace(instrs, instr, [pre, mid, post])
                    return True
        # Base is busy: carry the adjusted base in a dead register instead
        for scratch in self._free_registers(instrs, instr):
            for k in ADDITIVE:
                disp = m.disp - k
                if not _fits_i32(disp):
                    continue
                pre = lea(scratch, mem(base=m.base, disp=k))
                mid = with_memory(instr, MemOperand(scratch, m.index, m.scale, disp))
                if _clean(pre, mid):
                    self._replace(instrs, instr, [pre, mid])
                    self.plan.scratch.add(scratch)
                    return True
        return False

    def _equivalent_replace(self, instrs: List[Instr], instr: Instr) -> bool:
        """Same operation, different encoding."""
        candidates: List[Instr] = []
        m = instr.mem_operand()
        if m is not None:
            if m.base is not None and m.index is not None and m.scale == 1 and m.base != RSP:
                candidates.append(with_memory(instr, MemOperand(m.index, m.base, 1, m.disp)))
            if m.base is not None:
                candidates.append(with_memory(instr, m, force_disp32=True))
                candidates.append(with_memory(instr, m))
        elif instr.op in (Op.MOV_RM_R, Op.MOV_R_RM) and instr.modrm is not None:
            flipped = Op.MOV_R_RM if instr.op is Op.MOV_RM_R else Op.MOV_RM_R
            candidates.append(reg_reg(flipped, instr.rm_field, instr.reg_field, wide=instr.rex_w))
        for candidate in candidates:
            if encode(candidate) != encode(instr) and _clean(candidate):
                self._replace(instrs, instr, [candidate])
                return True
        return False

    def _register_fields(self, instr: Instr) -> List[Tuple[str, int]]:
        fields: List[Tuple[str, int]] = []
        m = instr.mem_operand()
        if m is not None:
            if m.base is not None:
                fields.append(("base", m.base))
            if m.index is not None:
                fields.append(("index", m.index))
        elif instr.op in REG_FIELD_OPS or instr.op is Op.ALU_RM_IMM:
            fields.append(("rm", instr.rm_field))
        if instr.op in REG_FIELD_OPS:
            fields.append(("reg", instr.reg_field))
        return fields

    def _with_field(self, instr: Instr, name: str, reg: int) -> Optional[Instr]:
        m = instr.mem_operand()
        if name == "base":
            return with_memory(instr, MemOperand(reg, m.index, m.scale, m.disp))
        if name == "index":
            if reg == RSP:
                return None
            return with_memory(instr, MemOperand(m.base, reg, m.scale, m.disp))
        if name == "rm":
            return with_registers(instr, rm=reg)
        return with_registers(instr, reg=reg)

    def _register_reassign(self, instrs: List[Instr], instr: Instr) -> bool:
        """Moves one register operand into a scratch register that is dead after instr."""
        effects = instr.effects()
        free = self._free_registers(instrs, instr)
        for name, reg in self._register_fields(instr):
            reads = name in ("base", "index") or (name == "reg" and instr.op not in REG_FIELD_WRITERS) \
                or (name == "rm" and instr.op in RM_FIELD_READERS)
            writes = (name == "reg" and instr.op in REG_FIELD_WRITERS) \
                or (name == "rm" and reg in effects.writes)
            for scratch in free:
                replaced = self._with_field(instr, name, scratch)
                if replaced is None:
                    continue
                group = ([reg_reg(Op.MOV_RM_R, reg, scratch, wide=True)] if reads else []) + [replaced] \
                    + ([reg_reg(Op.MOV_RM_R, scratch, reg, wide=True)] if writes else [])
                if _clean(*group):
                    self._replace(instrs, instr, group)
                    self.plan.scratch.add(scratch)
                    return True
        return False


def rewrite(code: bytes, stub_spec: Optional[GateStubSpec] = None, base_address: int = config.rewriter.program_base,
            iteration_bound: int = config.rewriter.iteration_bound,
            prefer_reorder: bool = config.rewriter.prefer_reorder) -> Tuple[bytes, RewritePlan]:
    """
    Returns code with no unintended privileged sequences and every intended
    privileged instruction replaced by a call to its gate stub. Raises RewriteStuck.
    """
    return Rewriter(stub_spec or GateStubSpec(), base_address, iteration_bound, prefer_reorder).run(code)


def read_sidecar(data: dict) -> Tuple[int, Dict[int, Instr], Set[int]]:
    """(base address, stub table, scratch registers) from RewritePlan.sidecar output."""
    try:
        base = int(data.get("base", hex(config.rewriter.program_base)), 0)
        stubs = {int(address, 0): decode(bytes.fromhex(raw)) for address, raw in data.get("stubs", {}).items()}
        scratch = {REG64.index(name) for name in data.get("scratch", [])}
    except (AttributeError, TypeError, ValueError) as e:
        raise LoadError(f"malformed stub sidecar: {e}") from e
    return base, stubs, scratch
