"""
Instruction model for the supported x86-64 subset.

An Instr keeps every encoded field (prefix, opcode, ModRM, SIB, displacement,
immediate, relative displacement) so that re-encoding a decoded instruction
reproduces the original bytes. Branches additionally carry a link to their target
instruction, which lets the rewriter insert code without renumbering anything.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, Optional, Union

REX_W = 0x48

RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)

REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi")
REG32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
REG8 = ("al", "cl", "dl", "bl", "ah", "ch", "dh", "bh")

# Control registers reachable through mov to/from CRn without REX.R
VALID_CRS = (0, 2, 3, 4)


class Op(str, Enum):
    NOP = "nop"
    MOV_R_IMM = "mov_r_imm"
    MOV_R8_IMM8 = "mov_r8_imm8"
    MOV_RM_R = "mov_rm_r"
    MOV_R_RM = "mov_r_rm"
    LEA = "lea"
    ADD_RM_R = "add_rm_r"
    XOR_RM8_R8 = "xor_rm8_r8"
    XOR_RM_R = "xor_rm_r"
    ALU_RM_IMM = "alu_rm_imm"
    PUSH = "push"
    POP = "pop"
    JMP = "jmp"
    JZ = "jz"
    JNZ = "jnz"
    CALL = "call"
    RET = "ret"
    WRMSR = "wrmsr"
    RDMSR = "rdmsr"
    MOV_CR_R = "mov_cr_r"
    MOV_R_CR = "mov_r_cr"
    SYSREG = "sysreg"


# Instructions removed from every context but the monitor
PRIVILEGED_OPS = frozenset({Op.WRMSR, Op.MOV_CR_R, Op.MOV_R_CR, Op.SYSREG})
BRANCH_OPS = frozenset({Op.JMP, Op.JZ, Op.JNZ, Op.CALL})
CONTROL_OPS = BRANCH_OPS | {Op.RET}
REX_W_OPS = frozenset({Op.MOV_R_IMM, Op.MOV_RM_R, Op.MOV_R_RM, Op.LEA, Op.ADD_RM_R, Op.PUSH, Op.POP})

# 0x81 group: ModRM.reg selects the operation
ALU_ADD, ALU_OR, ALU_AND, ALU_XOR = 0, 1, 4, 6
ALU_NAMES = {ALU_ADD: "add", ALU_OR: "or", ALU_AND: "and", ALU_XOR: "xor"}

# 0x0F 0x01 group: ModRM.reg selects the operation (memory forms only)
SGDT, SIDT, LGDT, LIDT = 0, 1, 2, 3
SYSREG_NAMES = {SGDT: "sgdt", SIDT: "sidt", LGDT: "lgdt", LIDT: "lidt"}


class _ProgramEnd:
    """Branch target meaning 'the byte after the last instruction'."""

    def __repr__(self) -> str:
        return "PROGRAM_END"


PROGRAM_END = _ProgramEnd()


@dataclass(frozen=True)
class MemOperand:
    base: Optional[int]
    index: Optional[int]
    scale: int
    disp: int

    def registers(self) -> FrozenSet[int]:
        return frozenset(r for r in (self.base, self.index) if r is not None)


@dataclass(frozen=True)
class Effects:
    reads: FrozenSet[int]
    writes: FrozenSet[int]
    mem_read: bool = False
    mem_write: bool = False
    flags_read: bool = False
    flags_write: bool = False
    control: bool = False
    privileged: bool = False


@dataclass(eq=False)
class Instr:
    op: Op
    opcode: bytes
    rex_w: bool = False
    modrm: Optional[int] = None
    sib: Optional[int] = None
    disp: int = 0
    disp_size: int = 0
    imm: int = 0
    imm_size: int = 0
    rel: int = 0
    rel_size: int = 0
    # Offset of the instruction in the buffer it was decoded from
    offset: Optional[int] = None
    # Branch target: another Instr of the same list, PROGRAM_END, or an absolute address
    target: Optional[Union["Instr", _ProgramEnd]] = field(default=None, repr=False)
    abs_target: Optional[int] = None
    # abs_target points inside the decoded buffer but not at an instruction boundary
    interior_target: bool = False

    @property
    def encoded_len(self) -> int:
        return ((1 if self.rex_w else 0) + len(self.opcode)
                + (0 if self.modrm is None else 1) + (0 if self.sib is None else 1)
                + self.disp_size + self.imm_size + self.rel_size)

    # --- Field accessors ---

    @property
    def mod(self) -> int:
        return (self.modrm or 0) >> 6

    @property
    def reg_field(self) -> int:
        return ((self.modrm or 0) >> 3) & 7

    @property
    def rm_field(self) -> int:
        return (self.modrm or 0) & 7

    @property
    def opcode_reg(self) -> int:
        """Register encoded in the low bits of +r opcodes (mov/push/pop)."""
        return self.opcode[-1] & 7

    @property
    def is_branch(self) -> bool:
        return self.op in BRANCH_OPS

    @property
    def is_privileged(self) -> bool:
        return self.op in PRIVILEGED_OPS

    @property
    def has_memory_operand(self) -> bool:
        return self.modrm is not None and self.mod != 3

    @property
    def width(self) -> int:
        """Operand width in bytes."""
        if self.op in (Op.XOR_RM8_R8, Op.MOV_R8_IMM8):
            return 1
        if self.op in (Op.PUSH, Op.POP, Op.MOV_CR_R, Op.MOV_R_CR) or self.rex_w:
            return 8
        return 4

    def mem_operand(self) -> Optional[MemOperand]:
        if not self.has_memory_operand:
            return None
        mod, rm = self.mod, self.rm_field
        if rm == 4:
            sib = self.sib or 0
            scale = 1 << (sib >> 6)
            index = (sib >> 3) & 7
            base = sib & 7
            return MemOperand(
                base=None if (base == 5 and mod == 0) else base,
                index=None if index == 4 else index,
                scale=scale,
                disp=self.disp,
            )
        if mod == 0 and rm == 5:
            # No RIP-relative addressing in this subset: absolute disp32
            return MemOperand(base=None, index=None, scale=1, disp=self.disp)
        return MemOperand(base=rm, index=None, scale=1, disp=self.disp)

    def effects(self) -> Effects:
        """Registers, memory and flags touched by the instruction (for liveness and reordering)."""
        op = self.op
        mem = self.mem_operand()
        addr_regs = mem.registers() if mem else frozenset()
        rm_reg = frozenset() if mem else frozenset({self.rm_field})
        reg = frozenset({self.reg_field})

        if op is Op.NOP:
            return Effects(frozenset(), frozenset())
        if op is Op.MOV_R_IMM:
            return Effects(frozenset(), frozenset({self.opcode_reg}))
        if op is Op.MOV_R8_IMM8:
            parent = frozenset({self.opcode_reg & 3})
            return Effects(parent, parent)
        if op is Op.MOV_RM_R:
            return Effects(reg | addr_regs, rm_reg, mem_write=mem is not None)
        if op in (Op.MOV_R_RM, Op.LEA):
            return Effects(addr_regs | rm_reg, reg, mem_read=mem is not None and op is Op.MOV_R_RM)
        if op in (Op.ADD_RM_R, Op.XOR_RM_R):
            return Effects(reg | addr_regs | rm_reg, rm_reg, mem_read=mem is not None,
                           mem_write=mem is not None, flags_write=True)
        if op is Op.XOR_RM8_R8:
            reg8 = frozenset({self.reg_field & 3})
            rm8 = frozenset() if mem else frozenset({self.rm_field & 3})
            return Effects(reg8 | addr_regs | rm8, rm8, mem_read=mem is not None,
                           mem_write=mem is not None, flags_write=True)
        if op is Op.ALU_RM_IMM:
            return Effects(addr_regs | rm_reg, rm_reg, mem_read=mem is not None,
                           mem_write=mem is not None, flags_write=True)
        if op is Op.PUSH:
            return Effects(frozenset({self.opcode_reg, RSP}), frozenset({RSP}), mem_write=True)
        if op is Op.POP:
            return Effects(frozenset({RSP}), frozenset({self.opcode_reg, RSP}), mem_read=True)
        if op is Op.JMP:
            return Effects(frozenset(), frozenset(), control=True)
        if op in (Op.JZ, Op.JNZ):
            return Effects(frozenset(), frozenset(), flags_read=True, control=True)
        if op is Op.CALL:
            return Effects(frozenset({RSP}), frozenset({RSP}), mem_write=True, control=True)
        if op is Op.RET:
            return Effects(frozenset({RSP}), frozenset({RSP}), mem_read=True, control=True)
        if op is Op.RDMSR:
            return Effects(frozenset({RCX}), frozenset({RAX, RDX}))
        if op is Op.WRMSR:
            return Effects(frozenset({RAX, RCX, RDX}), frozenset(), privileged=True)
        if op is Op.MOV_CR_R:
            return Effects(frozenset({self.rm_field}), frozenset(), privileged=True)
        if op is Op.MOV_R_CR:
            return Effects(frozenset(), frozenset({self.rm_field}), privileged=True)
        if op is Op.SYSREG:
            storing = self.reg_field in (SGDT, SIDT)
            return Effects(addr_regs, frozenset(), mem_read=not storing, mem_write=storing, privileged=True)
        raise ValueError(f"no effects for {op}")

    def __repr__(self) -> str:
        where = f"@{self.offset:#x}" if self.offset is not None else ""
        return f"<{self.op.value}{where} {self.encoded_len}B>"
