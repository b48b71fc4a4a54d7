"""
Seeded corpus of subset programs for exercising the scanner and the rewriter:
hand-built boundary cases plus random straight-line / forward-branch programs.
"""
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import config
from pksim.isa.encoder import (
    alu_imm, alu_imm_mem, assemble, jmp, jnz, jz, lea, mem, mov_cr_r, mov_imm, mov_r8_imm8, mov_r_cr, movabs,
    nop, pop, push, rdmsr, reg_mem, reg_reg, sysreg, wrmsr,
)
from pksim.isa.instr import (
    ALU_ADD, ALU_AND, ALU_OR, ALU_XOR, LGDT, LIDT, PROGRAM_END, RAX, RBX, RCX, RDI, RDX, RSI, SGDT, SIDT,
    VALID_CRS, Instr, MemOperand, Op,
)

MAX_INSTRS = 64
# rbp and rsp are left to the rewriter
REGS = (RAX, RCX, RDX, RBX, RSI, RDI)
ALU_KINDS = (ALU_ADD, ALU_OR, ALU_AND, ALU_XOR)
TARGET_WORDS = (0x300F, 0x220F, 0x200F, 0x010F)


def planted_cases() -> Dict[str, bytes]:
    """Constructed programs with one known occurrence each."""
    cases: List[Tuple[str, List[Instr]]] = [
        ("wrmsr", [wrmsr()]),
        ("spans_boundary", [mov_r8_imm8(0, 0x0F), reg_reg(Op.XOR_RM8_R8, 0, 0)]),
        ("in_immediate", [mov_imm(RAX, 0x300F)]),
        ("in_immediate_64", [movabs(RDX, 0x0000300F00000000)]),
        ("in_immediate_alu_add", [alu_imm(ALU_ADD, RCX, 0x220F)]),
        ("in_immediate_alu_or", [alu_imm(ALU_OR, RBX, 0x0030_0F00)]),
        ("in_immediate_alu_and", [alu_imm(ALU_AND, RSI, 0xFFFF_300F)]),
        ("in_immediate_alu_xor", [alu_imm(ALU_XOR, RDI, 0x010F)]),
        ("in_displacement", [reg_mem(Op.MOV_R_RM, RAX, mem(RBX, 0x300F))]),
        ("in_displacement_busy_base", [reg_mem(Op.MOV_R_RM, RBX, mem(RBX, 0x300F))]),
        ("in_displacement_disp8", [alu_imm_mem(ALU_ADD, mem(RSI, 0x0F), 0x30)]),
        ("in_modrm", [alu_imm_mem(ALU_OR, mem(RDI), 0x30)]),
        ("in_sib", [reg_mem(Op.MOV_RM_R, RAX, mem(RDI, 0x30, index=RCX))]),
        ("mov_to_cr", [mov_imm(RAX, 0x1234), mov_cr_r(4, RAX)]),
        ("mov_from_cr", [mov_r_cr(RCX, 3)]),
        ("sgdt", [sysreg(SGDT, mem(RDI, 8))]),
        ("sidt", [sysreg(SIDT, mem(RSI))]),
        ("lgdt", [sysreg(LGDT, mem(RBX, 16))]),
        ("pkrs_write", [mov_imm(RCX, config.machine.pkrs_msr), mov_imm(RAX, 0x55555554),
                        mov_imm(RDX, 0), wrmsr()]),
        ("branch_over_wrmsr", [alu_imm(ALU_AND, RAX, 1), jz(), wrmsr(), nop()]),
        ("mixed", [mov_imm(RAX, 0x300F), reg_mem(Op.MOV_RM_R, RAX, mem(RDI, 0x30, index=RCX)),
                   mov_r8_imm8(1, 0x0F), reg_reg(Op.XOR_RM8_R8, 0, 1), wrmsr()]),
    ]
    return {name: assemble(instrs, config.rewriter.program_base) for name, instrs in cases}


class ProgramGenerator:
    """Random programs of at most MAX_INSTRS instructions; branches only go forward."""

    def __init__(self, rng: np.random.Generator, plant_rate: float = 0.15):
        self.rng = rng
        self.plant_rate = plant_rate

    # --- Operands ---

    def _reg(self) -> int:
        return REGS[int(self.rng.integers(len(REGS)))]

    def _imm32(self) -> int:
        if self.rng.random() < self.plant_rate:
            word = TARGET_WORDS[int(self.rng.integers(len(TARGET_WORDS)))]
            shift = 8 * int(self.rng.integers(3))
            return (word << shift) | int(self.rng.integers(0x100))
        return int(self.rng.integers(0, 1 << 32))

    def _disp(self) -> int:
        roll = self.rng.random()
        if roll < self.plant_rate:
            return TARGET_WORDS[int(self.rng.integers(len(TARGET_WORDS)))]
        if roll < 0.5:
            return int(self.rng.integers(-128, 128))
        if roll < 0.6:
            return 0
        return int(self.rng.integers(-(1 << 31), 1 << 31))

    def _mem(self) -> MemOperand:
        index = self._reg() if self.rng.random() < 0.3 else None
        scale = int(self.rng.choice([1, 2, 4, 8])) if index is not None else 1
        return mem(self._reg(), self._disp(), index, scale)

    # --- Instructions ---

    def _instr(self, pending: List[Instr], depth: List[int]) -> Instr:
        kind = int(self.rng.integers(16))
        wide = bool(self.rng.integers(2))
        if kind == 0:
            return mov_imm(self._reg(), self._imm32())
        if kind == 1:
            return movabs(self._reg(), (self._imm32() << 32) | self._imm32())
        if kind == 2:
            imm = 0x0F if self.rng.random() < self.plant_rate else int(self.rng.integers(0x100))
            return mov_r8_imm8(int(self.rng.integers(8)), imm)
        if kind == 3:
            op = (Op.MOV_RM_R, Op.MOV_R_RM, Op.ADD_RM_R, Op.XOR_RM_R)[int(self.rng.integers(4))]
            return reg_reg(op, self._reg(), self._reg(), wide=wide and op is not Op.XOR_RM_R)
        if kind == 4:
            return reg_reg(Op.XOR_RM8_R8, int(self.rng.integers(8)), int(self.rng.integers(8)))
        if kind == 5:
            op = (Op.MOV_RM_R, Op.MOV_R_RM, Op.ADD_RM_R, Op.XOR_RM_R)[int(self.rng.integers(4))]
            return reg_mem(op, self._reg(), self._mem(), wide=wide and op is not Op.XOR_RM_R)
        if kind == 6:
            return lea(self._reg(), self._mem(), wide=wide)
        if kind == 7:
            return alu_imm(ALU_KINDS[int(self.rng.integers(4))], self._reg(), self._imm32())
        if kind == 8:
            return alu_imm_mem(ALU_KINDS[int(self.rng.integers(4))], self._mem(), self._imm32())
        if kind == 9:
            depth[0] += 1
            return push(self._reg())
        if kind == 10 and depth[0] > 0:
            depth[0] -= 1
            return pop(self._reg())
        if kind == 11:
            branch = (jmp, jz, jnz)[int(self.rng.integers(3))](wide=bool(self.rng.random() < 0.2))
            pending.append(branch)
            return branch
        if kind == 12:
            return (wrmsr, rdmsr)[int(self.rng.integers(2))]()
        if kind == 13:
            cr = VALID_CRS[int(self.rng.integers(len(VALID_CRS)))]
            return mov_cr_r(cr, self._reg()) if self.rng.integers(2) else mov_r_cr(self._reg(), cr)
        if kind == 14:
            return sysreg((SGDT, SIDT, LGDT, LIDT)[int(self.rng.integers(4))], self._mem())
        return nop()

    def program(self, n_instrs: Optional[int] = None) -> bytes:
        n = n_instrs if n_instrs is not None else int(self.rng.integers(1, MAX_INSTRS + 1))
        instrs: List[Instr] = []
        pending: List[Instr] = []
        depth = [0]
        for _ in range(n):
            instrs.append(self._instr(pending, depth))
        for branch in pending:
            at = next(i for i, x in enumerate(instrs) if x is branch)
            later = len(instrs) - at - 1
            # Target one of the later instructions or the end of the program
            pick = int(self.rng.integers(later + 1))
            branch.target = instrs[at + 1 + pick] if pick < later else PROGRAM_END
        return assemble(instrs, config.rewriter.program_base)


def random_programs(n: int, seed: int = config.harness.default_seed) -> Iterator[Tuple[str, bytes]]:
    generator = ProgramGenerator(np.random.default_rng(seed))
    for i in range(n):
        yield f"random-{i}", generator.program()


def corpus(n_random: int, seed: int = config.harness.default_seed) -> Iterator[Tuple[str, bytes]]:
    """Planted cases first, then n_random generated programs."""
    yield from planted_cases().items()
    yield from random_programs(n_random, seed)
