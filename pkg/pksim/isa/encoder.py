"""
Encoder, branch re-layout and small constructors for building instruction lists.
"""
import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from pksim.errors import UnresolvableBranch
from pksim.isa.instr import (
    ALU_ADD, PROGRAM_END, REX_W, RSP, RBP, Instr, MemOperand, Op,
)

# rel8 forms and their rel32 replacements
_PROMOTIONS = {
    b"\xeb": b"\xe9",
    b"\x74": b"\x0f\x84",
    b"\x75": b"\x0f\x85",
}


def _fits_i8(value: int) -> bool:
    return -128 <= value <= 127


def _fits_i32(value: int) -> bool:
    return -(1 << 31) <= value < (1 << 31)


def encode(instr: Instr, rel: Optional[int] = None, opcode: Optional[bytes] = None,
           rel_size: Optional[int] = None) -> bytes:
    """Encodes one instruction from its fields; rel/opcode/rel_size override the stored ones."""
    opcode = instr.opcode if opcode is None else opcode
    rel = instr.rel if rel is None else rel
    rel_size = instr.rel_size if rel_size is None else rel_size
    out = bytearray()
    if instr.rex_w:
        out.append(REX_W)
    out += opcode
    if instr.modrm is not None:
        out.append(instr.modrm)
    if instr.sib is not None:
        out.append(instr.sib)
    if instr.disp_size:
        out += (instr.disp & ((1 << (8 * instr.disp_size)) - 1)).to_bytes(instr.disp_size, "little")
    if instr.imm_size:
        out += (instr.imm & ((1 << (8 * instr.imm_size)) - 1)).to_bytes(instr.imm_size, "little")
    if rel_size:
        out += (rel & ((1 << (8 * rel_size)) - 1)).to_bytes(rel_size, "little")
    return bytes(out)


@dataclass
class Layout:
    code: bytes
    # id(instr) -> offset in code
    offsets: Dict[int, int]
    promoted: int = 0

    def offset_of(self, instr: Instr) -> int:
        return self.offsets[id(instr)]


def layout(instrs: List[Instr], base_address: int = 0) -> Layout:
    """
    Lays out the list, resolving every linked branch and promoting rel8 branches
    whose displacement no longer fits. Promotion is never undone, so the loop terminates.
    """
    members = {id(i) for i in instrs}
    forms: Dict[int, Tuple[bytes, int]] = {id(i): (i.opcode, i.rel_size) for i in instrs}

    def size(i: Instr) -> int:
        opcode, rel_size = forms[id(i)]
        return i.encoded_len - len(i.opcode) - i.rel_size + len(opcode) + rel_size

    while True:
        offsets: Dict[int, int] = {}
        pos = 0
        for i in instrs:
            offsets[id(i)] = pos
            pos += size(i)
        end = pos
        moved = any(i.offset is None or offsets[id(i)] != i.offset for i in instrs)

        rels: Dict[int, int] = {}
        promote: List[Instr] = []
        for i in instrs:
            if not i.is_branch:
                continue
            nxt = offsets[id(i)] + size(i)
            if i.target is PROGRAM_END:
                dest = end
            elif isinstance(i.target, Instr):
                if id(i.target) not in members:
                    raise UnresolvableBranch(i.offset, "(target instruction was removed)")
                dest = offsets[id(i.target)]
            elif i.abs_target is not None:
                if i.interior_target and moved:
                    raise UnresolvableBranch(i.offset, f"(target {i.abs_target:#x} is inside an instruction)")
                dest = i.abs_target - base_address
            else:
                # Unlinked: keep the stored displacement
                rels[id(i)] = i.rel
                continue
            rel = dest - nxt
            _, rel_size = forms[id(i)]
            if rel_size == 1 and not _fits_i8(rel):
                promote.append(i)
            elif not _fits_i32(rel):
                raise UnresolvableBranch(i.offset, f"(displacement {rel} out of range)")
            rels[id(i)] = rel

        if not promote:
            break
        for i in promote:
            opcode, _ = forms[id(i)]
            forms[id(i)] = (_PROMOTIONS[opcode], 4)

    code = bytearray()
    for i in instrs:
        opcode, rel_size = forms[id(i)]
        code += encode(i, rel=rels.get(id(i), i.rel), opcode=opcode, rel_size=rel_size)
    promoted = sum(1 for i in instrs if forms[id(i)][0] != i.opcode)
    return Layout(bytes(code), offsets, promoted)


def reencode(instrs: List[Instr], base_address: int = 0) -> bytes:
    return layout(instrs, base_address).code


# --- Constructors ---

def _mem_fields(reg: int, mem: MemOperand, force_disp32: bool = False) -> Dict[str, object]:
    """ModRM/SIB/displacement fields addressing mem with reg in ModRM.reg."""
    reg = reg & 7
    if mem.base is None and mem.index is None:
        return dict(modrm=(reg << 3) | 5, sib=None, disp=mem.disp, disp_size=4)

    scale_bits = {1: 0, 2: 1, 4: 2, 8: 3}[mem.scale]
    if mem.base is None:
        sib = (scale_bits << 6) | (mem.index << 3) | 5
        return dict(modrm=(reg << 3) | 4, sib=sib, disp=mem.disp, disp_size=4)

    if force_disp32:
        mod, disp_size = 2, 4
    elif mem.disp == 0 and mem.base != RBP:
        mod, disp_size = 0, 0
    elif _fits_i8(mem.disp):
        mod, disp_size = 1, 1
    else:
        mod, disp_size = 2, 4

    if mem.index is not None or mem.base == RSP:
        index = 4 if mem.index is None else mem.index
        sib = (scale_bits << 6) | (index << 3) | mem.base
        return dict(modrm=(mod << 6) | (reg << 3) | 4, sib=sib, disp=mem.disp, disp_size=disp_size)
    return dict(modrm=(mod << 6) | (reg << 3) | mem.base, sib=None, disp=mem.disp, disp_size=disp_size)


def mem(base: Optional[int] = None, disp: int = 0, index: Optional[int] = None, scale: int = 1) -> MemOperand:
    return MemOperand(base=base, index=index, scale=scale, disp=disp)


def nop() -> Instr:
    return Instr(Op.NOP, b"\x90")


def mov_imm(reg: int, imm: int) -> Instr:
    return Instr(Op.MOV_R_IMM, bytes([0xB8 + reg]), imm=imm & 0xFFFFFFFF, imm_size=4)


def movabs(reg: int, imm: int) -> Instr:
    return Instr(Op.MOV_R_IMM, bytes([0xB8 + reg]), rex_w=True, imm=imm & (2**64 - 1), imm_size=8)


def mov_r8_imm8(reg8: int, imm: int) -> Instr:
    return Instr(Op.MOV_R8_IMM8, bytes([0xB0 + reg8]), imm=imm & 0xFF, imm_size=1)


_MODRM_OPCODES = {
    Op.MOV_RM_R: b"\x89",
    Op.MOV_R_RM: b"\x8b",
    Op.LEA: b"\x8d",
    Op.ADD_RM_R: b"\x01",
    Op.XOR_RM8_R8: b"\x30",
    Op.XOR_RM_R: b"\x31",
}


def reg_reg(op: Op, reg: int, rm: int, wide: bool = False) -> Instr:
    """Register-direct form: ModRM.reg=reg, ModRM.rm=rm."""
    return Instr(op, _MODRM_OPCODES[op], rex_w=wide, modrm=0xC0 | (reg << 3) | rm)


def reg_mem(op: Op, reg: int, operand: MemOperand, wide: bool = False, force_disp32: bool = False) -> Instr:
    return Instr(op, _MODRM_OPCODES[op], rex_w=wide, **_mem_fields(reg, operand, force_disp32))


def lea(reg: int, operand: MemOperand, wide: bool = True, force_disp32: bool = False) -> Instr:
    return reg_mem(Op.LEA, reg, operand, wide=wide, force_disp32=force_disp32)


def alu_imm(kind: int, rm: int, imm: int) -> Instr:
    """add/or/and/xor r32, imm32 (0x81 group)."""
    return Instr(Op.ALU_RM_IMM, b"\x81", modrm=0xC0 | (kind << 3) | rm, imm=imm & 0xFFFFFFFF, imm_size=4)


def alu_imm_mem(kind: int, operand: MemOperand, imm: int, force_disp32: bool = False) -> Instr:
    return Instr(Op.ALU_RM_IMM, b"\x81", imm=imm & 0xFFFFFFFF, imm_size=4,
                 **_mem_fields(kind, operand, force_disp32))


def add_imm(rm: int, imm: int) -> Instr:
    return alu_imm(ALU_ADD, rm, imm)


def push(reg: int) -> Instr:
    return Instr(Op.PUSH, bytes([0x50 + reg]))


def pop(reg: int) -> Instr:
    return Instr(Op.POP, bytes([0x58 + reg]))


def _branch(op: Op, short: bytes, near: bytes, target, abs_target: Optional[int], wide: bool) -> Instr:
    opcode, rel_size = (near, 4) if wide else (short, 1)
    instr = Instr(op, opcode, rel_size=rel_size)
    if abs_target is not None:
        instr.abs_target = abs_target
    else:
        instr.target = target
    return instr


def jmp(target=PROGRAM_END, abs_target: Optional[int] = None, wide: bool = False) -> Instr:
    return _branch(Op.JMP, b"\xeb", b"\xe9", target, abs_target, wide)


def jz(target=PROGRAM_END, abs_target: Optional[int] = None, wide: bool = False) -> Instr:
    return _branch(Op.JZ, b"\x74", b"\x0f\x84", target, abs_target, wide)


def jnz(target=PROGRAM_END, abs_target: Optional[int] = None, wide: bool = False) -> Instr:
    return _branch(Op.JNZ, b"\x75", b"\x0f\x85", target, abs_target, wide)


def call(target=PROGRAM_END, abs_target: Optional[int] = None) -> Instr:
    return _branch(Op.CALL, b"\xe8", b"\xe8", target, abs_target, True)


def ret() -> Instr:
    return Instr(Op.RET, b"\xc3")


def wrmsr() -> Instr:
    return Instr(Op.WRMSR, b"\x0f\x30")


def rdmsr() -> Instr:
    return Instr(Op.RDMSR, b"\x0f\x32")


def mov_cr_r(cr: int, reg: int) -> Instr:
    return Instr(Op.MOV_CR_R, b"\x0f\x22", modrm=0xC0 | (cr << 3) | reg)


def mov_r_cr(reg: int, cr: int) -> Instr:
    return Instr(Op.MOV_R_CR, b"\x0f\x20", modrm=0xC0 | (cr << 3) | reg)


def sysreg(kind: int, operand: MemOperand) -> Instr:
    return Instr(Op.SYSREG, b"\x0f\x01", **_mem_fields(kind, operand))


def with_memory(instr: Instr, operand: MemOperand, force_disp32: bool = False) -> Instr:
    """Copy of instr addressing a different memory operand (same op, reg field and immediate)."""
    fields = _mem_fields(instr.reg_field, operand, force_disp32)
    return dataclasses.replace(instr, offset=None, **fields)


def with_registers(instr: Instr, reg: Optional[int] = None, rm: Optional[int] = None) -> Instr:
    """Copy of a ModRM instruction with its reg and/or rm field replaced."""
    modrm = instr.modrm or 0
    if reg is not None:
        modrm = (modrm & ~0x38) | ((reg & 7) << 3)
    if rm is not None:
        modrm = (modrm & ~0x07) | (rm & 7)
    return dataclasses.replace(instr, modrm=modrm, offset=None)


def clone(instr: Instr) -> Instr:
    """Detached copy; the branch link is kept."""
    return dataclasses.replace(instr, offset=None)


def assemble(instrs: List[Instr], base_address: int = 0) -> bytes:
    """Encodes a freshly built list (branches linked by Instr or PROGRAM_END)."""
    return reencode(instrs, base_address)
