"""
Textual listing: "offset: hex-bytes  mnemonic operands", one instruction per line.
"""
from typing import List

from pksim.isa.decoder import decode_all
from pksim.isa.encoder import encode
from pksim.isa.instr import ALU_NAMES, REG8, REG32, REG64, SYSREG_NAMES, Instr, Op


def _hex(value: int) -> str:
    return f"-{-value:#x}" if value < 0 else f"{value:#x}"


def _reg(reg: int, width: int) -> str:
    if width == 1:
        return REG8[reg]
    return REG64[reg] if width == 8 else REG32[reg]


def format_memory(instr: Instr) -> str:
    m = instr.mem_operand()
    parts = []
    if m.base is not None:
        parts.append(REG64[m.base])
    if m.index is not None:
        parts.append(REG64[m.index] + (f"*{m.scale}" if m.scale != 1 else ""))
    text = "+".join(parts)
    if m.disp or not parts:
        if not parts:
            text = f"{m.disp & 0xFFFFFFFF:#x}"
        elif m.disp < 0:
            text += _hex(m.disp)
        else:
            text += "+" + _hex(m.disp)
    return f"[{text}]"


def _rm(instr: Instr, width: int) -> str:
    return format_memory(instr) if instr.has_memory_operand else _reg(instr.rm_field, width)


def format_instr(instr: Instr, address: int = 0) -> str:
    """Mnemonic and operands; branch targets are shown as absolute addresses."""
    op, w = instr.op, instr.width
    if op is Op.NOP:
        return "nop"
    if op is Op.MOV_R_IMM:
        name = "movabs" if instr.rex_w else "mov"
        return f"{name} {_reg(instr.opcode_reg, w)}, {instr.imm:#x}"
    if op is Op.MOV_R8_IMM8:
        return f"mov {REG8[instr.opcode_reg]}, {instr.imm:#x}"
    if op is Op.MOV_RM_R:
        return f"mov {_rm(instr, w)}, {_reg(instr.reg_field, w)}"
    if op is Op.MOV_R_RM:
        return f"mov {_reg(instr.reg_field, w)}, {_rm(instr, w)}"
    if op is Op.LEA:
        return f"lea {_reg(instr.reg_field, w)}, {format_memory(instr)}"
    if op is Op.ADD_RM_R:
        return f"add {_rm(instr, w)}, {_reg(instr.reg_field, w)}"
    if op in (Op.XOR_RM_R, Op.XOR_RM8_R8):
        return f"xor {_rm(instr, w)}, {_reg(instr.reg_field, w)}"
    if op is Op.ALU_RM_IMM:
        return f"{ALU_NAMES[instr.reg_field]} {_rm(instr, w)}, {instr.imm:#x}"
    if op in (Op.PUSH, Op.POP):
        return f"{op.value} {REG64[instr.opcode_reg]}"
    if op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL):
        dest = address + instr.encoded_len + instr.rel
        return f"{op.value} {dest:#x}"
    if op in (Op.RET, Op.WRMSR, Op.RDMSR):
        return op.value
    if op is Op.MOV_CR_R:
        return f"mov cr{instr.reg_field}, {REG64[instr.rm_field]}"
    if op is Op.MOV_R_CR:
        return f"mov {REG64[instr.rm_field]}, cr{instr.reg_field}"
    if op is Op.SYSREG:
        return f"{SYSREG_NAMES[instr.reg_field]} {format_memory(instr)}"
    return op.value


def listing(code: bytes, base_address: int = 0) -> List[str]:
    lines = []
    for instr in decode_all(code):
        address = base_address + instr.offset
        raw = encode(instr)
        lines.append(f"{address:08x}: {raw.hex(' ')}  {format_instr(instr, address)}")
    return lines
