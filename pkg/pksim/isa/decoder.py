"""
Table-driven decoder for the supported instruction subset.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from pksim.errors import TruncatedInstruction, UnknownOpcode
from pksim.isa.instr import (
    ALU_NAMES, PROGRAM_END, REX_W, REX_W_OPS, SYSREG_NAMES, VALID_CRS, Instr, Op,
)

# One-byte opcodes: opcode -> (op, has_modrm, imm_size, rel_size)
_ONE_BYTE: Dict[int, Tuple[Op, bool, int, int]] = {
    0x90: (Op.NOP, False, 0, 0),
    0x89: (Op.MOV_RM_R, True, 0, 0),
    0x8B: (Op.MOV_R_RM, True, 0, 0),
    0x8D: (Op.LEA, True, 0, 0),
    0x01: (Op.ADD_RM_R, True, 0, 0),
    0x30: (Op.XOR_RM8_R8, True, 0, 0),
    0x31: (Op.XOR_RM_R, True, 0, 0),
    0x81: (Op.ALU_RM_IMM, True, 4, 0),
    0xEB: (Op.JMP, False, 0, 1),
    0xE9: (Op.JMP, False, 0, 4),
    0x74: (Op.JZ, False, 0, 1),
    0x75: (Op.JNZ, False, 0, 1),
    0xE8: (Op.CALL, False, 0, 4),
    0xC3: (Op.RET, False, 0, 0),
}
for _r in range(8):
    _ONE_BYTE[0xB8 + _r] = (Op.MOV_R_IMM, False, 4, 0)
    _ONE_BYTE[0xB0 + _r] = (Op.MOV_R8_IMM8, False, 1, 0)
    _ONE_BYTE[0x50 + _r] = (Op.PUSH, False, 0, 0)
    _ONE_BYTE[0x58 + _r] = (Op.POP, False, 0, 0)

# Two-byte opcodes (after 0x0F)
_TWO_BYTE: Dict[int, Tuple[Op, bool, int, int]] = {
    0x30: (Op.WRMSR, False, 0, 0),
    0x32: (Op.RDMSR, False, 0, 0),
    0x22: (Op.MOV_CR_R, True, 0, 0),
    0x20: (Op.MOV_R_CR, True, 0, 0),
    0x01: (Op.SYSREG, True, 0, 0),
    0x84: (Op.JZ, False, 0, 4),
    0x85: (Op.JNZ, False, 0, 4),
}


class _Cursor:
    def __init__(self, buf: bytes, start: int):
        self.buf = buf
        self.start = start
        self.pos = start

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedInstruction(self.start, self.pos + n - self.start, len(self.buf) - self.start)
        chunk = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def byte(self) -> int:
        return self.take(1)[0]


def _read_modrm(cur: _Cursor) -> Tuple[int, Optional[int], int, int]:
    """Returns (modrm, sib, disp, disp_size)."""
    modrm = cur.byte()
    mod, rm = modrm >> 6, modrm & 7
    sib = None
    disp_size = 0
    if mod != 3 and rm == 4:
        sib = cur.byte()
    if mod == 1:
        disp_size = 1
    elif mod == 2:
        disp_size = 4
    elif mod == 0 and (rm == 5 or (sib is not None and sib & 7 == 5)):
        disp_size = 4
    disp = int.from_bytes(cur.take(disp_size), "little", signed=True) if disp_size else 0
    return modrm, sib, disp, disp_size


def decode(buf: bytes, offset: int = 0) -> Instr:
    """Decodes the instruction starting at offset."""
    if not 0 <= offset < len(buf):
        raise TruncatedInstruction(offset, 1, max(0, len(buf) - offset))
    cur = _Cursor(buf, offset)
    rex_w = False
    first = cur.byte()
    if first == REX_W:
        rex_w = True
        first = cur.byte()
    elif 0x40 <= first <= 0x4F:
        raise UnknownOpcode(offset, bytes([first]))

    if first == 0x0F:
        second = cur.byte()
        entry = _TWO_BYTE.get(second)
        opcode = bytes([first, second])
    else:
        entry = _ONE_BYTE.get(first)
        opcode = bytes([first])
    if entry is None:
        raise UnknownOpcode(offset, opcode)
    op, has_modrm, imm_size, rel_size = entry

    if rex_w and op not in REX_W_OPS:
        raise UnknownOpcode(offset, bytes([REX_W]) + opcode)
    if op is Op.MOV_R_IMM and rex_w:
        imm_size = 8

    modrm, sib, disp, disp_size = (None, None, 0, 0)
    if has_modrm:
        modrm, sib, disp, disp_size = _read_modrm(cur)
        mod, reg = modrm >> 6, (modrm >> 3) & 7
        if op in (Op.MOV_CR_R, Op.MOV_R_CR) and (mod != 3 or reg not in VALID_CRS):
            raise UnknownOpcode(offset, opcode + bytes([modrm]))
        if op is Op.SYSREG and (mod == 3 or reg not in SYSREG_NAMES):
            raise UnknownOpcode(offset, opcode + bytes([modrm]))
        if op is Op.ALU_RM_IMM and reg not in ALU_NAMES:
            raise UnknownOpcode(offset, opcode + bytes([modrm]))
        if op is Op.LEA and mod == 3:
            raise UnknownOpcode(offset, opcode + bytes([modrm]))

    imm = int.from_bytes(cur.take(imm_size), "little") if imm_size else 0
    rel = int.from_bytes(cur.take(rel_size), "little", signed=True) if rel_size else 0

    return Instr(
        op=op, opcode=opcode, rex_w=rex_w, modrm=modrm, sib=sib,
        disp=disp, disp_size=disp_size, imm=imm, imm_size=imm_size,
        rel=rel, rel_size=rel_size, offset=offset,
    )


def decode_all(buf: bytes) -> List[Instr]:
    """Decodes the whole buffer from offset 0; raises on the first undecodable instruction."""
    instrs: List[Instr] = []
    offset = 0
    while offset < len(buf):
        instr = decode(buf, offset)
        instrs.append(instr)
        offset += instr.encoded_len
    return instrs


def link_branches(instrs: List[Instr], base_address: int = 0) -> List[Instr]:
    """Resolves each relative branch to an instruction of the list, PROGRAM_END or an absolute address."""
    by_offset = {i.offset: i for i in instrs}
    end = sum(i.encoded_len for i in instrs)
    for instr in instrs:
        if not instr.is_branch:
            continue
        dest = instr.offset + instr.encoded_len + instr.rel
        if dest == end:
            instr.target = PROGRAM_END
        elif dest in by_offset:
            instr.target = by_offset[dest]
        else:
            instr.abs_target = base_address + dest
            instr.interior_target = 0 <= dest < end
    return instrs


def decode_program(buf: bytes, base_address: int = 0) -> List[Instr]:
    return link_branches(decode_all(buf), base_address)


@dataclass
class Program:
    """A flat code buffer placed at a virtual address."""
    code: bytes
    base_address: int = 0
    labels: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.code = bytes(self.code)

    @property
    def end_address(self) -> int:
        return self.base_address + len(self.code)

    def instructions(self) -> List[Instr]:
        return decode_program(self.code, self.base_address)

    def address_of(self, label: str) -> int:
        return self.base_address + self.labels[label]
