"""
Finds privileged byte sequences in a code buffer and classifies each one against
the decoded instruction boundaries.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from pksim.isa.decoder import decode_all
from pksim.isa.instr import Instr

# Target sequence -> name
TARGETS: Dict[bytes, str] = {
    b"\x0f\x30": "wrmsr",
    b"\x0f\x22": "mov_to_cr",
    b"\x0f\x20": "mov_from_cr",
    b"\x0f\x01": "sysreg",
}

SPANS_BOUNDARY = "spans_boundary"
IN_IMMEDIATE = "in_immediate"
IN_DISPLACEMENT = "in_displacement"
IN_MODRM_OR_OPCODE = "in_modrm_or_opcode"
KINDS = (SPANS_BOUNDARY, IN_IMMEDIATE, IN_DISPLACEMENT, IN_MODRM_OR_OPCODE)


@dataclass(frozen=True)
class Occurrence:
    offset: int
    sequence: bytes
    intended: bool
    kind: Optional[str] = None
    # Offset of the instruction holding the first byte
    instr_offset: int = 0

    @property
    def name(self) -> str:
        return TARGETS[self.sequence]

    @property
    def classification(self) -> str:
        return "intended" if self.intended else f"unintended({self.kind})"

    def line(self) -> str:
        return f"{self.offset:#06x}  {self.sequence.hex()}  {self.classification}"


def field_at(instr: Instr, pos: int) -> str:
    """Encoding field of the byte at pos (relative to the instruction start)."""
    spans = [
        ("prefix", 1 if instr.rex_w else 0),
        ("opcode", len(instr.opcode)),
        ("modrm", 0 if instr.modrm is None else 1),
        ("sib", 0 if instr.sib is None else 1),
        ("disp", instr.disp_size),
        ("imm", instr.imm_size),
        ("rel", instr.rel_size),
    ]
    for name, size in spans:
        if pos < size:
            return name
        pos -= size
    raise ValueError("position outside the instruction")


def _classify(instr: Instr, offset: int, sequence: bytes) -> Occurrence:
    if offset == instr.offset and instr.opcode == sequence and not instr.rex_w:
        return Occurrence(offset, sequence, True, None, instr.offset)
    first = field_at(instr, offset - instr.offset)
    if first in ("prefix", "opcode", "modrm", "sib"):
        kind = IN_MODRM_OR_OPCODE
    elif first == "imm":
        kind = IN_IMMEDIATE
    else:
        kind = IN_DISPLACEMENT
    return Occurrence(offset, sequence, False, kind, instr.offset)


def scan_decoded(code: bytes, instrs: Sequence[Instr]) -> List[Occurrence]:
    owner: List[Instr] = []
    for instr in instrs:
        owner.extend([instr] * instr.encoded_len)
    found = []
    for i in range(len(code) - 1):
        sequence = bytes(code[i:i + 2])
        if sequence not in TARGETS:
            continue
        a, b = owner[i], owner[i + 1]
        if a is not b:
            found.append(Occurrence(i, sequence, False, SPANS_BOUNDARY, a.offset))
        else:
            found.append(_classify(a, i, sequence))
    return found


def scan(code: bytes) -> List[Occurrence]:
    """Every target sequence in code, in ascending offset order. Raises DecodeError."""
    code = bytes(code)
    return scan_decoded(code, decode_all(code))


def contains_target(code: bytes) -> bool:
    """Byte-window check without decoding."""
    return any(bytes(code[i:i + 2]) in TARGETS for i in range(len(code) - 1))


def unintended(occurrences: Sequence[Occurrence]) -> List[Occurrence]:
    return [o for o in occurrences if not o.intended]


def report(occurrences: Sequence[Occurrence]) -> str:
    return "".join(o.line() + "\n" for o in occurrences)
