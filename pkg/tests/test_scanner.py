import pytest
from hypothesis import given, strategies as st

from pksim.deprivilege.corpus import planted_cases
from pksim.deprivilege.scanner import (
    IN_DISPLACEMENT, IN_IMMEDIATE, IN_MODRM_OR_OPCODE, SPANS_BOUNDARY, TARGETS, contains_target, field_at, report,
    scan, unintended,
)
from pksim.errors import DecodeError
from pksim.isa.decoder import decode
from tests.hypothesis_profiles import STANDARD_SETTINGS


def classes(code: bytes):
    return [(o.offset, o.classification) for o in scan(code)]


class TestScan:
    def test_intended_wrmsr(self):
        assert classes(bytes.fromhex("0f30")) == [(0, "intended")]
        assert scan(bytes.fromhex("0f30"))[0].name == "wrmsr"

    def test_spans_boundary(self):
        assert classes(bytes.fromhex("b00f30c0")) == [(1, f"unintended({SPANS_BOUNDARY})")]

    def test_in_immediate(self):
        assert classes(bytes.fromhex("b80f300000")) == [(1, f"unintended({IN_IMMEDIATE})")]

    @pytest.mark.parametrize("case,kind", [
        ("in_displacement", IN_DISPLACEMENT),
        ("in_displacement_disp8", IN_DISPLACEMENT),
        ("in_modrm", IN_MODRM_OR_OPCODE),
        ("in_sib", IN_MODRM_OR_OPCODE),
        ("in_immediate_64", IN_IMMEDIATE),
        ("in_immediate_alu_add", IN_IMMEDIATE),
    ])
    def test_planted_kinds(self, case, kind):
        found = scan(planted_cases()[case])
        assert [o.kind for o in found] == [kind]

    @pytest.mark.parametrize("case,name", [
        ("mov_to_cr", "mov_to_cr"), ("mov_from_cr", "mov_from_cr"), ("sgdt", "sysreg"), ("lgdt", "sysreg"),
    ])
    def test_intended_privileged_forms(self, case, name):
        intended = [o for o in scan(planted_cases()[case]) if o.intended]
        assert [o.name for o in intended] == [name]

    def test_offsets_ascend(self):
        found = scan(planted_cases()["mixed"])
        offsets = [o.offset for o in found]
        assert offsets == sorted(offsets)
        assert len(unintended(found)) == len(found) - 1

    def test_undecodable(self):
        with pytest.raises(DecodeError):
            scan(bytes.fromhex("0f3006"))

    def test_report_lines(self):
        assert report(scan(bytes.fromhex("b00f30c0"))) == "0x0001  0f30  unintended(spans_boundary)\n"

    def test_field_positions(self):
        instr = decode(bytes.fromhex("8b830f300000"))
        assert [field_at(instr, i) for i in range(6)] == ["opcode", "modrm", "disp", "disp", "disp", "disp"]
        with pytest.raises(ValueError):
            field_at(instr, 6)

    @STANDARD_SETTINGS
    @given(st.sampled_from(sorted(planted_cases().values())))
    def test_agrees_with_a_byte_window(self, code):
        windows = [i for i in range(len(code) - 1) if code[i:i + 2] in TARGETS]
        assert [o.offset for o in scan(code)] == windows
        assert contains_target(code) == bool(windows)
