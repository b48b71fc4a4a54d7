import numpy as np
import pytest
from hypothesis import given, strategies as st

from config import config
from pksim.deprivilege.corpus import ProgramGenerator, planted_cases
from pksim.deprivilege.equivalence import verify_equivalence
from pksim.deprivilege.rewriter import STRATEGIES, GateStubSpec, read_sidecar, rewrite
from pksim.deprivilege.scanner import scan
from pksim.errors import LoadError, RewriteStuck
from pksim.isa.decoder import decode_all
from pksim.isa.encoder import assemble, encode, mem, sysreg
from pksim.isa.instr import LGDT, LIDT, RAX, RBX, RSI, SGDT, Op
from tests.hypothesis_profiles import QUICK_SETTINGS

BASE = config.rewriter.program_base
PLANTED = planted_cases()


def rewrite_and_check(code: bytes):
    new, plan = rewrite(code)
    assert scan(new) == []
    assert plan.iterations <= config.rewriter.iteration_bound
    assert {s.strategy for s in plan.steps} <= set(STRATEGIES)
    return new, plan


class TestStrategies:
    def test_boundary_gets_a_nop(self):
        new, plan = rewrite_and_check(bytes.fromhex("b00f30c0"))
        assert new == bytes.fromhex("b00f9030c0")
        assert [s.strategy for s in plan.steps] == ["insert_nop"]

    def test_immediate_is_split(self):
        new, plan = rewrite_and_check(PLANTED["in_immediate"])
        assert plan.strategy_counts()["data_adjust"] == 1
        assert len(decode_all(new)) == 2
        assert verify_equivalence(PLANTED["in_immediate"], new, 20, plan.stubs, plan.scratch)

    def test_intended_wrmsr_calls_its_stub(self):
        new, plan = rewrite_and_check(PLANTED["pkrs_write"])
        assert plan.strategy_counts()["gate_substitute"] == 1
        (address, instr), = plan.stubs.items()
        assert address == GateStubSpec().slot(0)
        assert instr.op is Op.WRMSR
        assert decode_all(new)[-1].op is Op.CALL

    def test_same_privileged_instruction_shares_a_slot(self):
        code = PLANTED["wrmsr"] + PLANTED["wrmsr"]
        _, plan = rewrite_and_check(code)
        assert len(plan.stubs) == 1

    def test_custom_stub_base(self):
        _, plan = rewrite(PLANTED["wrmsr"], GateStubSpec(base=0x7E000000))
        assert list(plan.stubs) == [0x7E000000]

    @pytest.mark.parametrize("name", sorted(PLANTED))
    def test_planted_cases(self, name):
        code = PLANTED[name]
        new, plan = rewrite_and_check(code)
        assert verify_equivalence(code, new, 25, plan.stubs, plan.scratch)

    @pytest.mark.parametrize("kind,base,disp", [(LGDT, RAX, 0x200F), (SGDT, RBX, 0x300F), (LIDT, RSI, 0x220F)])
    def test_sequence_inside_a_privileged_instruction_goes_with_it(self, kind, base, disp):
        code = assemble([sysreg(kind, mem(base, disp))])
        assert [o.intended for o in scan(code)] == [True, False]
        new, plan = rewrite_and_check(code)
        assert [s.strategy for s in plan.steps] == ["gate_substitute"]
        (instr,) = plan.stubs.values()
        assert encode(instr) == code
        assert [i.op for i in decode_all(new)] == [Op.CALL]
        assert verify_equivalence(code, new, 20, plan.stubs, plan.scratch)

    def test_generated_program_with_sysreg_displacement(self):
        code = ProgramGenerator(np.random.default_rng(0)).program()
        new, plan = rewrite_and_check(code)
        assert verify_equivalence(code, new, 10, plan.stubs, plan.scratch, seed=0)

    def test_bound_is_reported(self):
        with pytest.raises(RewriteStuck):
            rewrite(PLANTED["in_immediate"], iteration_bound=0)

    def test_clean_code_is_left_alone(self):
        code = bytes.fromhex("b801000000c3")
        new, plan = rewrite(code)
        assert new == code
        assert plan.iterations == 0 and not plan.steps

    def test_report(self):
        _, plan = rewrite(PLANTED["mixed"])
        text = plan.report()
        assert f"iterations: {plan.iterations}" in text
        assert "gate_substitute" in text
        assert sum(line.startswith("stub ") for line in text.splitlines()) == len(plan.stubs)


class TestSidecar:
    def test_round_trip(self):
        _, plan = rewrite(PLANTED["mixed"])
        base, stubs, scratch = read_sidecar(plan.sidecar(BASE))
        assert base == BASE
        assert {a: encode(i) for a, i in stubs.items()} == {a: encode(i) for a, i in plan.stubs.items()}
        assert scratch == plan.scratch

    def test_defaults(self):
        base, stubs, scratch = read_sidecar({})
        assert (base, stubs, scratch) == (BASE, {}, set())

    @pytest.mark.parametrize("data", [
        {"base": "nowhere"},
        {"stubs": {"0x7f000000": "zz"}},
        {"stubs": ["0f30"]},
        {"scratch": ["r99"]},
    ])
    def test_malformed(self, data):
        with pytest.raises(LoadError):
            read_sidecar(data)


class TestFixpoint:
    @QUICK_SETTINGS
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_random_programs_rewrite_clean_and_stay_equivalent(self, seed):
        code = ProgramGenerator(np.random.default_rng(seed)).program()
        new, plan = rewrite_and_check(code)
        assert verify_equivalence(code, new, 10, plan.stubs, plan.scratch, seed=seed)

    @QUICK_SETTINGS
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_idempotent(self, seed):
        code = ProgramGenerator(np.random.default_rng(seed)).program()
        once, _ = rewrite(code)
        twice, plan = rewrite(once)
        assert twice == once
        assert plan.iterations == 0

    def test_scratch_registers_are_declared(self):
        _, plan = rewrite(PLANTED["in_displacement_busy_base"])
        assert plan.strategy_counts()["data_adjust"] == 1
        assert plan.scratch and RBX not in plan.scratch
