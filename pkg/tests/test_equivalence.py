import numpy as np

from pksim.deprivilege.corpus import planted_cases
from pksim.deprivilege.equivalence import COUNTEREXAMPLE, random_state, verify_equivalence
from pksim.deprivilege.rewriter import rewrite
from pksim.isa.instr import RCX

MOV_EAX_1 = bytes.fromhex("b801000000")
MOV_EAX_2 = bytes.fromhex("b802000000")
MOV_ECX_5 = bytes.fromhex("b905000000")


class TestVerifyEquivalence:
    def test_identical_programs(self):
        assert verify_equivalence(MOV_EAX_1, MOV_EAX_1, 5)

    def test_register_divergence(self):
        verdict = verify_equivalence(MOV_EAX_1, MOV_EAX_2, 5, seed=3)
        assert not verdict
        assert verdict.reason == COUNTEREXAMPLE
        assert verdict.detail == "rax: 0x1 != 0x2"
        counterexample = verdict.value
        assert (counterexample.run, counterexample.seed) == (0, 3)
        assert counterexample.describe().startswith("run 0 (seed 3): rax: 0x1 != 0x2")

    def test_scratch_registers_are_ignored(self):
        assert not verify_equivalence(MOV_EAX_1, MOV_EAX_1 + MOV_ECX_5, 5)
        assert verify_equivalence(MOV_EAX_1, MOV_EAX_1 + MOV_ECX_5, 5, scratch=[RCX])

    def test_memory_divergence(self):
        verdict = verify_equivalence(bytes.fromhex("8907"), bytes.fromhex("9090"), 3)
        assert verdict.detail.startswith("mem[")

    def test_outcome_divergence(self):
        verdict = verify_equivalence(bytes.fromhex("90"), bytes.fromhex("ebfe"), 2, max_steps=50)
        assert verdict.detail.startswith("outcome:")
        assert "step_limit" in verdict.detail

    def test_privileged_instructions_match_their_stubs(self):
        code = planted_cases()["mixed"]
        new, plan = rewrite(code)
        assert new != code
        assert verify_equivalence(code, new, 20, plan.stubs, plan.scratch)
        assert not verify_equivalence(code, new, 5)

    def test_deterministic(self):
        first = verify_equivalence(MOV_EAX_1, MOV_EAX_1 + MOV_ECX_5, 4, seed=11)
        second = verify_equivalence(MOV_EAX_1, MOV_EAX_1 + MOV_ECX_5, 4, seed=11)
        assert first.detail == second.detail
        assert first.value.describe() == second.value.describe()


class TestRandomState:
    def test_seeded(self):
        a = random_state(np.random.default_rng([5, 0]))
        b = random_state(np.random.default_rng([5, 0]))
        assert a.gpr == b.gpr and a.cr == b.cr and a.msr == b.msr

    def test_fills_every_field(self):
        regs = random_state(np.random.default_rng(1))
        assert len(regs.gpr) == 8
        assert sorted(regs.cr) == [0, 2, 3, 4]
        assert len(regs.msr) == 1
