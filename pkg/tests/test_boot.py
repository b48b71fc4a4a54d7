import pytest

from config import config
from pksim.errors import UnmappedAddress
from pksim.harness.boot import MONITOR_CODE, boot
from pksim.harness.fixtures import REMOTE, gate_fixture_policy, pentest_policy
from pksim.isa.decoder import decode
from pksim.isa.instr import RAX, RCX, Op
from pksim.isa.interpreter import PKRS_MSR
from pksim.policy.loader import compile_policy, parse_policy


def two_space_policy():
    doc = {
        "name": "two-spaces",
        "compartments": [{"name": "near"}, {"name": "far", "code": "b82a000000"}],
        "address-spaces": [{"asid": 1, "compartments": ["near"]}, {"asid": 2, "compartments": ["far"]}],
    }
    return compile_policy(parse_policy(doc))


class TestBoot:
    @pytest.mark.parametrize("make_policy", [pentest_policy, gate_fixture_policy])
    def test_every_space_gets_its_modules(self, make_policy):
        policy = make_policy()
        system = boot(policy)
        mmu = system.machine.mmu
        assert sorted(mmu.spaces) == [1, 2]
        assert mmu.active_asid == 1
        assert len(system.gates) == len(policy.gates)
        for plan in policy.compartments.values():
            if plan.kind != "module":
                continue
            compartment = system.compartment(plan.name)
            frame, _ = mmu.physical_address(compartment.code.start, mmu.space(plan.asid))
            assert frame == compartment.code.frames[0]
            assert mmu.physical.read(frame, 0, len(plan.code)) == plan.code

    def test_code_of_an_inactive_space_runs_after_a_switch(self):
        system = boot(two_space_policy())
        far = system.compartment("far")
        assert system.machine.mmu.active_asid == 1
        system.become("far")
        assert system.machine.mmu.active_asid == 2
        result = system.machine.run(halt_at=far.code.start + 5)
        assert result.status == "halted"
        assert system.machine.regs.read(RAX) == 42

    def test_inactive_space_resolves_only_when_named(self):
        system = boot(two_space_policy())
        mmu = system.machine.mmu
        far = system.compartment("far")
        with pytest.raises(UnmappedAddress):
            mmu.physical_address(far.code.start)
        assert mmu.physical_address(far.code.start, mmu.space(2))[0] == far.code.frames[0]

    def test_loader_writes_into_a_named_space(self):
        system = boot(two_space_policy())
        far = system.compartment("far")
        system.machine.load_bytes(far.data.start, b"seed", asid=2)
        system.become("far")
        assert system.machine.read(far.data.start, 4) == b"seed"

    def test_remote_module_of_the_pentest_system(self, pentest_system):
        remote = pentest_system.compartment(REMOTE)
        assert remote.asid == 2
        assert pentest_system.machine.mmu.descriptor(remote.data.start, pentest_system.machine.mmu.space(2)).pkey \
            == remote.pkey

    def test_monitor_code_writes_the_configured_msr(self):
        mov = decode(MONITOR_CODE)
        assert mov.op is Op.MOV_R_IMM and mov.opcode_reg == RCX
        assert mov.imm == PKRS_MSR == config.machine.pkrs_msr
        assert decode(MONITOR_CODE[mov.encoded_len:]).op is Op.WRMSR
        system = boot(pentest_policy())
        assert system.machine.regs.msr[PKRS_MSR] == system.compartment("core").pkrs
