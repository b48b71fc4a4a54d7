import pytest
from hypothesis import given, strategies as st

from config import config
from pksim.errors import InterruptOverflow, PoolExhausted, UnbalancedExit
from pksim.harness.boot import boot
from pksim.harness.fixtures import ATTACKER, HELPER, LENGTH_RANGE, OPCODE_RANGE, REMOTE, REQUEST, VICTIM, pentest_policy
from pksim.isa.encoder import mov_cr_r, wrmsr
from pksim.isa.instr import RAX, RCX, RDX
from pksim.isa.interpreter import CpuState, RegisterFile
from pksim.machine import Defenses
from pksim.mmu import READ, WRITE, notation
from pksim.monitor import PKRS_MSR, PKS_BIT, MAX_ENTRY_DEPTH, PrivilegedOp, privileged_op_for
from pksim.policy.loader import compile_policy, parse_policy
from pksim.verdicts import (
    FORGED_PGDIR, NO_TRANSFER_RULE, NOT_JIT_PAGE, PKS_DISABLE_ATTEMPT, POLICY_VIOLATION, RANGE_VIOLATION,
    UNREGISTERED_PKRS,
)
from tests.hypothesis_profiles import MACHINE_SETTINGS

M = config.machine


def jit_system():
    doc = {
        "name": "jit",
        "compartments": [{"name": "engine", "jit_pages": 1}, {"name": "peer"}],
        "address-spaces": [{"asid": 1, "compartments": ["engine", "peer"]}],
        "transitions": [["engine", "peer"]],
        "gates": [{"name": "engine->peer", "src": "engine", "tgt": "peer"}],
    }
    return boot(compile_policy(parse_policy(doc)))


class TestPkrsValues:
    def test_configured_pkrs(self, pentest_system):
        monitor = pentest_system.monitor
        value = monitor.pkrs_for(7)
        assert notation(value, 7) == (0, 0)
        assert notation(value, M.monitor_pkey) == (1, 0)
        assert notation(value, M.code_pkey) == (1, 1)
        assert notation(value, M.core_pkey) == (1, 1)

    def test_code_is_readable_without_xom(self):
        system = boot(pentest_policy(), Defenses().without("xom"))
        assert notation(system.monitor.pkrs_for(7), M.code_pkey) == (1, 0)

    def test_whitelist(self, pentest_system):
        monitor = pentest_system.monitor
        whitelist = monitor.whitelist()
        assert monitor.default_restricted in whitelist
        for name in (ATTACKER, VICTIM, HELPER, REMOTE):
            assert pentest_system.compartment(name).pkrs in whitelist
        assert monitor.monitor_pkrs not in whitelist


class TestDelegation:
    def test_registered_pkrs_is_installed_on_exit(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        victim = system.compartment(VICTIM)
        verdict = system.monitor.call(PrivilegedOp("write_pkrs", {"value": victim.pkrs}), attacker)
        assert str(verdict) == "executed"
        assert system.machine.regs.pkrs == victim.pkrs

    def test_unregistered_pkrs(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        verdict = system.monitor.call(PrivilegedOp("write_pkrs", {"value": 0}), attacker)
        assert str(verdict) == f"rejected({UNREGISTERED_PKRS})"
        assert system.machine.regs.pkrs == attacker.pkrs

    @MACHINE_SETTINGS
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_live_pkrs_stays_on_the_whitelist(self, pentest_system, value):
        system = pentest_system
        attacker = system.become(ATTACKER)
        verdict = system.monitor.call(PrivilegedOp("write_pkrs", {"value": value}), attacker)
        assert bool(verdict) == (value in system.monitor.whitelist())
        assert system.machine.regs.pkrs in system.monitor.whitelist()

    def test_forged_page_directory(self, pentest_system):
        system = pentest_system
        system.become("core")
        verdict = system.monitor.call(PrivilegedOp("write_cr3", {"value": 0x7FF001}))
        assert str(verdict) == f"rejected({FORGED_PGDIR})"

    def test_modules_switch_spaces_only_through_gates(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        cr3 = system.machine.mmu.space(2).cr3
        verdict = system.monitor.call(PrivilegedOp("write_cr3", {"value": cr3}), attacker)
        assert str(verdict) == f"rejected({POLICY_VIOLATION})"
        assert system.machine.mmu.active_asid == 1

    def test_core_switches_to_a_registered_space(self, pentest_system):
        system = pentest_system
        system.become("core")
        cr3 = system.machine.mmu.space(2).cr3
        verdict = system.monitor.call(PrivilegedOp("write_cr3", {"value": cr3}))
        assert verdict
        assert system.machine.mmu.active_asid == 2
        assert system.machine.regs.cr[3] == cr3

    def test_pks_cannot_be_disabled(self, pentest_system):
        system = pentest_system
        verdict = system.monitor.call(PrivilegedOp("write_cr4", {"value": 0}))
        assert str(verdict) == f"rejected({PKS_DISABLE_ATTEMPT})"
        assert system.machine.regs.cr[4] & PKS_BIT
        assert system.monitor.call(PrivilegedOp("write_cr4", {"value": PKS_BIT | 0x20}))

    @pytest.mark.parametrize("op", [
        PrivilegedOp("write_msr", {"msr": 0xC0000080, "value": 1}),
        PrivilegedOp("write_cr", {"cr": 0, "value": 0}),
        PrivilegedOp("system_reg_load", {"reg": "lidt", "address": 0}),
    ])
    def test_never_delegated(self, pentest_system, op):
        attacker = pentest_system.become(ATTACKER)
        assert str(pentest_system.monitor.call(op, attacker)) == f"rejected({POLICY_VIOLATION})"

    def test_system_register_store_uses_the_callers_rights(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        victim = system.compartment(VICTIM)
        own = system.monitor.call(PrivilegedOp("system_reg_store", {"reg": "sgdt", "address": attacker.data.start}))
        assert own
        foreign = system.monitor.call(PrivilegedOp("system_reg_store", {"reg": "sgdt", "address": victim.data.start}),
                                      attacker)
        assert str(foreign) == f"rejected({POLICY_VIOLATION})"

    def test_page_table_updates_for_owned_data_only(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        victim = system.compartment(VICTIM)
        monitor = system.monitor
        assert monitor.call(PrivilegedOp("pt_update", {"vaddr": attacker.data.start, "writable": False}), attacker)
        assert not system.machine.descriptor(attacker.data.start).writable
        assert not monitor.call(PrivilegedOp("pt_update", {"vaddr": victim.data.start}), attacker)
        assert not monitor.call(PrivilegedOp("pt_update", {"vaddr": attacker.data.start, "pkey": victim.pkey}),
                                attacker)

    def test_every_delegation_is_audited(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        system.monitor.call(PrivilegedOp("write_pkrs", {"value": 0}), attacker)
        event = system.machine.audit.last("delegate")
        assert event.actor == ATTACKER
        assert event.verdict == f"rejected({UNREGISTERED_PKRS})"

    def test_unknown_operation(self):
        with pytest.raises(ValueError):
            PrivilegedOp("write_everything")


class TestPrivilegedRequests:
    def test_wrmsr_to_pkrs(self):
        regs = RegisterFile()
        regs.write(RCX, PKRS_MSR)
        regs.write(RAX, 0x1234)
        regs.write(RDX, 0)
        op = privileged_op_for(wrmsr(), CpuState(regs, None))
        assert op == PrivilegedOp("write_pkrs", {"value": 0x1234})

    def test_mov_to_cr3(self):
        regs = RegisterFile()
        regs.write(RAX, 0x5001)
        op = privileged_op_for(mov_cr_r(3, RAX), CpuState(regs, None))
        assert op.kind == "write_cr3"
        assert op.args["value"] == 0x5001


class TestEntryExit:
    def test_entry_installs_monitor_rights_and_exit_restores(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        monitor = system.monitor
        with monitor.session(ATTACKER):
            assert system.machine.regs.pkrs == monitor.monitor_pkrs
            assert system.machine.current_compartment().name == "monitor"
        assert system.machine.regs.pkrs == attacker.pkrs
        assert monitor.entries == monitor.exits

    def test_exit_without_entry(self, pentest_system):
        with pytest.raises(UnbalancedExit):
            pentest_system.monitor.exit(ATTACKER)

    def test_entry_nesting_is_bounded(self, pentest_system):
        monitor = pentest_system.monitor
        for _ in range(MAX_ENTRY_DEPTH):
            monitor.enter(ATTACKER)
        with pytest.raises(InterruptOverflow):
            monitor.enter(ATTACKER)


class TestInterrupts:
    def test_entry_resets_and_exit_restores(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        monitor = system.monitor
        assert monitor.interrupt_entry() == 1
        assert system.machine.regs.pkrs == monitor.default_restricted
        assert monitor.interrupt_entry() == 2
        assert monitor.interrupt_exit() == 1
        assert monitor.interrupt_exit() == 0
        assert system.machine.regs.pkrs == attacker.pkrs

    def test_handler_cannot_read_the_interrupted_compartment(self, pentest_system):
        system = pentest_system
        victim = system.become(VICTIM)
        system.monitor.interrupt_entry()
        assert str(system.machine.attempt(victim.data.start, READ)) == "deny(AD)"

    def test_without_reset_the_live_pkrs_leaks(self, undefended_system):
        system = undefended_system
        victim = system.become(VICTIM)
        system.monitor.interrupt_entry()
        assert system.machine.regs.pkrs == victim.pkrs
        assert system.machine.attempt(victim.data.start, READ)

    def test_overflow(self, pentest_system):
        monitor = pentest_system.monitor
        for _ in range(config.monitor.max_interrupt_depth):
            monitor.interrupt_entry()
        with pytest.raises(InterruptOverflow):
            monitor.interrupt_entry()

    def test_exit_without_entry(self, pentest_system):
        with pytest.raises(UnbalancedExit):
            pentest_system.monitor.interrupt_exit()
        assert pentest_system.machine.audit.last("interrupt_exit").verdict == "unbalanced"


class TestThreads:
    def test_context_switch_restores_each_threads_pkrs(self, pentest_system):
        system = pentest_system
        machine = system.machine
        attacker = system.become(ATTACKER)
        main = machine.thread.tid
        worker = system.spawn(VICTIM)
        system.monitor.context_switch(worker.tid)
        assert machine.regs.pkrs == system.compartment(VICTIM).pkrs
        system.monitor.context_switch(main)
        assert machine.regs.pkrs == attacker.pkrs

    def test_unknown_thread(self, pentest_system):
        with pytest.raises(KeyError):
            pentest_system.monitor.context_switch(99)

    def test_save_pages_are_read_only_to_modules(self, pentest_system):
        system = pentest_system
        system.become(ATTACKER)
        save_page = system.monitor.save_pages[system.machine.current_tid]
        assert str(system.machine.attempt(save_page, WRITE)) == "deny(WD)"
        assert system.machine.attempt(save_page, READ)


class TestJitPages:
    def test_update_goes_through_a_scoped_grant(self):
        system = jit_system()
        engine = system.become("engine")
        page = engine.jit[0].start
        verdict = system.monitor.jit_update(page + 4, b"\x90\x90\xc3", engine)
        assert verdict
        assert system.machine.frame_bytes(page)[4:7] == b"\x90\x90\xc3"
        desc = system.machine.descriptor(page)
        assert desc.pkey == M.code_pkey and not desc.writable and not desc.no_execute
        kinds = [e.kind for e in system.machine.audit.of_kind("grant_open", "grant_close")]
        assert kinds == ["grant_open", "grant_close"]

    def test_other_code_pages_are_refused(self):
        system = jit_system()
        engine = system.become("engine")
        verdict = system.monitor.jit_update(engine.code.start, b"\x90", engine)
        assert str(verdict) == f"rejected({NOT_JIT_PAGE})"

    def test_writes_may_not_cross_the_page(self):
        system = jit_system()
        engine = system.become("engine")
        page = engine.jit[0].start
        verdict = system.monitor.jit_update(page + M.page_size - 2, b"\x90" * 4, engine)
        assert str(verdict) == f"rejected({NOT_JIT_PAGE})"


class TestHeap:
    def test_pool_allocation(self, pentest_system):
        system = pentest_system
        victim = system.compartment(VICTIM)
        pages = system.monitor.alloc_heap(victim, 2)
        assert victim.heap == [pages]
        assert system.machine.descriptor(pages.start).pkey == victim.pkey
        with pytest.raises(PoolExhausted):
            system.monitor.alloc_heap(victim)


def write_request(system, opcode: int, length: int):
    system.become(ATTACKER)
    payload = opcode.to_bytes(4, "little") + length.to_bytes(4, "little")
    assert system.machine.attempt(system.objects[REQUEST], WRITE, payload)


class TestOwnershipTransfer:
    def test_well_formed_object_is_handed_over(self, pentest_system):
        system = pentest_system
        address = system.objects[REQUEST]
        write_request(system, OPCODE_RANGE[1], LENGTH_RANGE[1])
        victim = system.become(VICTIM)
        assert system.machine.attempt(address, READ)
        assert system.machine.descriptor(address).pkey == victim.pkey
        assert system.machine.audit.last("transfer").verdict == "resumed"

    def test_out_of_range_field_is_denied(self, pentest_system):
        system = pentest_system
        address = system.objects[REQUEST]
        write_request(system, OPCODE_RANGE[1] + 1, LENGTH_RANGE[0])
        victim = system.become(VICTIM)
        verdict = system.monitor.handle_page_fault(address, READ, victim)
        assert str(verdict) == f"denied({RANGE_VIOLATION})"
        assert system.machine.descriptor(address).pkey == system.compartment(ATTACKER).pkey

    def test_unchecked_transfer_without_validation(self):
        system = boot(pentest_policy(), Defenses().without("transfer_validation"))
        write_request(system, OPCODE_RANGE[1] + 1, 0)
        victim = system.become(VICTIM)
        assert system.monitor.handle_page_fault(system.objects[REQUEST], READ, victim)

    def test_no_rule_for_the_accessor(self, pentest_system):
        system = pentest_system
        helper = system.become(HELPER)
        verdict = system.monitor.handle_page_fault(system.objects[REQUEST], READ, helper)
        assert str(verdict) == f"denied({NO_TRANSFER_RULE})"

    def test_private_pages_are_not_shared_objects(self, pentest_system):
        system = pentest_system
        attacker = system.become(ATTACKER)
        victim = system.compartment(VICTIM)
        verdict = system.monitor.handle_page_fault(victim.data.start, READ, attacker)
        assert str(verdict) == f"denied({NO_TRANSFER_RULE})"
        assert str(system.machine.attempt(victim.data.start, READ)) == "deny(AD)"


class TestPageTableChecker:
    def test_boot_leaves_nothing_to_retag(self, pentest_system):
        assert pentest_system.monitor.protect_page_tables() == []

    def test_unprotected_frames_are_retagged(self):
        system = boot(pentest_policy(), Defenses().without("pt_protection"))
        mmu = system.machine.mmu
        retagged = system.monitor.protect_page_tables()
        assert retagged
        assert all(mmu.descriptor(vaddr).pkey == config.machine.monitor_pkey for vaddr in mmu.ptmap.values())
        assert system.machine.audit.last("protect_pt").args == f"frames={len(retagged)}"
        assert system.monitor.protect_page_tables() == []

        system.become(ATTACKER)
        assert str(system.machine.attempt(sorted(mmu.ptmap.values())[0], WRITE)) == "deny(WD)"
