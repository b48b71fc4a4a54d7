import pytest
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, initialize, invariant, rule, run_state_machine_as_test

from config import config
from pksim.errors import NotMonitor, SwitchFault
from pksim.harness.boot import boot
from pksim.harness.fixtures import gate_fixture_policy
from pksim.isa.instr import RAX, RDI
from pksim.machine import Defenses
from pksim.policy.model import GateSpec
from pksim.sgt import (
    MONITOR_GATES, START_STEPS, STEPS, Endpoint, GateEntry, adversarial_start, data_probe, legal_pkrs,
    register_gate, switch,
)
from pksim.verdicts import DUPLICATE_GATE, MALFORMED_METADATA, TRANSITION_NOT_ALLOWED
from tests.hypothesis_profiles import STATE_MACHINE_SETTINGS

INTRA_STEPS = ["S1", "S2", "S4", "S5", "S6", "S7"]
UNREGISTERED = 1000


class TestRegistration:
    def test_fixture_gates_come_in_pairs(self, gate_system):
        entries = gate_system.sgt.entries()
        assert len(entries) == 20
        by_id = {e.gate_id: e for e in entries}
        for call_id, return_id in gate_system.gates.values():
            assert return_id == call_id + 1
            call, back = by_id[call_id], by_id[return_id]
            assert (call.src.compartment, call.tgt.compartment) == (back.tgt.compartment, back.src.compartment)
            assert call.tgt.address == back.src.address

    def test_monitor_gates_are_registered_at_boot(self, gate_system):
        sgt = gate_system.sgt
        monitor_entries = [e for e in sgt.entries(include_monitor=True) if e.monitor_gate]
        assert sorted(e.gate_id for e in monitor_entries) == list(MONITOR_GATES)
        entry, exit_ = sgt.read(MONITOR_GATES[0]), sgt.read(MONITOR_GATES[1])
        assert (entry.tgt.compartment, entry.tgt.pkrs) == ("monitor", gate_system.monitor.monitor_pkrs)
        assert exit_.tgt.compartment == "core"

    def test_entries_carry_the_configured_endpoints(self, gate_system):
        call_id, _ = gate_system.gate_ids("m0->m1")
        entry = gate_system.sgt.read(call_id)
        m1 = gate_system.compartment("m1")
        assert entry.tgt.pkrs == m1.pkrs
        assert entry.tgt.asid == m1.asid
        assert entry.tgt.stack_pointer == m1.stack_pointer
        assert entry.tgt.pgdir == gate_system.machine.mmu.space(1).pgdir

    def test_transition_outside_the_policy(self, gate_system):
        before = len(gate_system.sgt.ids)
        verdict = register_gate(gate_system.machine, GateSpec(name="m1->m0", src="m1", tgt="m0"), requester="m1")
        assert str(verdict) == f"rejected({TRANSITION_NOT_ALLOWED})"
        assert len(gate_system.sgt.ids) == before

    @pytest.mark.parametrize("spec,reason", [
        (GateSpec(name="dup", src="m0", tgt="m1", gate_id=2), DUPLICATE_GATE),
        (GateSpec(name="monitor", src="m0", tgt="m1", gate_id=0), DUPLICATE_GATE),
        (GateSpec(name="odd", src="m0", tgt="m1", gate_id=101), MALFORMED_METADATA),
        (GateSpec(name="self", src="m0", tgt="m0"), MALFORMED_METADATA),
        (GateSpec(name="into-monitor", src="m0", tgt="monitor"), MALFORMED_METADATA),
        (GateSpec(name="far", src="m0", tgt="m1", entry_offset=config.machine.page_size), MALFORMED_METADATA),
    ])
    def test_rejected_metadata(self, gate_system, spec, reason):
        before = len(gate_system.sgt.ids)
        verdict = register_gate(gate_system.machine, spec)
        assert str(verdict) == f"rejected({reason})"
        assert len(gate_system.sgt.ids) == before

    def test_later_registration_takes_the_next_free_pair(self, gate_system):
        verdict = register_gate(gate_system.machine, GateSpec(name="again", src="m0", tgt="m1"))
        assert verdict.value == (22, 23)

    def test_table_writes_need_monitor_authority(self, gate_system):
        ep = Endpoint("m0", 0, 1, 0, 0, 0)
        with pytest.raises(NotMonitor):
            gate_system.sgt.write(GateEntry(500, ep, ep), "m0")
        assert gate_system.sgt.read(500) is None

    def test_out_of_range_ids_read_as_empty(self, gate_system):
        assert gate_system.sgt.read(-1) is None
        assert gate_system.sgt.read(UNREGISTERED * 4) is None


class TestSwitch:
    def test_intra_space_call(self, gate_system):
        system = gate_system
        system.become("m0")
        m1 = system.compartment("m1")
        spec = system.policy.gate("m0->m1")
        trace = switch(system.machine, system.gate_ids("m0->m1")[0])
        assert trace.steps == INTRA_STEPS
        assert not trace.cross_space
        assert trace.pkrs == m1.pkrs
        assert trace.ip == m1.code.start + spec.entry_offset
        assert trace.stack_pointer == m1.stack_pointer
        assert system.machine.current_compartment() is m1

    def test_cross_space_call_adds_one_step(self, gate_system):
        system = gate_system
        system.become("m0")
        trace = switch(system.machine, system.gate_ids("m0->m3")[0])
        assert trace.steps == ["S1", "S2", "S3", "S4", "S5", "S6", "S7"]
        assert trace.cross_space
        assert trace.asid == 2
        assert system.machine.mmu.tlb.flushes == 0

    def test_call_then_return(self, gate_system):
        system = gate_system
        m0 = system.become("m0")
        call_id, return_id = system.gate_ids("m0->m1")
        switch(system.machine, call_id)
        trace = switch(system.machine, return_id)
        assert trace.pkrs == m0.pkrs
        assert trace.ip == m0.code.start
        assert trace.stack_pointer == m0.stack_pointer

    def test_gate_without_stack_switch(self, gate_system):
        system = gate_system
        verdict = register_gate(system.machine, GateSpec(name="m0->m1/nostack", src="m0", tgt="m1", stack_switch=False))
        m0 = system.become("m0")
        trace = switch(system.machine, verdict.value[0])
        assert trace.micro_steps == len(INTRA_STEPS) - 1
        assert "S6" not in trace.steps
        assert trace.stack_pointer == m0.stack_pointer

    def test_each_switch_is_one_delegated_pkrs_write(self, gate_system):
        system = gate_system
        monitor = system.monitor
        system.become("m0")
        before = monitor.entries
        switch(system.machine, system.gate_ids("m0->m1")[0])
        assert monitor.entries - before == 1
        system.become("m0")
        switch(system.machine, system.gate_ids("m0->m3")[0])
        assert monitor.entries - before == 3

    def test_wrong_source(self, gate_system):
        system = gate_system
        m2 = system.become("m2")
        with pytest.raises(SwitchFault) as e:
            switch(system.machine, system.gate_ids("m0->m1")[0])
        assert (e.value.reason, e.value.step) == ("SourceMismatch", "S2")
        assert system.machine.regs.pkrs == m2.pkrs

    def test_return_address_outside_the_source(self, gate_system):
        system = gate_system
        m1 = system.compartment("m1")
        system.become("m0", m1.code.start)
        with pytest.raises(SwitchFault) as e:
            switch(system.machine, system.gate_ids("m0->m1")[0])
        assert e.value.reason == "SourceMismatch"

    @pytest.mark.parametrize("gate_id", [UNREGISTERED, *MONITOR_GATES])
    def test_unknown_gate(self, gate_system, gate_id):
        gate_system.become("m0")
        with pytest.raises(SwitchFault) as e:
            switch(gate_system.machine, gate_id)
        assert (e.value.reason, e.value.step) == ("UnknownGate", "S1")
        assert gate_system.machine.fault_counts["UnknownGate"] == 1

    @pytest.mark.parametrize("step", STEPS)
    def test_interrupt_handler_cannot_read_the_target(self, gate_system, step):
        system = gate_system
        system.become("m0")
        tgt = system.compartment("m3")
        trace = switch(system.machine, system.gate_ids("m0->m3")[0], step, data_probe(tgt))
        assert len(trace.interrupts) == 1
        probe = trace.interrupts[0]
        assert probe.handler_pkrs == system.monitor.default_restricted
        assert not probe.verdict
        assert trace.pkrs == tgt.pkrs
        assert system.monitor.interrupt_depth() == 0

    def test_transitions_are_audited(self, gate_system):
        system = gate_system
        system.become("m0")
        switch(system.machine, system.gate_ids("m0->m3")[0])
        event = system.machine.audit.last("transition")
        assert event.actor == "m0"
        assert event.arg("kind") == "cross"
        assert event.arg("steps") == "7"


class TestAdversarialStart:
    def test_forged_accumulator_is_corrected_by_the_loopback(self, gate_system):
        system = gate_system
        system.become("m0")
        call_id, _ = system.gate_ids("m0->m1")
        forged = system.compartment("m2").pkrs
        outcome = adversarial_start(system.machine, "S4b", {RDI: call_id, RAX: forged})
        assert not outcome.breach
        assert outcome.trace.loopbacks == 1
        assert outcome.trace.pkrs == system.compartment("m1").pkrs

    def test_unregistered_gate_after_a_pkrs_write_lands_in_default(self, gate_system):
        system = gate_system
        system.become("m0")
        outcome = adversarial_start(system.machine, "S4b", {RDI: UNREGISTERED, RAX: system.compartment("m1").pkrs})
        assert outcome.trace.fault.reason == "UnknownGate"
        assert outcome.trace.pkrs == system.monitor.default_restricted
        assert not outcome.breach

    def test_unchecked_loopback_leaves_the_forged_value(self):
        system = boot(gate_fixture_policy(), Defenses().without("loopback_check"))
        system.become("m0")
        call_id, _ = system.gate_ids("m0->m1")
        outcome = adversarial_start(system.machine, "S4b", {RDI: call_id, RAX: system.compartment("m2").pkrs})
        assert outcome.breach

    def test_unknown_start_step(self, gate_system):
        with pytest.raises(ValueError):
            adversarial_start(gate_system.machine, "S1", {})

    def test_exhaustive_sweep(self, gate_system):
        """Every start step, forged gate id and registered PKRS value from every source."""
        system = gate_system
        machine = system.machine
        forged_ids = sorted(system.sgt.ids) + [UNREGISTERED]
        forged_values = sorted(legal_pkrs(machine) | {0})
        sources = sorted({e.src.compartment for e in system.sgt.entries()})
        breaches = []
        for source in sources:
            for start in START_STEPS:
                for gate_id in forged_ids:
                    for value in forged_values:
                        system.become(source)
                        outcome = adversarial_start(machine, start, {RDI: gate_id, RAX: value})
                        if outcome.breach:
                            breaches.append((source, start, gate_id, value))
        assert breaches == []
        assert machine.regs.pkrs in legal_pkrs(machine)


class GateWalk(RuleBasedStateMachine):
    """Random walks over the gate graph mixed with interrupts and forged entries."""

    @initialize()
    def boot_system(self):
        self.system = boot(gate_fixture_policy())
        self.here = "core"

    def _outgoing(self):
        return [e for e in self.system.sgt.entries() if e.src.compartment == self.here]

    @rule(pick=st.integers(min_value=0, max_value=63))
    def take_gate(self, pick):
        entries = self._outgoing()
        entry = entries[pick % len(entries)]
        trace = switch(self.system.machine, entry.gate_id)
        assert trace.pkrs == entry.tgt.pkrs
        assert trace.ip == entry.tgt.address
        self.here = entry.tgt.compartment

    @rule(pick=st.integers(min_value=0, max_value=63), step=st.sampled_from(STEPS))
    def interrupted_gate(self, pick, step):
        entries = self._outgoing()
        entry = entries[pick % len(entries)]
        target = self.system.compartment(entry.tgt.compartment)
        probe = data_probe(target) if target.kind == "module" else None
        trace = switch(self.system.machine, entry.gate_id, step, probe)
        assert trace.interrupts[0].handler_pkrs == self.system.monitor.default_restricted
        assert not trace.interrupts[0].verdict or probe is None
        self.here = entry.tgt.compartment

    @rule(start=st.sampled_from(START_STEPS), gate=st.integers(min_value=0, max_value=23),
          value=st.sampled_from([0, 0xFFFFFFFF]) | st.integers(min_value=0, max_value=2**32 - 1))
    def forged_start(self, start, gate, value):
        outcome = adversarial_start(self.system.machine, start, {RDI: gate, RAX: value})
        assert not outcome.breach
        # Resume the walk from a clean context
        self.system.become(self.here)

    @invariant()
    def live_pkrs_is_legal(self):
        machine = self.system.machine
        assert machine.regs.pkrs in legal_pkrs(machine)
        assert self.system.monitor.interrupt_depth() == 0

    @invariant()
    def address_space_matches_the_compartment(self):
        current = self.system.compartment(self.here)
        if current.asid is not None:
            assert self.system.machine.mmu.active_asid == current.asid


def test_gate_walks():
    run_state_machine_as_test(GateWalk, settings=STATE_MACHINE_SETTINGS)
