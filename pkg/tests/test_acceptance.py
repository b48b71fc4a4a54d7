"""
End-to-end properties over whole systems. The access truth table lives in
test_mmu.py and the penetration suite in test_pentest.py.
"""
import itertools

import numpy as np
import pytest

from config import config
from pksim.deprivilege.corpus import corpus
from pksim.deprivilege.equivalence import verify_equivalence
from pksim.deprivilege.rewriter import rewrite
from pksim.deprivilege.scanner import scan
from pksim.harness.bench import Workload, bench
from pksim.harness.boot import boot
from pksim.harness.fixtures import ATTACKER, HELPER, LENGTH_RANGE, OPCODE_RANGE, VICTIM
from pksim.harness.metrics import CROSS, INTRA
from pksim.isa.instr import RAX, RDI
from pksim.mmu import PAGE_SIZE, READ, WRITE
from pksim.policy.graph import DependencyGraph, synthetic_graph
from pksim.policy.loader import compile_policy, parse_policy
from pksim.policy.partition import partition
from pksim.sgt import START_STEPS, STEPS, adversarial_start, data_probe, legal_pkrs, switch


# --- Gate robustness ---

class TestGateSweep:
    def test_ten_gates(self, gate_system):
        assert len(gate_system.sgt.entries()) == 20

    def test_interrupt_at_every_step(self, gate_system):
        system = gate_system
        machine = system.machine
        legal = legal_pkrs(machine)
        for entry in system.sgt.entries():
            target = system.compartment(entry.tgt.compartment)
            probe = data_probe(target) if target.kind == "module" else None
            for step in STEPS:
                system.become(entry.src.compartment, entry.src.address)
                trace = switch(machine, entry.gate_id, step, probe)
                assert machine.regs.pkrs == entry.tgt.pkrs
                assert machine.regs.pkrs in legal
                assert machine.monitor.interrupt_depth() == 0
                for handled in trace.interrupts:
                    assert handled.handler_pkrs in legal
                    if probe is not None:
                        assert not handled.verdict

    def test_adversarial_starts(self, gate_system):
        system = gate_system
        machine = system.machine
        legal = legal_pkrs(machine)
        ids = sorted(e.gate_id for e in system.sgt.entries())
        for source in ("m0", "m3"):
            for start, gate_id, value in itertools.product(START_STEPS, ids, sorted(legal | {0})):
                system.become(source)
                outcome = adversarial_start(machine, start, {RDI: gate_id, RAX: value})
                assert outcome.trace.pkrs in legal
                assert not outcome.breach, (source, start, gate_id, hex(value))


# --- Ownership transfer ---

def shuttle_policy():
    """The request object may travel both ways between attacker and victim."""
    fields = [
        {"name": "opcode", "offset": 0, "width": 4, "ranges": [list(OPCODE_RANGE)]},
        {"name": "length", "offset": 4, "width": 4, "ranges": [list(LENGTH_RANGE)]},
    ]
    doc = {
        "name": "shuttle",
        "compartments": [{"name": n} for n in (ATTACKER, VICTIM, HELPER)],
        "address-spaces": [{"asid": 1, "compartments": [ATTACKER, VICTIM, HELPER]}],
        "transfer-rules": [{"src": ATTACKER, "tgt": VICTIM, "fields": fields},
                           {"src": VICTIM, "tgt": ATTACKER, "fields": fields}],
        "privilege-classes": [{"name": "request", "src": ATTACKER, "tgt": VICTIM, "size": 64}],
    }
    return compile_policy(parse_policy(doc))


def test_randomized_transfers():
    system = boot(shuttle_policy())
    machine = system.machine
    address = system.objects["request"]
    pkeys = {system.compartment(n).pkey: n for n in (ATTACKER, VICTIM)}
    rng = np.random.default_rng(config.harness.default_seed)
    owner = ATTACKER
    transfers = 0

    for _ in range(2500):
        opcode = int(rng.integers(0, 24))
        length = int(rng.integers(0, 80))
        system.become(owner)
        assert machine.attempt(address, WRITE, opcode.to_bytes(4, "little") + length.to_bytes(4, "little"))
        frame = machine.mmu.physical_address(address)[0]
        before = machine.frame_bytes(address)

        accessor = VICTIM if owner == ATTACKER else ATTACKER
        system.become(accessor)
        verdict = machine.attempt(address, READ)
        in_range = OPCODE_RANGE[0] <= opcode <= OPCODE_RANGE[1] and LENGTH_RANGE[0] <= length <= LENGTH_RANGE[1]
        assert bool(verdict) == in_range
        assert machine.audit.last("transfer").verdict == ("resumed" if in_range else "denied(RangeViolation)")

        # Zero copy: same frame, same bytes
        assert machine.mmu.physical_address(address)[0] == frame
        assert machine.frame_bytes(address) == before
        assert len(before) == PAGE_SIZE

        if in_range:
            owner = accessor
            transfers += 1
        assert pkeys[machine.descriptor(address).pkey] == owner

    assert transfers >= 1000


# --- Rewriter soundness ---

@pytest.mark.slow
def test_rewriter_corpus():
    programs = list(corpus(500))
    assert len(programs) >= 500
    for name, code in programs:
        new, plan = rewrite(code)
        assert scan(new) == [], name
        verdict = verify_equivalence(code, new, config.harness.verify_runs, plan.stubs, plan.scratch)
        assert verdict, f"{name}: {verdict.detail}"
        again, second = rewrite(new)
        assert again == new and second.iterations == 0, name


# --- Partitioner ---

NODES = [f"n{i}" for i in range(5)]
PAIRS = list(itertools.combinations(NODES, 2))


def _groupings(items, capacity):
    """Every split of items into groups of at most capacity."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for mates in itertools.chain.from_iterable(itertools.combinations(rest, k) for k in range(capacity)):
        remaining = [x for x in rest if x not in mates]
        for tail in _groupings(remaining, capacity):
            yield [[first, *mates]] + tail


GROUPINGS = list(_groupings(NODES, 2))


def optimum_crossings(edges):
    best = len(edges)
    for groups in GROUPINGS:
        where = {m: i for i, g in enumerate(groups) for m in g}
        best = min(best, sum(where[a] != where[b] for a, b in edges))
    return best


class TestPartitionQuality:
    def test_every_five_node_graph(self):
        for mask in range(1 << len(PAIRS)):
            edges = [p for i, p in enumerate(PAIRS) if mask >> i & 1]
            result = partition(DependencyGraph(NODES, edges), capacity=2)
            assert all(len(s) <= 2 for s in result.spaces)
            assert result.crossings <= 2 * optimum_crossings(edges), edges

    @pytest.mark.parametrize("edges", [
        list(zip(NODES, NODES[1:])),
        [("n0", "n1"), ("n2", "n3")],
        [],
    ])
    def test_chain_and_disconnected_are_optimal(self, edges):
        result = partition(DependencyGraph(NODES, edges), capacity=2)
        assert result.crossings == optimum_crossings(edges)

    def test_synthetic_locality(self):
        graph = synthetic_graph(160, seed=config.harness.default_seed)
        assert max(len(graph.direct(m)) for m in graph.modules) <= 12
        result = partition(graph)
        assert all(len(s) <= config.partition.capacity for s in result.spaces)
        for m in graph.modules:
            assert all(result.space_of(d) == result.space_of(m) for d in graph.direct(m))


# --- Switch-cost shape ---

def test_bench_shape():
    result = bench(Workload(populations=[4, 20, 160], calls=16))
    assert not result.failed, [c.line() for c in result.checks if not c.passed]
    intra = {n: result.run("intra", n).metrics.steps_per_switch(INTRA) for n in (4, 20, 160)}
    assert len(set(intra.values())) == 1
    cross = {n: result.run("cross", n).metrics.steps_per_switch(CROSS) for n in (20, 160)}
    assert {c - intra[n] for n, c in cross.items()} == {1}
    assert all(result.run("cross", n).metrics.tlb_flushes == 0 for n in (20, 160))
    assert result.run("monitor_heavy", 20).metrics.monitor_share() > 0.9


# --- Page-table integrity ---

def test_monitor_state_survives_random_writes(pentest_system):
    system = pentest_system
    machine = system.machine
    targets = sorted(machine.mmu.ptmap.values()) + sorted(system.monitor.save_pages.values())
    snapshot = {t: machine.frame_bytes(t) for t in targets}
    actors = [ATTACKER, VICTIM, HELPER, "core"]
    rng = np.random.default_rng(config.harness.default_seed)

    successes = 0
    for _ in range(10_000):
        system.become(actors[int(rng.integers(len(actors)))])
        page = targets[int(rng.integers(len(targets)))]
        offset = int(rng.integers(0, PAGE_SIZE - 8))
        data = rng.integers(0, 256, size=int(rng.integers(1, 9)), dtype=np.uint8).tobytes()
        successes += bool(machine.attempt(page + offset, WRITE, data))

    assert successes == 0
    assert {t: machine.frame_bytes(t) for t in targets} == snapshot
