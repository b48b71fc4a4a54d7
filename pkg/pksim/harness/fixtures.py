"""
Built-in policies used by the penetration suite, the gate sweeps and the bench.
"""
from typing import Dict, List, Tuple

from config import config
from pksim.policy.graph import synthetic_graph
from pksim.policy.loader import compile_policy, parse_policy
from pksim.policy.model import CORE, CompiledPolicy

ATTACKER = "attacker"
VICTIM = "victim"
HELPER = "helper"
REMOTE = "remote"

# Shared object handed from the attacker to the victim, and its checked fields
REQUEST = "request"
OPCODE_RANGE = (0, 15)
LENGTH_RANGE = (1, 64)


def _gate(src: str, tgt: str, **extra) -> dict:
    return {"name": f"{src}->{tgt}", "src": src, "tgt": tgt, **extra}


def pentest_policy() -> CompiledPolicy:
    """Three modules sharing a space, one in a second space, and one checked interface."""
    doc = {
        "name": "pentest",
        "compartments": [{"name": name, "heap_pages": 2} for name in (ATTACKER, VICTIM, HELPER, REMOTE)],
        "address-spaces": [
            {"asid": 1, "compartments": [ATTACKER, VICTIM, HELPER]},
            {"asid": 2, "compartments": [REMOTE]},
        ],
        "transitions": [[ATTACKER, VICTIM], [VICTIM, HELPER], [ATTACKER, REMOTE]],
        "gates": [
            _gate(CORE, ATTACKER), _gate(CORE, VICTIM), _gate(ATTACKER, VICTIM),
            _gate(VICTIM, HELPER), _gate(ATTACKER, REMOTE),
        ],
        "transfer-rules": [{
            "src": ATTACKER, "tgt": VICTIM,
            "fields": [
                {"name": "opcode", "offset": 0, "width": 4, "ranges": [list(OPCODE_RANGE)]},
                {"name": "length", "offset": 4, "width": 4, "ranges": [list(LENGTH_RANGE)]},
            ],
        }],
        "privilege-classes": [{"name": REQUEST, "src": ATTACKER, "tgt": VICTIM, "size": 64}],
    }
    return compile_policy(parse_policy(doc))


def gate_fixture_policy() -> CompiledPolicy:
    """Six modules in two spaces wired by ten call gates (twenty gate ids), three of them cross-space."""
    modules = [f"m{i}" for i in range(6)]
    pairs: List[Tuple[str, str]] = [
        (CORE, "m0"), (CORE, "m3"), ("m0", "m1"), ("m1", "m2"), ("m0", "m3"),
        ("m3", "m4"), ("m4", "m5"), ("m2", "m5"), ("m5", "m0"), ("m2", "m4"),
    ]
    doc = {
        "name": "gates10",
        "compartments": [{"name": m} for m in modules],
        "address-spaces": [{"asid": 1, "compartments": modules[:3]}, {"asid": 2, "compartments": modules[3:]}],
        "transitions": [[a, b] for a, b in pairs if CORE not in (a, b)],
        "gates": [_gate(a, b, entry_offset=8 * i % 64) for i, (a, b) in enumerate(pairs)],
    }
    return compile_policy(parse_policy(doc))


def _ring_members(spaces: Dict[int, List[str]], cross: bool, size: int) -> List[str]:
    ordered = [members for _, members in sorted(spaces.items())]
    if not cross:
        return ordered[0][:size]
    if len(ordered) < 2:
        return []
    first, second = ordered[0], ordered[1]
    members: List[str] = []
    for a, b in zip(first, second):
        members += [a, b]
    return members[:size]


def population_policy(n_modules: int, cross: bool = False, ring_size: int = 4,
                      seed: int = config.harness.default_seed) -> Tuple[CompiledPolicy, List[str]]:
    """
    n_modules modules with a synthetic dependency graph, partitioned into address
    spaces, plus a ring of call gates. An intra ring stays in the first space; a cross
    ring alternates between the first two, so every hop switches address space.
    Returns the policy and the ring members (empty if a cross ring is impossible).
    """
    graph = synthetic_graph(n_modules, seed=seed)
    doc = {
        "name": f"population-{n_modules}",
        "compartments": [{"name": m, "heap_pages": 1} for m in graph.modules],
        "dependencies": [list(e) for e in graph.edges()],
    }
    layout = compile_policy(parse_policy(doc))
    members = _ring_members(layout.spaces, cross, ring_size)
    if len(members) < 2:
        return layout, []
    ring = [(members[i], members[(i + 1) % len(members)]) for i in range(len(members))]
    doc["transitions"] = [list(edge) for edge in ring]
    doc["gates"] = [_gate(a, b) for a, b in ring]
    return compile_policy(parse_policy(doc)), members
