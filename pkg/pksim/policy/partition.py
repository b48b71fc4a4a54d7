"""
Locality-aware grouping of modules into address spaces of bounded pkey capacity.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from config import config
from pksim.logger import setup_logger
from pksim.policy.graph import DependencyGraph

logger = setup_logger()


@dataclass
class PartitionResult:
    capacity: int
    spaces: List[List[str]]
    # module -> (space index, pkey)
    assignment: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    crossing_edges: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def crossings(self) -> int:
        return len(self.crossing_edges)

    def space_of(self, module: str) -> int:
        return self.assignment[module][0]

    def report(self) -> str:
        lines = [f"capacity: {self.capacity}",
                 f"address spaces: {len(self.spaces)}",
                 f"crossing edges: {self.crossings}"]
        for i, members in enumerate(self.spaces):
            lines.append(f"space {i} ({len(members)}): {' '.join(members)}")
        for a, b in self.crossing_edges:
            lines.append(f"crossing: {a} -> {b}")
        return "\n".join(lines) + "\n"

    def rows(self) -> List[List[str]]:
        return [[m, str(s), str(k)] for m, (s, k) in sorted(self.assignment.items())]


def _choose_space(spaces: List[List[str]], need: int, capacity: int,
                  affinity: Dict[int, int]) -> Optional[int]:
    """Best space with room: most affinity, then emptiest, then lowest index."""
    best, best_key = None, None
    for i, members in enumerate(spaces):
        if len(members) + need > capacity:
            continue
        key = (-affinity.get(i, 0), len(members), i)
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def partition(graph: DependencyGraph, capacity: int = config.partition.capacity) -> PartitionResult:
    """
    Components that fit are placed whole (first-fit decreasing). Larger components
    are placed module by module in descending transitive-closure order: the module
    and its unplaced direct dependencies go to the space with most related modules,
    else the emptiest space with room, else a new one.
    """
    if capacity < 1:
        raise ValueError("capacity must be at least 1")
    spaces: List[List[str]] = []
    where: Dict[str, int] = {}

    def put(group: List[str], index: Optional[int]) -> None:
        if index is None:
            spaces.append([])
            index = len(spaces) - 1
        spaces[index].extend(group)
        for m in group:
            where[m] = index

    components = graph.components()
    small = [c for c in components if len(c) <= capacity]
    large = [c for c in components if len(c) > capacity]

    for comp in sorted(small, key=lambda c: (-len(c), c[0])):
        index = next((i for i, s in enumerate(spaces) if len(s) + len(comp) <= capacity), None)
        put(comp, index)

    for comp in large:
        order = sorted(comp, key=lambda m: (-len(graph.closure(m)), m))
        for module in order:
            group = ([] if module in where else [module]) + [d for d in graph.direct(module) if d not in where]
            if not group:
                continue
            related = [module] + graph.direct(module) + graph.dependents(module)
            for start in range(0, len(group), capacity):
                chunk = group[start:start + capacity]
                affinity: Dict[int, int] = {}
                for r in related:
                    if r in where:
                        affinity[where[r]] = affinity.get(where[r], 0) + 1
                put(chunk, _choose_space(spaces, len(chunk), capacity, affinity))

    result = PartitionResult(capacity=capacity, spaces=[sorted(s) for s in spaces])
    for index, members in enumerate(result.spaces):
        for offset, m in enumerate(members):
            result.assignment[m] = (index, config.machine.first_module_pkey + offset)
    result.crossing_edges = [(a, b) for a, b in graph.edges() if where[a] != where[b]]
    logger.info(f"Partitioned {len(graph)} modules into {len(spaces)} spaces, {result.crossings} crossing edges")
    return result
