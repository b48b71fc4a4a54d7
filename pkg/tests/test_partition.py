import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from config import config
from pksim.errors import PolicyLoadError
from pksim.policy.graph import DependencyGraph, synthetic_graph
from pksim.policy.partition import partition
from tests.hypothesis_profiles import STANDARD_SETTINGS

POLICIES = Path(__file__).resolve().parent.parent / "policies"
CAPACITY = config.partition.capacity


def check_partition(graph: DependencyGraph, result, capacity: int) -> None:
    placed = [m for members in result.spaces for m in members]
    assert sorted(placed) == graph.modules
    assert all(len(members) <= capacity for members in result.spaces)
    for index, members in enumerate(result.spaces):
        keys = [result.assignment[m][1] for m in members]
        assert all(result.assignment[m][0] == index for m in members)
        assert len(set(keys)) == len(keys)
        assert all(config.machine.first_module_pkey <= k < config.machine.num_pkeys for k in keys)
    crossing = [(a, b) for a, b in graph.edges() if result.space_of(a) != result.space_of(b)]
    assert result.crossing_edges == crossing


class TestDependencyGraph:
    def test_modules_dep(self):
        graph = DependencyGraph.load(POLICIES / "modules.dep")
        assert len(graph) == 11
        assert graph.direct("ext4") == ["crc16", "jbd2", "mbcache"]
        assert graph.dependents("virtio_ring") == ["virtio_blk", "virtio_net"]
        assert graph.closure("tcp_diag") == frozenset({"inet_diag"})

    def test_compressed_module_names(self):
        graph = DependencyGraph.from_modules_dep("a/x.ko.zst: b/y.ko.xz\n\n# comment\nb/y.ko.xz:\n")
        assert graph.edges() == [("x", "y")]

    def test_missing_colon(self):
        with pytest.raises(PolicyLoadError):
            DependencyGraph.from_modules_dep("x.ko y.ko\n")

    def test_self_dependency(self):
        with pytest.raises(PolicyLoadError):
            DependencyGraph(["a"], [("a", "a")])

    def test_json(self, tmp_path):
        path = tmp_path / "graph.json"
        path.write_text(json.dumps({"modules": ["a", "b", "c"], "edges": [["a", "b"]]}))
        graph = DependencyGraph.load(path)
        assert graph.to_dict() == {"modules": ["a", "b", "c"], "edges": [["a", "b"]]}
        assert graph.components() == [["a", "b"], ["c"]]

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "graph.json"
        path.write_text('{"edges": [["a"]]}')
        with pytest.raises(PolicyLoadError):
            DependencyGraph.load(path)

    def test_closure_follows_cycles(self):
        graph = DependencyGraph(edges=[("a", "b"), ("b", "c"), ("c", "a")])
        assert graph.closure("a") == frozenset({"a", "b", "c"})

    def test_synthetic_graph_is_seeded(self):
        assert synthetic_graph(40, seed=7).edges() == synthetic_graph(40, seed=7).edges()
        assert synthetic_graph(40, seed=7).edges() != synthetic_graph(40, seed=8).edges()


class TestPartition:
    def test_small_components_share_a_space(self):
        graph = DependencyGraph.load(POLICIES / "modules.dep")
        result = partition(graph)
        check_partition(graph, result, CAPACITY)
        assert len(result.spaces) == 1
        assert result.crossings == 0

    def test_components_are_placed_whole(self):
        graph = DependencyGraph.load(POLICIES / "modules.dep")
        result = partition(graph, capacity=4)
        check_partition(graph, result, 4)
        assert result.crossings == 0
        assert sorted(len(s) for s in result.spaces) == [3, 4, 4]

    def test_clustered_graph_needs_no_crossings(self):
        graph = synthetic_graph(160, seed=config.harness.default_seed)
        result = partition(graph)
        check_partition(graph, result, CAPACITY)
        assert len(result.spaces) == -(-160 // CAPACITY)
        assert result.crossings == 0

    def test_long_chain_is_split(self):
        names = [f"m{i:02d}" for i in range(30)]
        graph = DependencyGraph(names, list(zip(names, names[1:])))
        result = partition(graph)
        check_partition(graph, result, CAPACITY)
        assert len(result.spaces) == 3
        assert 0 < result.crossings < 29

    def test_invalid_capacity(self):
        with pytest.raises(ValueError):
            partition(DependencyGraph(["a"]), capacity=0)

    def test_report_and_rows(self):
        graph = DependencyGraph(["a", "b"], [("a", "b")])
        result = partition(graph)
        assert result.rows() == [["a", "0", str(config.machine.first_module_pkey)],
                                 ["b", "0", str(config.machine.first_module_pkey + 1)]]
        assert "crossing edges: 0" in result.report()

    @STANDARD_SETTINGS
    @given(st.integers(min_value=1, max_value=60), st.integers(min_value=1, max_value=CAPACITY),
           st.integers(min_value=0, max_value=2**32 - 1))
    def test_capacity_holds_for_any_graph(self, n_modules, capacity, seed):
        graph = synthetic_graph(n_modules, cluster_size=25, seed=seed)
        check_partition(graph, partition(graph, capacity), capacity)

    @STANDARD_SETTINGS
    @given(st.lists(st.tuples(st.integers(0, 39), st.integers(0, 39)).filter(lambda e: e[0] != e[1]), max_size=120))
    def test_capacity_holds_for_arbitrary_edges(self, edges):
        graph = DependencyGraph([f"m{i}" for i in range(40)], [(f"m{a}", f"m{b}") for a, b in edges])
        check_partition(graph, partition(graph), CAPACITY)
