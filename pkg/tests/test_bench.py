from pathlib import Path

import pytest

from pksim.errors import LoadError
from pksim.harness.bench import BUILTIN_WORKLOADS, Workload, bench, bench_report, load_workload, run_ring
from pksim.harness.metrics import CROSS, INTRA

WORKLOADS = Path(__file__).resolve().parent.parent / "workloads"


class TestWorkloads:
    def test_builtin(self):
        assert load_workload("no-pcid") is BUILTIN_WORKLOADS["no-pcid"]

    def test_file(self):
        workload = load_workload(str(WORKLOADS / "small.json"))
        assert (workload.name, workload.populations, workload.calls) == ("small", [20, 40], 16)

    @pytest.mark.parametrize("text", ["{not json", '{"patterns": ["sideways"]}', '{"calls": 0}'])
    def test_bad_file(self, tmp_path, text):
        path = tmp_path / "w.json"
        path.write_text(text)
        with pytest.raises(LoadError):
            load_workload(str(path))

    def test_unknown_name(self):
        with pytest.raises(LoadError):
            load_workload("no-such-workload")


class TestBench:
    def test_small_workload(self):
        result = bench(load_workload(str(WORKLOADS / "small.json")))
        assert not result.failed, [c.line() for c in result.checks if not c.passed]
        for population in (20, 40):
            assert result.run("intra", population).metrics.steps_per_switch(INTRA) == 6
            assert result.run("cross", population).metrics.steps_per_switch(CROSS) == 7
            assert result.run("cross", population).metrics.tlb_flushes == 0
            assert result.run("intra", population).metrics.switches[INTRA] == 16

    def test_cross_ring_needs_two_spaces(self):
        run = run_ring("cross", 4, Workload(calls=4))
        assert run.skipped
        report = bench_report(bench(Workload(patterns=["cross"], populations=[4], calls=4)))
        assert "skipped (needs two address spaces)" in report.text()

    def test_without_pcid_every_space_switch_flushes(self):
        run = run_ring("cross", 20, Workload(calls=8, use_pcid=False))
        assert not run.skipped
        assert run.metrics.tlb_flushes > 0
        assert run.trace_complete

    def test_monitor_heavy(self):
        result = bench(Workload(patterns=["monitor_heavy"], populations=[4], calls=8))
        assert not result.failed
        assert result.run("monitor_heavy", 4).metrics.monitor_share() > 0.9

    def test_report(self):
        result = bench(Workload(name="tiny", patterns=["intra"], populations=[4], calls=4))
        report = bench_report(result)
        assert report.title == "bench tiny"
        assert ["check", "counters match the logs (intra/4)", "passed", "true"] in report.rows
