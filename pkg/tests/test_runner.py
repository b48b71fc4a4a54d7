from collections import Counter
from pathlib import Path

import pytest

from pksim.errors import ExpectationMismatch
from pksim.harness.metrics import CROSS, INTRA, Metrics
from pksim.harness.persistence import AUDIT_FILE, REPORT_FILE, TABLE_FILE, TRACE_FILE, load_log
from pksim.harness.report import parse_table
from pksim.harness.runner import BOOT_AUDIT_FILE, run_scenario
from pksim.harness.scenario import parse_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


class TestShippedScenarios:
    @pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.json")), ids=lambda p: p.stem)
    def test_every_verdict_is_as_expected(self, path):
        result = run_scenario(path, save=False)
        assert result.mismatches == []
        assert result.trace_complete
        assert not result.report.failed
        result.raise_for_mismatch()

    def test_empty_scenario_has_zero_metrics(self):
        result = run_scenario(SCENARIOS / "empty.json", save=False)
        assert result.outcomes == []
        assert result.metrics.is_zero()
        assert result.boot_audit

    def test_call_return_counts(self):
        result = run_scenario(SCENARIOS / "call-return.json", save=False)
        assert result.metrics.switches[INTRA] == 4
        assert result.metrics.switches[CROSS] == 0
        # two stack-switching gate passes and two without
        assert result.metrics.micro_steps[INTRA] == Counter({6: 2, 5: 2})

    def test_cross_space_counts(self):
        result = run_scenario(SCENARIOS / "cross-space.json", save=False)
        assert result.metrics.switches[CROSS] == 4
        assert result.metrics.steps_per_switch(CROSS) == 7

    def test_replay_is_byte_identical(self):
        first = run_scenario(SCENARIOS / "attacker.json", save=False)
        second = run_scenario(SCENARIOS / "attacker.json", save=False)
        assert first.audit == second.audit
        assert first.trace == second.trace
        assert first.report.text() == second.report.text()


class TestMismatch:
    def test_wrong_expectation_is_reported(self):
        loaded = parse_scenario({
            "name": "wrong", "policy": "../policies/two-spaces.json",
            "script": [{"action": "become", "compartment": "net"},
                       {"action": "access", "kind": "read", "target": {"compartment": "fs", "region": "data"},
                        "expect": "allow"}],
        }, SCENARIOS)
        result = run_scenario(loaded, save=False)
        (outcome,) = result.mismatches
        assert outcome.observed == "deny(AD)"
        assert "MISMATCH expected allow" in outcome.line()
        assert result.report.failed
        with pytest.raises(ExpectationMismatch):
            result.raise_for_mismatch()


class TestArtifacts:
    def test_saved_logs_reproduce_the_metrics(self, report_dir):
        result = run_scenario(SCENARIOS / "cross-space.json", report_dir=report_dir)
        target = result.saved_to
        assert target == report_dir / "cross-space"
        for name in (REPORT_FILE, TABLE_FILE, AUDIT_FILE, TRACE_FILE, BOOT_AUDIT_FILE):
            assert (target / name).exists()

        audit = load_log(target / AUDIT_FILE, verdict_first=True)
        trace = load_log(target / TRACE_FILE)
        assert Metrics.from_logs(audit, trace) == result.metrics

    def test_table(self, report_dir):
        result = run_scenario(SCENARIOS / "call-return.json", report_dir=report_dir)
        rows = parse_table((result.saved_to / TABLE_FILE).read_text())
        assert rows[0] == ["run", "scenario call-return", "seed", str(result.seed)]
        assert ["scenario", "call-return", "mismatches", "0"] in rows
        assert ["scenario", "call-return", "switches_intra", "4"] in rows

    def test_report_text(self, report_dir):
        result = run_scenario(SCENARIOS / "attacker.json", report_dir=report_dir)
        text = (result.saved_to / REPORT_FILE).read_text()
        assert text.startswith("# scenario attacker\nseed: ")
        assert "trace completeness: ok" in text
        assert text.rstrip().endswith("result: ok")
