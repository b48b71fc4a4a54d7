from collections import Counter

import pytest

from pksim.events import Event, EventLog
from pksim.harness.metrics import CROSS, INTRA, Metrics
from pksim.harness.persistence import REPORT_FILE, TABLE_FILE, load_log, run_dir, save_report
from pksim.harness.report import CSV_HEADER, Report, parse_table


def sample_report() -> Report:
    report = Report("unit", 7)
    report.add("one line")
    report.row("unit", "x", "count", 3)
    return report


class TestSaveReport:
    def test_writes_report_table_and_logs(self, report_dir):
        target = save_report("unit run", sample_report(), {"audit.log": "a  b  c  d\n"}, report_dir)
        assert target == report_dir / "unit_run"
        assert (target / REPORT_FILE).read_text().startswith("# unit\nseed: 7\n")
        assert parse_table((target / TABLE_FILE).read_text())[-1] == ["unit", "x", "count", "3"]
        assert (target / "audit.log").read_text() == "a  b  c  d\n"

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert save_report("x", sample_report(), report_dir=blocker) is None

    def test_run_dir_sanitizes(self, tmp_path):
        assert run_dir("a/b c", tmp_path) == tmp_path / "a_b_c"


class TestLoadLog:
    def test_round_trip(self, tmp_path):
        log = EventLog("audit", verdict_first=True)
        log.record("enter", "core", "op=write_pkrs", "executed")
        log.record("exit", "core")
        path = tmp_path / "audit.log"
        path.write_text(log.text())
        loaded = load_log(path, verdict_first=True)
        assert list(loaded) == list(log)

    def test_missing_file_is_empty(self, tmp_path):
        assert len(load_log(tmp_path / "absent.log")) == 0

    def test_malformed_file_is_empty(self, tmp_path):
        path = tmp_path / "bad.log"
        path.write_text("only one field\n")
        assert len(load_log(path)) == 0


class TestEvents:
    def test_args(self):
        event = Event("transition", "fs", "gate=2 kind=intra steps=6", "ok")
        assert event.arg("kind") == "intra"
        assert event.arg("missing", "-") == "-"

    def test_parse(self):
        assert Event.parse("flush  core  -  ok") == Event("flush", "core", "", "ok")
        with pytest.raises(ValueError):
            Event.parse("flush  core")

    def test_disabled_log_records_nothing(self):
        log = EventLog("trace")
        log.enabled = False
        assert log.record("flush", "core") is None
        assert len(log) == 0


class TestMetricsFromLogs:
    def test_counts(self):
        audit = [
            Event("transition", "net", "gate=2 kind=intra steps=6", "ok"),
            Event("transition", "fs", "gate=4 kind=cross steps=7", "ok"),
            Event("enter", "net", "", "ok"),
            Event("exit", "net", "", "ok"),
            Event("fault", "net", "reason=UnknownGate", "ok"),
            Event("trap", "net", "op=wrmsr", "ok"),
            Event("switch", "net", "gate=9 step=S2", "fault(SourceMismatch)"),
        ]
        trace = [
            Event("translate", "net", "va=0x1000", "hit"),
            Event("translate", "net", "va=0x2000", "miss"),
            Event("translate", "net", "va=0x3000", "unmapped"),
            Event("flush", "core", "", "ok"),
        ]
        metrics = Metrics.from_logs(audit, trace)
        assert metrics.transitions() == {"intra": 1, "cross": 1, "monitor_entry": 1, "monitor_exit": 1}
        assert metrics.faults == Counter({"UnknownGate": 1, "PrivilegeTrap": 1, "SourceMismatch": 1})
        assert (metrics.tlb_hits, metrics.tlb_misses, metrics.tlb_flushes) == (1, 2, 1)
        assert metrics.monitor_share() == 0.5

    def test_empty(self):
        metrics = Metrics.from_logs([])
        assert metrics.is_zero()
        assert metrics.monitor_share() == 0.0
        assert metrics.steps_per_switch(INTRA) is None

    def test_mixed_step_counts(self):
        metrics = Metrics()
        metrics.record_switch(CROSS, 7)
        metrics.record_switch(CROSS, 6)
        with pytest.raises(ValueError):
            metrics.steps_per_switch(CROSS)

    def test_rows_and_summary(self):
        metrics = Metrics()
        metrics.record_switch(INTRA, 6)
        rows = metrics.rows("s", "n")
        assert ["s", "n", "micro_steps_intra_6", "1"] in rows
        assert rows[-1] == ["s", "n", "monitor_share", "0.0000"]
        assert metrics.summary()[0] == "switches: intra=1 cross=0"

    def test_foreign_table(self):
        with pytest.raises(ValueError):
            parse_table("a,b\n1,2\n")
        assert parse_table(",".join(CSV_HEADER) + "\n") == []
