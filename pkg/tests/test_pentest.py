import pytest

from pksim.harness.pentest import KEYS, defense_necessity, pentest_suite, run_pentest, suite_report
from pksim.machine import Defenses


class TestSuite:
    def test_everything_is_contained(self):
        results = pentest_suite()
        assert [r.key for r in results] == list(KEYS)
        for r in results:
            assert r.attempts
            assert not r.breach, r.summary()

    def test_report(self):
        report = suite_report(pentest_suite())
        assert not report.failed
        assert ["pentest", "P6", "verdict", "contained"] in report.rows
        assert report.lines[0].startswith("P1 modify another compartment's heap object: contained")

    def test_legitimate_transfer_still_goes_through(self):
        result = run_pentest("P6")
        assert result.attempts[-1].observed == "resumed"


@pytest.mark.parametrize("defense,key", [
    ("xom", "P4"),
    ("loopback_check", "P5"),
    ("interrupt_reset", "P5"),
    ("pt_protection", "P2"),
    ("deprivation", "P3"),
    ("deprivation", "P4"),
    ("transfer_validation", "P6"),
])
def test_switching_a_defense_off_lets_its_attack_through(defense, key):
    assert run_pentest(key, Defenses().without(defense)).breach


def test_undefended_system_is_breached_everywhere():
    results = pentest_suite(Defenses(**{name: False for name in Defenses.names()}))
    assert sum(r.breach for r in results) >= 5


@pytest.mark.slow
def test_every_defense_is_necessary():
    necessity = defense_necessity()
    assert set(necessity) == set(Defenses.names())
    assert all(necessity.values()), necessity
    report = suite_report(pentest_suite(), necessity)
    assert not report.failed
