import pytest

from pksim.harness.boot import boot
from pksim.harness.fixtures import gate_fixture_policy, pentest_policy
from pksim.machine import Defenses


@pytest.fixture
def pentest_system():
    return boot(pentest_policy())


@pytest.fixture
def gate_system():
    return boot(gate_fixture_policy())


@pytest.fixture
def undefended_system():
    """The pentest system with every defense switched off."""
    return boot(pentest_policy(), Defenses(**{name: False for name in Defenses.names()}))


@pytest.fixture
def report_dir(tmp_path):
    return tmp_path / "reports"
