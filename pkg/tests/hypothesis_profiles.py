"""
Shared hypothesis settings, so every property test module runs at a comparable depth.

- STANDARD_SETTINGS: regular property tests
- MACHINE_SETTINGS: tests that boot a whole system per example
- STATE_MACHINE_SETTINGS: RuleBasedStateMachine runs
- QUICK_SETTINGS: cheap checks where more examples add little
"""
from hypothesis import HealthCheck, settings

STANDARD_SETTINGS = settings(max_examples=100, deadline=None)

MACHINE_SETTINGS = settings(max_examples=25, deadline=None,
                            suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])

STATE_MACHINE_SETTINGS = settings(max_examples=30, stateful_step_count=25, deadline=None,
                                  suppress_health_check=[HealthCheck.too_slow])

QUICK_SETTINGS = settings(max_examples=20, deadline=None)
