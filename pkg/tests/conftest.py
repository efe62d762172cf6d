import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
