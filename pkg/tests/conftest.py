import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("spikegrid", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("spikegrid")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             for key, value in getattr(rep, "user_properties", ()) if key == "acceptance"
             and getattr(rep, "when", "call") == "call"]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
