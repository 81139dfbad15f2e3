import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from phase import synthgen  # noqa: E402


def random_masked_series(rng, spec, length=None):
    """Series hovering around a task threshold with random missingness."""
    length = length or int(rng.integers(55, 110))
    T = spec.threshold
    level = T + rng.normal(0, 2.0)
    x = level + np.cumsum(rng.normal(0, 0.8, size=length)) * rng.choice([0.3, 1.0])
    x = np.round(x * 2) / 2  # ties with the threshold happen
    x[rng.random(length) < rng.choice([0.0, 0.1, 0.5])] = np.nan
    if rng.random() < 0.1:
        x[:] = np.nan
    return x


@pytest.fixture(scope="session")
def small_cohort():
    cfg = synthgen.default_config("OR0", 60, seed=3, calibration_procedures=300)
    return synthgen.generate_cohort(cfg)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
