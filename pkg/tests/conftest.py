import time

import numpy as np
import pytest

from pstarc.data import DomainSpec
from pstarc.experiments import ScenarioConfig, build_scenario

SEEDS = range(5)


def two_blob_spec(offset=3.0, dim=4, per_class=500, seed=0, sigma=1.0):
    means = np.zeros((2, dim))
    means[0, 0], means[1, 0] = offset, -offset
    return DomainSpec(means, sigma, per_class, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scenarios():
    """Reference scenarios for seeds 0..4 with three calibrated target domains each.

    Domain 0 is the single-domain reference shift.
    """
    t0 = time.time()
    out = {s: build_scenario(s, ScenarioConfig(domains=3)) for s in SEEDS}
    out["_build_seconds"] = time.time() - t0
    return out
