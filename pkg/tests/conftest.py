import os
import sys
import time

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    # Filled by test_acceptance; echoed in the terminal summary so the
    # verdicts survive pytest's output capture.
    config.acceptance_lines = []
    config.suite_start = time.time()


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
        terminalreporter.write_line(f"full run wall time {time.time() - config.suite_start:.0f}s (budget 300s)")


@pytest.fixture(scope="session")
def toy():
    from qgraph.model import ToyConfig, build_toy_transformer

    cfg = ToyConfig()
    return cfg, build_toy_transformer(cfg)


@pytest.fixture(scope="session")
def toy_table(toy):
    from qgraph.calibration import calibrate
    from qgraph.model import toy_feeds

    cfg, g = toy
    return calibrate(g, toy_feeds(cfg, 60, seed=1))
