import os
import sys
import time

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record_acceptance(criterion, ok, detail):
    """Store one verdict line; the terminal summary prints them all."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_pipeline(tmp_path_factory):
    """Full oracle pipeline at acceptance scale (128 speakers, 512 segments), run once."""
    from vocarch.cli import main

    wd = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    assert main(["synth", "--workdir", str(wd), "--seed", "11", "--speakers-per-cell", "4", "--threads", "1"]) == 0
    assert main(["all", "--workdir", str(wd), "--threads", "1"]) == 0
    return wd, time.perf_counter() - t0


@pytest.fixture(scope="session")
def pipeline_run(acceptance_pipeline):
    return acceptance_pipeline[0]


@pytest.fixture(scope="session")
def pipeline_seconds(acceptance_pipeline):
    return acceptance_pipeline[1]
