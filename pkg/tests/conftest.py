import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def frozen():
    return json.loads((DATA / "frozen_oracles.json").read_text())


def real_dataset(X, y):
    from ulab.mixture import Dataset
    X = np.asarray(X, dtype=np.float64)
    return Dataset(X, np.asarray(y, dtype=np.float64), np.zeros(X.shape[0], dtype=np.int64), 1, "real")


def binary_dataset(X, y):
    from ulab.mixture import Dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return Dataset(X, y, (y > 0).astype(np.int64), 2, "class")


ACCEPTANCE = []


def report(number: int, ok: bool, detail: str) -> str:
    """Record one acceptance line; the summary hook prints them after the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
