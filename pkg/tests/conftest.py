import numpy as np
import pytest

from stitchsmc.core import make_rng
from stitchsmc.oracles import random_hmm


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture(scope="session")
def small_hmm():
    """K=3 HMM with T=6 observations shared by the HMM checks."""
    r = make_rng(7)
    model = random_hmm(3, 3, r, stickiness=2.0, clarity=2.0)
    _, y = model.simulate(6, r)
    return model, y


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion; returns the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
