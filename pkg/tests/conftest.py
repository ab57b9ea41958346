import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from gla.gating import GateSeq  # noqa: E402
from gla.numkit import Rng  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_problem(rng: Rng, L: int, dk: int, dv: int, temperature: float = 16.0,
                   batch: tuple = ()):
    """Standard-normal q, k, v and ``logsigmoid(randn) / temperature`` gates."""
    q = rng.randn(*batch, L, dk)
    k = rng.randn(*batch, L, dk)
    v = rng.randn(*batch, L, dv)
    la = -np.logaddexp(0.0, -rng.randn(*batch, L, dk)) / temperature
    lb = -np.logaddexp(0.0, -rng.randn(*batch, L, dv)) / temperature
    return q, k, v, GateSeq.from_logs(la, lb)


@pytest.fixture
def rng():
    return Rng(1234)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
