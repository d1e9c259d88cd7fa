import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dualprompt import ToyEncoders, make_catalog, synth_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_catalog():
    return make_catalog(6, 8, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_catalog):
    return synth_dataset(40, small_catalog, grid=(3, 3), labels_per_image=(1, 2), noise_sigma=0.1, seed=5)


@pytest.fixture(scope="session")
def aligned8():
    return ToyEncoders.build("aligned", 8)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
