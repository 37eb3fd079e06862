import numpy as np
import pytest

from zsharp.core import SeededRng, TensorSet


def gaussian_set(seed: int, sizes=(6, 10, 4), std: float = 1.0) -> TensorSet:
    rng = SeededRng(seed)
    return TensorSet.from_pairs((f"t{i}", rng.normal(n, std=std)) for i, n in enumerate(sizes))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def report(line: str) -> None:
    """Record one acceptance verdict line (echoed in the terminal summary)."""
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
