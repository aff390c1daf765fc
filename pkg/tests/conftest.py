import numpy as np
import pytest

from anchoral.encoder import Architecture, init_params

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    return Architecture(12, 12, dim=4, channels=(4, 8), kernel=5, stride=2, padding=2,
                        pair_features="interaction", activation="tanh")


@pytest.fixture
def small_params(small_arch):
    return init_params(small_arch, np.random.default_rng(7))
