import numpy as np
import pytest

from cohprune.lattice import new_lattice


def lattice_from(tokens, height, width):
    tokens = np.asarray(tokens, dtype=np.float64)
    return new_lattice(height, width, tokens.shape[-1], tokens)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, title, passed, detail=""):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
