import pytest

from esle.config import parse_config

SMALL = dict(mode="esle", kind="constant", epsilon0=1.0, alpha=0.05, omega_c=25.0, beta=0.1,
             t0=0.0, dt=0.005, n_steps=100, m_steps=16, runs=300, seed=12345,
             report_stride=5, chunk_size=100)


def small(**overrides):
    return parse_config({**SMALL, **overrides})


@pytest.fixture
def small_config():
    return small

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
