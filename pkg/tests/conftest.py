import numpy as np
import pytest

from qkdlink.postproc import ldpc


def four_cycle_free(code: ldpc.LdpcCode) -> bool:
    """Girth >= 6 audit: no two columns share more than one check.

    Works from the dense matrix, independently of the construction code.
    """
    # float32 goes through BLAS; overlap counts stay exact small integers
    h = code.dense().astype(np.float32)
    overlap = h.T @ h
    np.fill_diagonal(overlap, 0)
    return int(overlap.max()) <= 1


def planted_errors(rng, n, weight):
    e = np.zeros(n, dtype=np.uint8)
    e[rng.choice(n, weight, replace=False)] = 1
    return e


@pytest.fixture(scope="session")
def small_code():
    return ldpc.generate_code(512, 0.5, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
