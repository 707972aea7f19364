import numpy as np
import pytest


def central_diff(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(a, n, floor=1e-8):
    """Normwise relative error ||a - n|| / max(||a||, ||n||).

    Elementwise ratios are dominated by finite-difference roundoff on entries
    that are tiny compared with the rest of the gradient.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, shown in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
