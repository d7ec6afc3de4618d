import numpy as np
import pytest

from binnet import autodiff as ad


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b, floor: float = 1e-2) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tape_gradients(fn, arrays):
    """Evaluate ``fn(*leaves)`` on a fresh tape; return (value, [grads])."""
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    grads = tape.grad(out, leaves)
    return float(out.value), grads


def fd_max_rel_error(fn, arrays, h: float = 1e-5, floor: float = 1e-2) -> float:
    """Worst relative error between tape gradients and central differences."""
    _, grads = tape_gradients(fn, arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [np.array(b) for b in arrays]
            args[k] = x
            return float(fn(*args))
        worst = max(worst, rel_error(grads[k], central_difference(f, a, h), floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
