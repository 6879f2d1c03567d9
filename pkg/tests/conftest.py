import numpy as np
import pytest

from advattrib import data as D
from advattrib import victims as V


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of the array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture(scope="session")
def small_split():
    return D.generate_synthetic(4, 40, side=8, seed=0, test_per_class=10)


@pytest.fixture(scope="session")
def small_zoo(small_split):
    descs = V.builtin_zoo(8, 4)
    return [V.train_victim(d, small_split, 3, 0.05, seed=i) for i, d in enumerate(descs)]


@pytest.fixture(scope="session")
def small_reference(small_split):
    return V.train_victim(V.reference_descriptor(8, 4), small_split, 3, 0.05, seed=99)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
