import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, spread=1.0, size=()):
    """Independent construction (numpy eigh) used as a test-side source of SPD matrices."""
    A = rng.normal(scale=spread, size=tuple(size) + (n, n))
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, V = np.linalg.eigh(S)
    return (V * np.exp(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def random_unit(rng, m, size=()):
    x = rng.normal(size=tuple(size) + (m,))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def near_base_sphere(rng, m, radius, size=()):
    """Points within ``radius`` of e1 on the sphere."""
    v = rng.normal(size=tuple(size) + (m,))
    v[..., 0] = 0.0
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    theta = rng.uniform(0, radius, size=tuple(size) + (1,))
    e1 = np.zeros(m)
    e1[0] = 1.0
    return np.cos(theta) * e1 + np.sin(theta) * v


ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed again in the terminal summary."""
    def report(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
