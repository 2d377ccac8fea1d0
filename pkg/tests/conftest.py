import numpy as np
import pytest

from minicar.params import DriveConfig, default_params


@pytest.fixture
def theta():
    return default_params(1)


@pytest.fixture
def model(theta):
    return theta.model


@pytest.fixture
def drive():
    return DriveConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(fun, z, h=1e-6):
    """Jacobian of ``fun`` at ``z`` by central differences (columns = entries of z)."""
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z))
    J = np.zeros(f0.shape + (z.size,))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        J[..., i] = (np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2 * h)
    return J


def random_driving_state(rng, vx=(0.8, 3.0)):
    return np.array([*rng.uniform(-1.0, 1.0, 2), rng.uniform(-np.pi, np.pi), rng.uniform(*vx),
                     rng.uniform(-0.2, 0.2), rng.uniform(-2.0, 2.0)])


def random_input(rng):
    return np.array([rng.uniform(-0.35, 0.35), rng.uniform(-0.2, 1.0)])


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
