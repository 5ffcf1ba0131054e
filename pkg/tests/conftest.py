import numpy as np
import pytest

from fpmflexo.fields import PolyField
from fpmflexo.geometry import build_voronoi, jittered_grid
from fpmflexo.material import isotropic_builder

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def coupling_tensors():
    """Flexoelectric ``a``, piezoelectric ``e`` and converse ``b`` with a few nonzero slots."""
    a = np.zeros((6, 2))
    a[0, 0], a[1, 1], a[4, 1], a[5, 0] = 0.02, 0.02, 0.01, 0.01
    e = np.zeros((3, 2))
    e[0, 1], e[1, 1], e[2, 0] = 0.1, 0.2, 0.05
    b = np.zeros((3, 4))
    b[0, 0], b[1, 3], b[2, 1] = 0.01, 0.02, 0.01
    return a, e, b


def coupled_material(ell=0.05, full=False):
    a, e, b = coupling_tensors()
    return isotropic_builder(1.0, 0.3, ell, flexo=a, piezo=e, permittivity=1.0,
                             converse=b if full else None, ell_phi=0.1 if full else 0.0)


def linear_fields():
    u = PolyField.linear([0.01, -0.02], [0.1, -0.05], [0.2, 0.3])
    phi = PolyField.linear([0.1], [0.5], [-0.2])
    return u, phi


def quadratic_fields():
    u = PolyField(np.array([[[0.01, 0.2, 0.1], [0.1, 0.05, 0], [0.1, 0, 0]],
                            [[-0.02, 0.3, -0.1], [-0.05, 0.1, 0], [0.05, 0, 0]]]))
    phi = PolyField(np.array([[[0.1, -0.2, 0.1], [0.5, 0.1, 0], [0.2, 0, 0]]]))
    return u, phi


def square_partition(n, seed=1, amplitude=0.3):
    return build_voronoi(jittered_grid(n, n, amplitude, seed=seed), UNIT_SQUARE)


@pytest.fixture(scope="session")
def partition_10():
    return square_partition(10)


@pytest.fixture(scope="session")
def material():
    return coupled_material()


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
