import numpy as np
import pytest

from conftest import UNIT_SQUARE
from fpmflexo.dq import RBFParams, dq_weights, gfd_weights
from fpmflexo.errors import AssemblyError
from fpmflexo.geometry import build_voronoi, compute_supports, jittered_grid
from fpmflexo.shape import field_operators, mixed_shape, primal_shape


def shapes(partition, order="cubic", degree=1, kind="primal"):
    out = []
    for s in compute_supports(partition):
        X = partition.points[list(s.members)]
        host = X[0]
        if kind == "mixed":
            out.append(mixed_shape(s.members, gfd_weights(X, s.owner), host))
        else:
            w = dq_weights(X, RBFParams(degree=degree), owner=s.owner)
            out.append(primal_shape(order, s.members, w, host))
    return out


def interior_points(cell, k=5, seed=0):
    """Points on segments from the centroid toward each polygon vertex."""
    rng = np.random.default_rng(seed)
    v = cell.polygon[rng.integers(0, len(cell.polygon), k)]
    t = rng.uniform(0.1, 0.9, (k, 1))
    return cell.centroid + t * (v - cell.centroid)


@pytest.mark.parametrize("order", ["quadratic", "cubic"])
def test_kronecker_delta_at_host(partition_10, order):
    for s in shapes(partition_10, order):
        row = s.values(s.host)[0]
        assert row[0] == 1.0
        assert np.all(row[1:] == 0.0)


def test_mixed_kronecker_delta(partition_10):
    for s in shapes(partition_10, kind="mixed"):
        row = s.values(s.host)[0]
        assert row[0] == 1.0 and np.all(row[1:] == 0.0)


@pytest.mark.parametrize("order,degree", [("quadratic", 2), ("cubic", 2), ("cubic", 3)])
def test_quadratic_field_reproduced_inside_cells(partition_10, order, degree):
    pts = partition_10.points
    f = lambda p: 0.3 + p[:, 0] ** 2 - 0.5 * p[:, 0] * p[:, 1] + 2 * p[:, 1] ** 2
    for s, cell in zip(shapes(partition_10, order, degree), partition_10.cells):
        q = interior_points(cell)
        approx = s.values(q) @ f(pts[s.members])
        assert np.allclose(approx, f(q), atol=1e-9)


def test_linear_augmentation_does_not_reproduce_quadratics(partition_10):
    pts = partition_10.points
    f = lambda p: p[:, 0] ** 2
    err = max(np.abs(s.values(c.centroid) @ f(pts[s.members]) - f(c.centroid[None])).max()
              for s, c in zip(shapes(partition_10), partition_10.cells))
    assert err > 1e-6


def test_exponential_trial_field_is_discontinuous():
    part = build_voronoi(jittered_grid(10, 10, 0.3, seed=1), UNIT_SQUARE)
    f = lambda p: np.exp(-10 * np.hypot(p[:, 0] - 0.5, p[:, 1] - 0.5))
    sh = shapes(part)
    jumps = []
    for k in part.internal_ids:
        seg = part.segments[k]
        m = seg.midpoint[None]
        a = sh[seg.e1].values(m) @ f(part.points[sh[seg.e1].members])
        b = sh[seg.e2].values(m) @ f(part.points[sh[seg.e2].members])
        jumps.append(abs(a - b)[0])
    assert max(jumps) > 1e-4


def test_mixed_shape_constant_and_linear(partition_10):
    pts = partition_10.points
    for s, cell in zip(shapes(partition_10, kind="mixed"), partition_10.cells):
        q = interior_points(cell)
        N = s.values(q)
        assert np.allclose(N @ np.full(s.size, 2.5), 2.5, atol=1e-12)
        g = 2 * pts[s.members, 0] + 3 * pts[s.members, 1]
        assert np.allclose(N @ g, 2 * q[:, 0] + 3 * q[:, 1], atol=1e-12)


def test_full_theory_needs_cubic_potential(partition_10):
    s = compute_supports(partition_10)[0]
    w = dq_weights(partition_10.points[list(s.members)])
    with pytest.raises(AssemblyError):
        primal_shape("quadratic", s.members, w, partition_10.points[0], theory="full", field="phi")
    with pytest.raises(AssemblyError):
        primal_shape("linear", s.members, w, partition_10.points[0])


def test_operator_properties(partition_10):
    pts = partition_10.points
    for s, cell in zip(shapes(partition_10, "cubic", 3), partition_10.cells):
        q = interior_points(cell, 2)
        ops = field_operators(s, q)
        assert np.allclose(ops.eps.sum(axis=2), 0, atol=1e-10)
        assert np.allclose(ops.kappa1[0], ops.kappa1[1])
        assert np.allclose(ops.kappa2[0], ops.kappa2[1])
        same = field_operators(s, q[:1])
        assert np.allclose(same.kappa[0], ops.kappa[0], rtol=1e-13, atol=0)
        # E = -grad(phi) for phi = -x
        E = ops.E @ (-pts[s.members, 0])
        assert np.allclose(E, [[1, 0], [1, 0]], atol=1e-10)


def test_rigid_body_motion_has_no_strain(partition_10):
    pts = partition_10.points
    a, b, c = 0.3, -0.2, 0.7
    for s, cell in zip(shapes(partition_10), partition_10.cells):
        X = pts[s.members]
        uE = np.column_stack([a + c * X[:, 1], b - c * X[:, 0]]).ravel()
        ops = field_operators(s, interior_points(cell, 3))
        assert np.abs(ops.eps @ uE).max() < 1e-10
        assert np.abs(ops.kappa @ uE).max() < 1e-10


def test_linear_shape_has_no_gradient_operators(partition_10):
    s = shapes(partition_10, kind="mixed")[3]
    ops = field_operators(s, partition_10.cells[3].centroid)
    assert not ops.kappa.any() and not ops.V.any()


def test_directional_shape_matches_derivative_rows(partition_10):
    s = shapes(partition_10, "cubic")[5]
    q = interior_points(partition_10.cells[5], 3)
    d = np.array([0.6, 0.8])
    expected = 0.6 * s.derivative_rows(q, 1, 0) + 0.8 * s.derivative_rows(q, 0, 1)
    assert np.allclose(s.directional(d).values(q), expected)
