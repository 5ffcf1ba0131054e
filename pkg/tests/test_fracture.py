import numpy as np
import pytest

from conftest import UNIT_SQUARE, coupled_material, linear_fields, square_partition
from fpmflexo.assembly_primal import (
    BoundaryConditionSet, PenaltyParams, SegmentBC, SideOps, _interface_pairs, assemble_internal,
    build_discretization, direction_matrices, segment_rule,
)
from fpmflexo.errors import CrackError
from fpmflexo.fields import PolyField
from fpmflexo.fracture import (
    CrackCriterion, CrackedSystem, CrackState, FractureProblem, LoadSchedule, _bilinear,
    cells_within, compute_ber, compute_j, contour_ber, hoop_traction, quasi_static_run,
)
from fpmflexo.geometry import build_voronoi, grid_points
from fpmflexo.manufactured import ManufacturedSolution
from fpmflexo.material import isotropic_builder

STRIP = np.array([[0.0, -0.5], [1.0, -0.5], [1.0, 0.5], [0.0, 0.5]])


def strip_partition(n=8):
    return build_voronoi(grid_points(n, n, (0.0, 1.0, -0.5, 0.5)), STRIP)


def tension_bcs(part, top_phi=None):
    """Clamped bottom edge, unit traction on top, everything else free."""
    def rule(seg):
        m = seg.midpoint
        if m[1] < -0.5 + 1e-9:
            return SegmentBC(u="u", d="R", phi="phi", P="Z")
        if m[1] > 0.5 - 1e-9:
            data = {"Q": PolyField.constant([0.0, 1.0])}
            if top_phi is None:
                return SegmentBC(u="Q", data=data)
            return SegmentBC(u="Q", phi="phi", data={**data, "phi": PolyField.constant(top_phi)})
        return SegmentBC()
    return BoundaryConditionSet.uniform(part, rule)


def mid_line(part, y=0.0):
    """Horizontal internal segments on ``y``, left to right."""
    ids = [s.id for s in part.segments if s.internal and abs(s.midpoint[1] - y) < 1e-9]
    return sorted(ids, key=lambda s: part.segments[s].midpoint[0])


def strain_field(eps):
    """Linear displacement with constant engineering strain ``[e11, e22, 2 e12]``."""
    return PolyField.linear([0.0, 0.0], [eps[0], eps[2] / 2], [eps[2] / 2, eps[1]])


# ---------------------------------------------------------------------------
# crack state and settings


def test_crack_state_rejects_bad_requests():
    part = strip_partition(4)
    state = CrackState(part)
    internal = part.internal_ids[0]
    with pytest.raises(CrackError):
        state.with_crack(internal, "leaky")
    with pytest.raises(CrackError):
        state.with_crack(part.external_ids[0])
    with pytest.raises(CrackError):
        state.with_crack(len(part.segments) + 5)
    once = state.with_crack(internal)
    with pytest.raises(CrackError):
        once.with_crack(internal)


def test_face_kinds_cut_the_right_adjacency():
    part = strip_partition(4)
    sid = part.internal_ids[0]
    seg = part.segments[sid]
    perm = CrackState(part).with_crack(sid, "permeable")
    assert seg.e2 not in perm.mech_adjacency()[seg.e1]
    assert perm.elec_adjacency() == part.adjacency()
    imp = CrackState(part).with_crack(sid, "impermeable")
    assert seg.e2 not in imp.elec_adjacency()[seg.e1]


def test_impermeable_crack_removes_neighbour_from_support():
    part = strip_partition(6)
    sid = mid_line(part)[2]
    seg = part.segments[sid]
    mat = coupled_material()
    before = build_discretization(part, mat, "quadratic")
    assert seg.e2 in before.supports_phi[seg.e1].members
    after = build_discretization(part, mat, "quadratic", cracked=frozenset([sid]),
                                 impermeable=frozenset([sid]))
    assert seg.e2 not in after.supports_u[seg.e1].members
    assert seg.e2 not in after.supports_phi[seg.e1].members
    permeable = build_discretization(part, mat, "quadratic", cracked=frozenset([sid]))
    assert all(a.members == b.members for a, b in zip(before.supports_phi, permeable.supports_phi))


@pytest.mark.parametrize("kwargs", [
    {"kind": "energy"}, {"policy": "some"}, {"threshold": 0.0}, {"threshold": float("nan")},
])
def test_criterion_validation(kwargs):
    with pytest.raises(CrackError):
        CrackCriterion(**kwargs)


def test_load_schedule():
    assert LoadSchedule.linear(2.0, 4).multipliers == (0.5, 1.0, 1.5, 2.0)
    with pytest.raises(CrackError):
        LoadSchedule(())
    with pytest.raises(CrackError):
        LoadSchedule((1.0, float("inf")))


# ---------------------------------------------------------------------------
# segment quantities


def _elastic():
    return isotropic_builder(1.0, 0.3, 0.0, permittivity=1.0)


def _stress_state(mat, sigma):
    """Nodal data of a uniform stress ``[s11, s22, s12]`` and zero potential."""
    eps = np.linalg.solve(mat.C, np.asarray(sigma, dtype=float))
    return ManufacturedSolution(strain_field(eps), PolyField.constant([0.0]), mat)


def test_hoop_traction_uniaxial():
    mat = _elastic()
    part = square_partition(6)
    disc = build_discretization(part, mat, "quadratic")
    x = _stress_state(mat, [2.5, 0.0, 0.0]).nodal(part.points)
    for sid in part.internal_ids:
        n = part.segments[sid].normal
        expected = 2.5 * n[0] ** 2
        assert hoop_traction(disc, sid, x) == pytest.approx(expected, abs=1e-9)


def test_hoop_traction_pure_shear_on_diagonal_segments():
    # checkerboard lattice: every internal segment is at 45 degrees
    g = grid_points(10, 10)
    ij = np.round(g * 10 - 0.5).astype(int)
    pts = g[(ij[:, 0] + ij[:, 1]) % 2 == 0]
    part = build_voronoi(pts, UNIT_SQUARE)
    mat = _elastic()
    disc = build_discretization(part, mat, "quadratic")
    x = _stress_state(mat, [0.0, 0.0, 1.5]).nodal(part.points)
    diagonal = [s for s in part.internal_ids if abs(abs(part.segments[s].normal[0]) - np.sqrt(0.5)) < 1e-9]
    assert len(diagonal) > 20
    for sid in diagonal:
        n = part.segments[sid].normal
        assert hoop_traction(disc, sid, x) == pytest.approx(2 * 1.5 * n[0] * n[1], abs=1e-9)
        assert abs(hoop_traction(disc, sid, x)) == pytest.approx(1.5, abs=1e-9)


def test_ber_vanishes_for_continuous_and_rigid_fields():
    mat = coupled_material()
    part = square_partition(6)
    disc = build_discretization(part, mat, "cubic")
    pen = PenaltyParams.default(mat)
    u, phi = linear_fields()
    smooth = ManufacturedSolution(u, phi, mat).nodal(part.points)
    rigid = ManufacturedSolution(PolyField.linear([0.3, -0.1], [0.0, 0.2], [-0.2, 0.0]),
                                 PolyField.constant([0.0]), mat).nodal(part.points)
    scale = PenaltyParams.default(mat).eta1[0]
    for sid in part.internal_ids[::5]:
        assert abs(compute_ber(disc, sid, smooth, pen)) < 1e-9 * scale
        assert abs(compute_ber(disc, sid, rigid, pen)) < 1e-9 * scale


def test_segment_form_matches_internal_stiffness():
    """With the plain trial operators as test functions the form is x^T K_e x."""
    mat = coupled_material()
    part = square_partition(6)
    disc = build_discretization(part, mat, "cubic")
    pen = PenaltyParams.default(mat)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(disc.n_dof)
    for sid in part.internal_ids[::7]:
        seg = part.segments[sid]
        pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
        L, R = SideOps(disc, seg.e1, pts), SideOps(disc, seg.e2, pts)
        dm = direction_matrices(seg.normal, seg.tangent)
        pairs = list(_interface_pairs(disc, L, R, dm, seg.h, pen, True, True, mat, None, None))
        xe = np.concatenate([x[L.dofs], x[R.dofs]])
        c = assemble_internal(disc, sid, pen)
        assert _bilinear(pairs, pairs, xe, w) == pytest.approx(xe @ c.K @ xe, rel=1e-10)


def test_j_vanishes_for_uniform_field():
    mat = coupled_material()
    part = square_partition(10)
    disc = build_discretization(part, mat, "cubic")
    u, phi = linear_fields()
    x = ManufacturedSolution(u, phi, mat).nodal(part.points)
    cells = cells_within(part, (0.5, 0.5), 0.3)
    assert abs(compute_j(disc, cells, x)) < 1e-10


def test_j_vanishes_for_smooth_bending():
    # pure bending of an elastic plate; the quadratic field is reproduced exactly
    nu = 0.3
    mat = isotropic_builder(1.0, nu, 0.0, permittivity=1.0)
    c = np.zeros((2, 3, 3))
    c[0, 1, 1], c[1, 2, 0], c[1, 0, 2] = 1.0, -0.5, -0.5 * nu / (1 - nu)
    ms = ManufacturedSolution(PolyField(c), PolyField.constant([0.0]), mat)
    part = square_partition(12, amplitude=0.0)
    disc = build_discretization(part, mat, "cubic")
    x = ms.nodal(part.points)
    cells = cells_within(part, (0.5, 0.5), 0.25)
    assert abs(compute_j(disc, cells, x)) < 1e-8


def test_j_rejects_unsupported_contours():
    mat = _elastic()
    part = strip_partition(8)
    bcs = tension_bcs(part)
    line = mid_line(part)
    prob = FractureProblem(part, mat, bcs, order="quadratic", precracks=tuple(line[:3]))
    system = CrackedSystem(prob)
    x, _ = system.solve(1.0)
    with pytest.raises(CrackError, match="essential"):
        compute_j(system.disc, cells_within(part, (0.5, -0.5), 0.2), x, bcs=bcs)
    # a region holding only the cells above the crack has a crack face on its boundary
    above = [i for i in range(part.n) if 0 < part.points[i, 1] < 0.2 and part.points[i, 0] < 0.3]
    with pytest.raises(CrackError, match="crack face"):
        compute_j(system.disc, above, x, bcs=bcs)
    with pytest.raises(CrackError):
        compute_j(system.disc, [], x)


# ---------------------------------------------------------------------------
# incremental system


def test_patch_matches_rebuild_and_keeps_dofs():
    mat = coupled_material()
    part = strip_partition(8)
    system = CrackedSystem(FractureProblem(part, mat, tension_bcs(part), order="cubic"))
    n0 = system.n_dof
    for sid in mid_line(part)[:3]:
        keys = system.apply_crack(sid)
        assert ("internal", sid) in keys
        K, f = system.rebuild()
        assert system.n_dof == n0 == 3 * part.n
        assert abs(K - system.K).max() <= 1e-12 * abs(K).max()
        assert np.allclose(f, system.f, rtol=0, atol=1e-12 * np.abs(f).max())


def test_crack_changes_the_solution_and_opens():
    mat = _elastic()
    part = strip_partition(8)
    prob = FractureProblem(part, mat, tension_bcs(part), order="quadratic")
    system = CrackedSystem(prob)
    x0, _ = system.solve(1.0)
    for sid in mid_line(part)[:4]:
        system.apply_crack(sid)
    x1, _ = system.solve(1.0)
    # a crack makes the specimen more compliant under the same load
    assert system.f @ x1 > system.f @ x0


def test_zero_crack_sweep():
    mat = _elastic()
    part = strip_partition(6)
    prob = FractureProblem(part, mat, tension_bcs(part), order="quadratic")
    hist = quasi_static_run(prob, LoadSchedule((0.5, 1.0)), CrackCriterion(threshold=1e6))
    assert [h.load for h in hist] == [0.5, 1.0]
    assert all(not h.new_cracks and not h.cracked for h in hist)
    assert np.allclose(hist[1].x, 2 * hist[0].x)


def test_face_kind_only_affects_electrics_without_coupling():
    mat = isotropic_builder(1.0, 0.3, 0.05, permittivity=1.0)
    part = strip_partition(8)
    bcs = tension_bcs(part, top_phi=1.0)
    line = tuple(mid_line(part)[:4])
    xs = {}
    for kind in ("permeable", "impermeable"):
        prob = FractureProblem(part, mat, bcs, order="quadratic", face_kind=kind, precracks=line)
        xs[kind], _ = CrackedSystem(prob).solve(1.0)
    n = 2 * part.n
    u_p, u_i = xs["permeable"][:n], xs["impermeable"][:n]
    assert np.allclose(u_p, u_i, rtol=0, atol=1e-10 * np.abs(u_p).max())
    assert np.abs(xs["permeable"][n:] - xs["impermeable"][n:]).max() > 1e-3


def test_contour_ber_sums_segment_values():
    mat = _elastic()
    part = strip_partition(8)
    prob = FractureProblem(part, mat, tension_bcs(part), order="quadratic",
                           precracks=tuple(mid_line(part)[:3]))
    system = CrackedSystem(prob)
    x, _ = system.solve(1.0)
    cells = cells_within(part, (0.4, 0.0), 0.2)
    total = contour_ber(system.disc, cells, x, system.penalties)
    inside = set(cells)
    parts = [compute_ber(system.disc, s.id, x, system.penalties, (1.0, 0.0))
             for s in part.segments
             if s.internal and s.e1 in inside and s.e2 in inside and s.id not in system.disc.cracked]
    assert total == pytest.approx(sum(parts), rel=1e-12)
