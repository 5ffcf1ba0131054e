"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed as each check finishes and repeated in the pytest terminal
summary.  Run ``python3 tests/test_acceptance.py`` to get only the lines.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse.linalg as spl

import conftest
from conftest import UNIT_SQUARE, coupled_material, linear_fields, quadratic_fields, square_partition
from fpmflexo.assembly_mixed import (
    assemble_mixed_blocks,
    build_mixed_discretization,
    condense,
    full_vector,
    recover_high_order,
    solve_mixed,
)
from fpmflexo.assembly_primal import (
    BoundaryConditionSet,
    PenaltyParams,
    SegmentBC,
    assemble_entity,
    assemble_system,
    build_discretization,
    direction_matrices,
    entity_keys,
    sum_contributions,
)
from fpmflexo.dq import RBFParams, dq_weights
from fpmflexo.fields import PolyField
from fpmflexo.fracture import (
    CrackCriterion,
    CrackedSystem,
    FractureProblem,
    LoadSchedule,
    cells_within,
    compute_j,
    contour_ber,
    hoop_traction,
    quasi_static_run,
)
from fpmflexo.geometry import build_voronoi, generalized_supports, grid_points, jittered_grid
from fpmflexo.manufactured import ManufacturedSolution
from fpmflexo.material import isotropic_builder
from fpmflexo.shape import primal_shape
from fpmflexo.solver import newton_raphson, solve_linear

pytestmark = pytest.mark.slow
ROOT = Path(__file__).resolve().parents[1]
FRACTURE_SECONDS: list = []


def report(label: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


def rel_inf(x, ex):
    return float(np.abs(x - ex).max() / np.abs(ex).max())


def rel_l2(x, ex):
    return float(np.linalg.norm(x - ex) / np.linalg.norm(ex))


def cubic_fields():
    c = np.zeros((2, 4, 4))
    c[0, 0, 2], c[0, 1, 1], c[0, 3, 0], c[0, 0, 3] = 0.3, -0.2, 0.1, 0.1
    c[1, 2, 0], c[1, 1, 2], c[1, 0, 1] = 0.2, 0.15, 0.4
    p = np.zeros((1, 4, 4))
    p[0, 2, 0], p[0, 1, 1], p[0, 0, 3], p[0, 1, 0] = 0.3, 0.2, -0.1, 0.2
    return PolyField(c), PolyField(p)


def quartic_fields():
    c = np.zeros((2, 5, 5))
    c[0, 4, 0], c[0, 2, 2], c[0, 1, 3] = 0.3, -0.5, 0.2
    c[1, 3, 1], c[1, 0, 4], c[1, 2, 0] = 0.4, -0.3, 0.1
    p = np.zeros((1, 5, 5))
    p[0, 3, 1], p[0, 0, 4], p[0, 2, 2] = 0.5, 0.3, -0.4
    return PolyField(c), PolyField(p)


def test_criterion_1_dq_and_shape_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(8, 25))
        X = rng.uniform(-5, 5, 2) + rng.uniform(-1, 1, (m, 2)) * rng.uniform(0.01, 2.0)
        w = dq_weights(X, RBFParams())
        scale = np.abs(w.B).sum(1)
        const = np.abs(w.B.sum(1)) / scale
        d = w.B @ (1.5 + 2.0 * X[:, 0] - 3.0 * X[:, 1])
        lin = np.abs(d - np.r_[2.0, -3.0, np.zeros(7)]) / scale
        row = primal_shape("cubic", np.arange(m), w, X[0]).values(X[0])[0]
        delta = np.abs(row - np.eye(m)[0]).max()
        worst = max(worst, const.max(), lin.max(), delta)
    dt = time.perf_counter() - t0
    report("1", worst <= 1e-10 and dt < 5.0,
           f"200 random supports, worst scaled residual {worst:.1e}, {dt:.2f} s")


def _primal_patch(order):
    part = square_partition(10)
    mat = coupled_material()
    u, phi = linear_fields()
    mu = -mat.a @ np.array([-0.5, 0.2])

    def rule(seg):
        dm = direction_matrices(seg.normal, seg.tangent)
        return SegmentBC(u="u", d="R", phi="phi",
                         data={"u": u, "phi": phi, "R": PolyField.constant(dm.n4 @ dm.n3 @ mu)})

    t0 = time.perf_counter()
    disc = build_discretization(part, mat, order, "reduced", quadrature=2)
    s = assemble_system(disc, BoundaryConditionSet.uniform(part, rule))
    x = solve_linear(s.K, s.f)
    ex = np.concatenate([u(part.points).ravel(), phi(part.points)[:, 0]])
    return rel_inf(x, ex), time.perf_counter() - t0


def _mixed_patch():
    mat = coupled_material()
    ms = ManufacturedSolution(*linear_fields(), mat)
    t0 = time.perf_counter()
    disc = build_mixed_discretization(square_partition(10), mat)
    sol = solve_mixed(disc, ms.boundary_conditions(disc.partition, lambda s: {"d": "R", "P": "Z"}))
    return rel_inf(sol.state.x, ms.nodal(disc.partition.points)), time.perf_counter() - t0


def test_criterion_2_patch_tests():
    runs = {"quadratic": _primal_patch("quadratic"), "cubic": _primal_patch("cubic"), "mixed": _mixed_patch()}
    ok = all(err < 1e-7 and dt < 10.0 for err, dt in runs.values())
    report("2", ok, ", ".join(f"{k} {e:.1e} in {t:.1f} s" for k, (e, t) in runs.items())
           + " (100 points, primal at quadrature level 2)")


def test_criterion_3_symmetry_and_sparsity():
    part = build_voronoi(jittered_grid(20, 20, 0.3, seed=3), UNIT_SQUARE)
    mat = coupled_material()
    ms = ManufacturedSolution(*linear_fields(), mat)
    parts = []
    ok = True
    disc = build_mixed_discretization(part, mat)
    Kb, _, _ = condense(assemble_mixed_blocks(disc, ms.boundary_conditions(disc.partition)), disc)
    gen = max(len(g) for g in generalized_supports(disc.supports))
    systems = [("mixed", Kb.tocsr(), gen)]
    for order in ("quadratic", "cubic"):
        pd = build_discretization(part, mat, order, "reduced")
        K = assemble_system(pd, ms.boundary_conditions(part)).K.tocsr()
        systems.append((order, K, max(len(g) for g in generalized_supports(pd.supports_u))))
    for name, K, g in systems:
        sym = abs(K - K.T).max() / abs(K).max()
        nnz = int(np.diff(K.indptr).max())
        ok &= sym <= 1e-12 and nnz <= 3 * g
        parts.append(f"{name} asym {sym:.1e} nnz/row {nnz} vs limit {3 * g}")
    report("3", ok, "; ".join(parts))


def test_criterion_4_condensed_equals_saddle():
    diffs = []
    for theory in ("reduced", "full"):
        mat = coupled_material(full=theory == "full")
        ms = ManufacturedSolution(*quadratic_fields(), mat, theory)
        part = build_voronoi(jittered_grid(3, 3, 0.2, seed=2), UNIT_SQUARE)
        disc = build_mixed_discretization(part, mat, theory)
        blocks = assemble_mixed_blocks(disc, ms.boundary_conditions(disc.partition,
                                                                    lambda s: {"d": "R", "P": "Z"}))
        z = np.linalg.solve(blocks.K.toarray(), blocks.f)
        Kb, fb, data = condense(blocks, disc)
        x = np.linalg.solve(Kb.toarray(), fb)
        full = full_vector(disc, blocks, x, recover_high_order(data, blocks, x))
        diffs.append((theory, blocks.lagrange.count, rel_inf(full, z)))
    ok = all(n > 0 and d <= 1e-10 for _, n, d in diffs)
    report("4", ok, ", ".join(f"{t} ({n} multipliers) {d:.1e}" for t, n, d in diffs))


def test_criterion_5_primal_cubic_matches_mixed():
    mat = coupled_material()
    ms = ManufacturedSolution(*cubic_fields(), mat)
    diffs = []
    for n in (16, 22, 32):
        disc = build_mixed_discretization(build_voronoi(jittered_grid(n, n, 0.3, seed=n), UNIT_SQUARE), mat)
        P = disc.partition
        bcs = ms.boundary_conditions(P)
        xm = solve_mixed(disc, bcs).state.x
        s = assemble_system(build_discretization(P, mat, "cubic", "reduced"), bcs)
        diffs.append((n * n, rel_l2(xm, solve_linear(s.K, s.f))))
    d = [v for _, v in diffs]
    ok = d[-1] < 0.05 and diffs[-1][0] >= 1000 and all(b < a for a, b in zip(d, d[1:]))
    report("5", ok, ", ".join(f"N={n} {100 * v:.2f}%" for n, v in diffs))


def test_criterion_6_electrostatic_stress_iteration():
    part = square_partition(10)
    mat = coupled_material(full=True)
    u, phi = quadratic_fields()
    bcs = BoundaryConditionSet.uniform(part, lambda s: SegmentBC(u="u", phi="phi", data={"u": u, "phi": phi}))
    disc = build_discretization(part, mat, "cubic", "full")
    pen = PenaltyParams.default(mat)

    def assemble(x):
        s = assemble_system(disc, bcs, pen, state=x)
        return s.K, s.f

    st = newton_raphson(assemble, np.zeros(disc.n_dof), keep_iterates=True)
    K0, f0 = sum_contributions([assemble_entity(disc, k, bcs, pen, None) for k in entity_keys(disc)], disc.n_dof)
    first = rel_inf(st.history[0]["x"], solve_linear(K0, f0))

    zero = PolyField.constant([0.0])
    bcs0 = BoundaryConditionSet.uniform(part, lambda s: SegmentBC(u="u", phi="phi", data={"u": u, "phi": zero}))
    weak = mat.scaled_coupling(1e-6)
    pw = PenaltyParams.default(weak)
    dw = build_discretization(part, weak, "cubic", "full")
    xf = newton_raphson(lambda x: (lambda s: (s.K, s.f))(assemble_system(dw, bcs0, pw, state=x)),
                        np.zeros(dw.n_dof)).x
    sr = assemble_system(build_discretization(part, weak, "cubic", "reduced", phi_order="cubic"), bcs0, pw)
    gap = rel_l2(xf, solve_linear(sr.K, sr.f))
    report("6", first <= 1e-12 and gap < 1e-4,
           f"first iterate vs linear solve {first:.1e}, coupling x1e-6 full vs reduced {gap:.1e}")


def test_criterion_7_convergence():
    mat = isotropic_builder(1.0, 0.3, 0.05, flexo=coupled_material().a, piezo=coupled_material().e,
                            permittivity=1.0)
    ms = ManufacturedSolution(*quartic_fields(), mat)
    errs = []
    for nx in (10, 20, 40):
        part = build_voronoi(jittered_grid(nx, nx, 0.3, seed=3), UNIT_SQUARE)
        s = assemble_system(build_discretization(part, mat, "cubic", "reduced", quadrature=2),
                            ms.boundary_conditions(part))
        errs.append(rel_l2(spl.spsolve(s.K.tocsc(), s.f), ms.nodal(part.points)))
    rates = [np.log2(a / b) for a, b in zip(errs, errs[1:])]
    ok = all(r >= 1.0 for r in rates)
    report("7", ok, "N=100/400/1600 errors " + ", ".join(f"{e:.2e}" for e in errs)
           + ", rates " + ", ".join(f"{r:.2f}" for r in rates) + " (quadrature level 2)")


# fracture -----------------------------------------------------------------

def _patch_system():
    dom = np.array([[0, -0.5], [1, -0.5], [1, 0.5], [0, 0.5]])
    P = build_voronoi(grid_points(12, 12, (0, 1, -0.5, 0.5)), dom)
    mat = isotropic_builder(1.0, 0.3, 0.05, piezo=coupled_material().e, permittivity=1.0)

    def rule(seg):
        y = seg.midpoint[1]
        if y < -0.5 + 1e-9:
            return SegmentBC(u="u", d="R", phi="phi", P="Z")
        if y > 0.5 - 1e-9:
            return SegmentBC(u="Q", data={"Q": PolyField.constant([0.0, 1.0])})
        return SegmentBC()

    system = CrackedSystem(FractureProblem(P, mat, BoundaryConditionSet.uniform(P, rule), order="cubic"))
    line = sorted((s.id for s in P.segments if s.internal and abs(s.midpoint[1] - 1 / 24) < 1e-9),
                  key=lambda i: P.segments[i].midpoint[0])
    return system, line[:10]


def test_criterion_8ab_crack_patching():
    t0 = time.perf_counter()
    system, line = _patch_system()
    n0 = system.n_dof
    same_dofs, worst = True, 0.0
    for sid in line:
        system.apply_crack(sid)
        K, f = system.rebuild()
        same_dofs &= system.n_dof == n0
        worst = max(worst, abs(K - system.K).max() / abs(K).max(),
                    np.abs(f - system.f).max() / max(np.abs(f).max(), 1e-300))
    FRACTURE_SECONDS.append(time.perf_counter() - t0)
    ok_a = same_dofs and len(line) == 10
    line_a = f"DoF count {n0} unchanged over {len(line)} cracks"
    line_b = f"patched vs rebuilt system {worst:.1e}"
    ok_b = worst <= 1e-12
    conftest.ACCEPTANCE_LINES.append(f"{'PASS' if ok_a else 'FAIL'} criterion 8a: {line_a}")
    print(conftest.ACCEPTANCE_LINES[-1], flush=True)
    report("8b", ok_a and ok_b, line_b)


@pytest.fixture(scope="module")
def edge_crack():
    """Single edge crack a/W = 0.3 in a 1 x 3 strip under unit remote tension."""
    t0 = time.perf_counter()
    nx, H, W, a, sig, E, nu = 20, 1.5, 1.0, 0.3, 1.0, 1.0, 0.3
    P = build_voronoi(grid_points(nx, 3 * nx, (0, W, -H, H)), np.array([[0, -H], [W, -H], [W, H], [0, H]]))
    mat = isotropic_builder(E, nu, 0.0, permittivity=1.0)

    def rule(seg):
        y = seg.midpoint[1]
        if y < -H + 1e-9:
            return SegmentBC(u="u", d="R", phi="phi", P="Z")
        if y > H - 1e-9:
            return SegmentBC(u="Q", data={"Q": PolyField.constant([0.0, sig])})
        return SegmentBC()

    bcs = BoundaryConditionSet.uniform(P, rule)
    crack = tuple(s.id for s in P.segments if s.internal and abs(s.midpoint[1]) < 1e-9 and s.midpoint[0] < a)
    system = CrackedSystem(FractureProblem(P, mat, bcs, order="cubic", precracks=crack))
    x, _ = system.solve(1.0)
    cells = cells_within(P, (a, 0.0), 0.2)
    J = compute_j(system.disc, cells, x, (1.0, 0.0), bcs)
    ber = contour_ber(system.disc, cells, x, system.penalties, (1.0, 0.0))
    r = a / W
    K1 = (1.12 - 0.231 * r + 10.55 * r**2 - 21.72 * r**3 + 30.39 * r**4) * sig * np.sqrt(np.pi * a)
    FRACTURE_SECONDS.append(time.perf_counter() - t0)
    return J, ber, K1**2 * (1 - nu**2) / E


def test_criterion_8c_ber_matches_j(edge_crack):
    J, ber, _ = edge_crack
    dev = abs(ber - J) / abs(J)
    report("8c", dev <= 0.15, f"sum of BER {ber:.3f} vs J {J:.3f}, deviation {100 * dev:.0f}%")


def test_criterion_8d_j_matches_handbook(edge_crack):
    J, _, ref = edge_crack
    dev = abs(J - ref) / ref
    report("8d", dev <= 0.20, f"J {J:.3f} vs handbook {ref:.3f}, deviation {100 * dev:.1f}%")


def test_criterion_8e_symmetric_notch():
    t0 = time.perf_counter()
    P = build_voronoi(grid_points(10, 20, (0, 1, -1, 1)), np.array([[0, -1], [1, -1], [1, 1], [0, 1.0]]))
    mat = isotropic_builder(1.0, 0.3, 0.0, permittivity=1.0)

    def rule(seg):
        y = seg.midpoint[1]
        if y < -1 + 1e-9:
            return SegmentBC(u="u", phi="phi", data={"u": PolyField.constant([0.0, -1.0])})
        if y > 1 - 1e-9:
            return SegmentBC(u="u", data={"u": PolyField.constant([0.0, 1.0])})
        return SegmentBC()

    crack = tuple(s.id for s in P.segments if s.internal and abs(s.midpoint[1]) < 1e-9 and s.midpoint[0] < 0.3)
    prob = FractureProblem(P, mat, BoundaryConditionSet.uniform(P, rule), order="cubic", precracks=crack)
    system = CrackedSystem(prob)
    x, _ = system.solve(1.0)
    peak = max(hoop_traction(system.disc, i, x) for i in P.internal_ids if i not in system.disc.cracked)
    hist = quasi_static_run(prob, LoadSchedule((1.0, 1.1, 1.2, 1.3, 1.4)),
                            CrackCriterion("max_hoop_stress", 0.8 * peak, "single-max"))
    new = [i for h in hist for i in h.new_cracks]
    off = [i for i in new if abs(P.segments[i].midpoint[1]) > 1e-9]
    FRACTURE_SECONDS.append(time.perf_counter() - t0)
    report("8e", bool(new) and not off, f"{len(new)} new cracks, {len(off)} off the symmetry line")


def test_criterion_8_total_time():
    total = sum(FRACTURE_SECONDS)
    report("8-time", len(FRACTURE_SECONDS) == 3 and total < 300.0, f"fracture checks took {total:.0f} s")


def test_criterion_9_penalty_bracket():
    part = square_partition(10)
    mat = coupled_material()
    u, phi = linear_fields()
    mu = -mat.a @ np.array([-0.5, 0.2])

    def rule(seg):
        dm = direction_matrices(seg.normal, seg.tangent)
        return SegmentBC(u="u", d="R", phi="phi",
                         data={"u": u, "phi": phi, "R": PolyField.constant(dm.n4 @ dm.n3 @ mu)})

    bcs = BoundaryConditionSet.uniform(part, rule)
    disc = build_discretization(part, mat, "cubic", "reduced", quadrature=2)
    ex = np.concatenate([u(part.points).ravel(), phi(part.points)[:, 0]])
    errs = {}
    for k in (1e-6, 1e-5, 1e-1, 1.0, 10.0, 100.0):
        s = assemble_system(disc, bcs, PenaltyParams.default(mat, internal=k))
        errs[k] = rel_inf(solve_linear(s.K, s.f), ex)
    low_fails = all(errs[k] >= 1e-7 for k in (1e-6, 1e-5))
    band_passes = all(errs[k] < 1e-7 for k in (1e-1, 1.0, 10.0, 100.0))
    report("9", low_fails and band_passes,
           "patch error by internal penalty/E: " + ", ".join(f"{k:g}:{v:.1e}" for k, v in errs.items()))


def test_criterion_10_cli_is_deterministic(tmp_path):
    cfg = ROOT / "configs" / "fracture_regression.yaml"
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        subprocess.run([sys.executable, "-m", "fpmflexo.io_cli", "solve", str(cfg), "-o", str(out)],
                       check=True, capture_output=True)
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0].keys() == outs[1].keys() and all(outs[0][k] == outs[1][k] for k in outs[0])
    report("10", same and bool(outs[0]), f"{len(outs[0])} output files byte-identical across two runs")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
