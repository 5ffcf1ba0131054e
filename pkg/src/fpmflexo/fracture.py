"""Cracks along internal segments, crack criteria, the J-integral and the
quasi-static loading loop for the primal formulation."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assembly_primal import (
    BoundaryConditionSet, PenaltyParams, SideOps, _interface_pairs, assemble_contributions,
    assemble_entity, boundary_operators, build_discretization, cell_rule, direction_matrices,
    entity_cells, fluxes, frozen_electrostatics, segment_rule, sum_contributions, traction,
)
from .errors import CrackError, FPMError, NumericalError
from .geometry import Partition
from .material import MaterialModel
from .solver import SolveOptions, newton_raphson, solve_linear

log = logging.getLogger(__name__)

FACE_KINDS = ("impermeable", "permeable")
CRITERIA = ("max_hoop_stress", "ber")
POLICIES = ("single-max", "all-exceeding")


# ---------------------------------------------------------------------------
# state and settings


@dataclass(frozen=True)
class CrackState:
    """Cracked internal segments and the face condition of each."""

    partition: Partition
    faces: tuple = ()

    @property
    def cracked(self) -> frozenset:
        return frozenset(s for s, _ in self.faces)

    @property
    def impermeable(self) -> frozenset:
        return frozenset(s for s, k in self.faces if k == "impermeable")

    def mech_adjacency(self) -> list:
        return self.partition.adjacency(self.cracked)

    def elec_adjacency(self) -> list:
        return self.partition.adjacency(self.impermeable)

    def with_crack(self, sid: int, kind: str = "impermeable") -> "CrackState":
        if kind not in FACE_KINDS:
            raise CrackError(f"face kind must be one of {FACE_KINDS}, got {kind!r}")
        segs = self.partition.segments
        if not 0 <= sid < len(segs) or not segs[sid].internal:
            raise CrackError(f"segment {sid} is not an internal segment")
        if sid in self.cracked:
            raise CrackError(f"segment {sid} is already cracked")
        return CrackState(self.partition, tuple(sorted(self.faces + ((int(sid), kind),))))


@dataclass(frozen=True)
class CrackCriterion:
    kind: str = "max_hoop_stress"
    threshold: float = 1.0
    policy: str = "single-max"

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise CrackError(f"criterion must be one of {CRITERIA}, got {self.kind!r}")
        if self.policy not in POLICIES:
            raise CrackError(f"step policy must be one of {POLICIES}, got {self.policy!r}")
        if not (np.isfinite(self.threshold) and self.threshold > 0):
            raise CrackError("criterion threshold must be positive")


@dataclass(frozen=True)
class LoadSchedule:
    multipliers: tuple

    def __post_init__(self):
        m = tuple(float(x) for x in self.multipliers)
        if not m:
            raise CrackError("load schedule needs at least one step")
        if not all(np.isfinite(m)):
            raise CrackError("load multipliers must be finite")
        object.__setattr__(self, "multipliers", m)

    @classmethod
    def linear(cls, stop: float, steps: int) -> "LoadSchedule":
        return cls(tuple(stop * k / steps for k in range(1, steps + 1)))


# ---------------------------------------------------------------------------
# segment quantities


def _live_internal(disc, sid: int):
    seg = disc.partition.segments[sid]
    if not seg.internal:
        raise CrackError(f"segment {sid} is not internal")
    if sid in disc.cracked:
        raise CrackError(f"segment {sid} is cracked")
    return seg


def hoop_traction(disc, sid: int, x: np.ndarray, state: np.ndarray | None = None) -> float:
    """Normal traction across an internal segment, averaged over both faces."""
    seg = _live_internal(disc, sid)
    mat = disc.active_material
    pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
    dm = direction_matrices(seg.normal, seg.tangent)
    full = disc.theory == "full"
    t = 0.0
    for cell in (seg.e1, seg.e2):
        ops = SideOps(disc, cell, pts)
        fz = frozen_electrostatics(ops, mat, state) if full else None
        T = traction(ops, fluxes(ops, mat), dm, fz) @ x[ops.dofs]
        t += 0.5 * float(w @ (T @ seg.normal)) / seg.length
    return t


def compute_ber(disc, sid: int, x: np.ndarray, penalties: PenaltyParams, direction=None,
                state: np.ndarray | None = None) -> float:
    """Internal-segment form with the test functions replaced by the derivatives
    of the solution along ``direction`` (default: the segment tangent), negated."""
    seg = _live_internal(disc, sid)
    mech, elec = disc.segment_active(sid)
    d = seg.tangent if direction is None else np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    mat = disc.active_material
    pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
    dm = direction_matrices(seg.normal, seg.tangent)
    L, R = SideOps(disc, seg.e1, pts), SideOps(disc, seg.e2, pts)
    Lt, Rt = SideOps(disc, seg.e1, pts, d), SideOps(disc, seg.e2, pts, d)
    full = disc.theory == "full"
    fz_l = frozen_electrostatics(L, mat, state) if full else None
    fz_r = frozen_electrostatics(R, mat, state) if full else None
    xe = np.concatenate([x[L.dofs], x[R.dofs]])
    trial = _interface_pairs(disc, L, R, dm, seg.h, penalties, mech, elec, mat, fz_l, fz_r)
    test = _interface_pairs(disc, Lt, Rt, dm, seg.h, penalties, mech, elec, mat, fz_l, fz_r)
    return -_bilinear(trial, test, xe, w)


def _bilinear(trial, test, xe: np.ndarray, w: np.ndarray) -> float:
    """Interface form evaluated with trial values ``xe`` under both operator sets."""
    total = 0.0
    for (J, F, W), (Jt, Ft, _) in zip(trial, test):
        j, f, jt, ft = (np.einsum("prn,n->pr", A, xe) for A in (J, F, Jt, Ft))
        form = -(jt * f).sum(1) - (ft * j).sum(1) + (jt * (j @ np.atleast_2d(W).T)).sum(1)
        total += float(w @ form)
    return total


# ---------------------------------------------------------------------------
# J-integral


def _contour_segments(disc, inside: np.ndarray, bcs: BoundaryConditionSet | None):
    """Split the segments touching the region into interior, contour and
    external pieces, rejecting contours the estimate does not cover."""
    interior, contour, external = [], [], []
    for seg in disc.partition.segments:
        if seg.internal:
            a, b = inside[seg.e1], inside[seg.e2]
            if a and b:
                if seg.id not in disc.cracked:
                    interior.append(seg.id)
            elif a or b:
                if seg.id in disc.cracked:
                    raise CrackError(f"contour boundary runs along crack face {seg.id}; "
                                     "enlarge the region so the crack leaves it between two cells")
                contour.append((seg.id, seg.e1 if a else seg.e2))
        elif inside[seg.e1]:
            bc = bcs.for_segment(seg.id) if bcs is not None else None
            if bc is not None and (bc.u == "u" or bc.phi == "phi"):
                raise CrackError(f"contour touches essential boundary segment {seg.id}; the "
                                 "estimate does not cover prescribed displacement or potential")
            external.append(seg.id)
    return interior, contour, external


def _flux_terms(t: dict, B: dict, full: bool) -> np.ndarray:
    """Work of the boundary fluxes ``B`` on the derivative traces ``t``, per point."""
    out = (t["u"] * B["T"]).sum(1) + (t["du_n"] * B["R"]).sum(1) + (t["phi"] * B["Dn"]).sum(1)
    if full:
        out = out + (t["dphi_n"] * B["Z"]).sum(1)
    return out


def _energy_matrix(mat: MaterialModel) -> np.ndarray:
    """Quadratic form of ``[eps, kappa, E, V]`` giving twice the energy density."""
    return np.block([
        [mat.C, np.zeros((3, 6)), -mat.e, -mat.b],
        [np.zeros((6, 3)), mat.Cmk, -mat.a, np.zeros((6, 4))],
        [-mat.e.T, -mat.a.T, -mat.Lam, np.zeros((2, 4))],
        [-mat.b.T, np.zeros((4, 6)), np.zeros((4, 2)), -mat.Phi],
    ])


def _strains(ops) -> np.ndarray:
    return np.concatenate([ops.eps, ops.kappa, ops.E, ops.V], axis=1)


def compute_j(disc, cells, x: np.ndarray, direction=(1.0, 0.0),
              bcs: BoundaryConditionSet | None = None, state: np.ndarray | None = None,
              energy_jumps: bool = True) -> float:
    """Domain form of the J-integral over the union of ``cells``.

    Volume terms use the subdomain rule of the discretization, boundary terms
    the segment rule.  The trial functions are discontinuous, so moving the
    energy flux into the subdomains leaves the jumps of the energy density on
    interior segments; ``energy_jumps=False`` drops them, which is only
    justified where every interior segment is parallel to ``direction``.
    """
    part = disc.partition
    inside = np.zeros(part.n, dtype=bool)
    idx = np.asarray(sorted(set(int(c) for c in cells)), dtype=int)
    if len(idx) == 0:
        raise CrackError("J region is empty")
    inside[idx] = True
    interior, contour, external = _contour_segments(disc, inside, bcs)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    mat = disc.active_material
    full = disc.theory == "full"
    M = _energy_matrix(mat)
    J = 0.0
    for i in idx:
        c = part.cells[i]
        pts, w = cell_rule(c.polygon, part.points[i], c.area, disc.quadrature)
        ops, opt = SideOps(disc, i, pts), SideOps(disc, i, pts, d)
        xi = x[ops.dofs]
        Z, Zt = _strains(ops) @ xi, _strains(opt) @ xi
        J += float(w @ (Zt * (Z @ M.T)).sum(1))
        if full:
            fz = frozen_electrostatics(ops, mat, state)
            if fz is not None:
                Dh, Qh = fz
                s_es = np.einsum("pij,pj->pi", Dh, ops.E @ xi) + np.einsum("pij,pj->pi", Qh, ops.V @ xi)
                J += float(w @ ((opt.epshat @ xi) * s_es).sum(1))

    def traces(ops, dm, xi):
        return {k: v @ xi for k, v in boundary_operators(ops, mat, dm).items()}

    for sid, cell in contour:
        seg = part.segments[sid]
        sign = 1.0 if cell == seg.e1 else -1.0
        dm = direction_matrices(sign * seg.normal, sign * seg.tangent)
        pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
        fl = {}
        for k in (seg.e1, seg.e2):
            ops = SideOps(disc, k, pts)
            fz = frozen_electrostatics(ops, mat, state) if full else None
            B = boundary_operators(ops, mat, dm, fz)
            for name in ("T", "R", "Dn", "Z"):
                fl[name] = fl.get(name, 0.0) + 0.5 * (B[name] @ x[ops.dofs])
        opt = SideOps(disc, cell, pts, d)
        J -= float(w @ _flux_terms(traces(opt, dm, x[opt.dofs]), fl, full))
    if energy_jumps:
        for sid in interior:
            seg = part.segments[sid]
            n1 = float(seg.normal @ d)
            if abs(n1) < 1e-12:
                continue
            pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
            density = []
            for k in (seg.e1, seg.e2):
                ops = SideOps(disc, k, pts)
                Z = _strains(ops) @ x[ops.dofs]
                density.append(0.5 * (Z * (Z @ M.T)).sum(1))
            J -= n1 * float(w @ (density[0] - density[1]))
    for sid in external:
        seg = part.segments[sid]
        bc = bcs.for_segment(sid) if bcs is not None else None
        if bc is None:
            continue
        dm = direction_matrices(seg.normal, seg.tangent)
        pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
        data = {"T": bc.value("Q", pts), "R": bc.value("R", pts),
                "Dn": -bc.value("omega", pts), "Z": bc.value("Z", pts)}
        opt = SideOps(disc, seg.e1, pts, d)
        J -= float(w @ _flux_terms(traces(opt, dm, x[opt.dofs]), data, full))
    return J


def contour_ber(disc, cells, x: np.ndarray, penalties: PenaltyParams, direction=(1.0, 0.0),
                state: np.ndarray | None = None) -> float:
    """Sum of the bonding energy rates of the live segments inside a region."""
    inside = np.zeros(disc.partition.n, dtype=bool)
    inside[list(cells)] = True
    interior, _, _ = _contour_segments(disc, inside, None)
    return sum(compute_ber(disc, s, x, penalties, direction, state) for s in interior)


def cells_within(partition: Partition, center, radius: float) -> list:
    """Subdomains whose host lies within ``radius`` of ``center``."""
    d = np.linalg.norm(partition.points - np.asarray(center, dtype=float), axis=1)
    return [int(i) for i in np.flatnonzero(d <= radius)]


# ---------------------------------------------------------------------------
# primal system kept in step with the cracks


@dataclass
class FractureProblem:
    partition: Partition
    material: MaterialModel
    bcs: BoundaryConditionSet
    order: str = "cubic"
    theory: str = "reduced"
    penalties: PenaltyParams | None = None
    quadrature: int = 1
    face_kind: str = "impermeable"
    direction: tuple = (1.0, 0.0)
    contours: tuple = ()
    precracks: tuple = ()
    options: SolveOptions = SolveOptions()


class CrackedSystem:
    """Global primal system patched incrementally as segments crack.

    ``K`` and ``f`` hold the system for unit load; the per-entity
    contributions are kept so a crack only regenerates the entities whose
    subdomains changed support.
    """

    def __init__(self, problem: FractureProblem):
        self.problem = problem
        self.penalties = problem.penalties or PenaltyParams.default(problem.material)
        self.state = CrackState(problem.partition)
        for sid in problem.precracks:
            self.state = self.state.with_crack(int(sid), problem.face_kind)
        self._cache = {}
        self.disc = self._build()
        self.contribs = assemble_contributions(self.disc, problem.bcs, self.penalties)
        self.K, self.f = sum_contributions(self.contribs.values(), self.disc.n_dof)

    def _build(self):
        p = self.problem
        return build_discretization(p.partition, p.material, p.order, p.theory,
                                    quadrature=p.quadrature, cracked=self.state.cracked,
                                    impermeable=self.state.impermeable, weight_cache=self._cache)

    @property
    def n_dof(self) -> int:
        return self.disc.n_dof

    def rebuild(self) -> tuple:
        """Full reassembly of the current cracked system (reference for the patch)."""
        contribs = assemble_contributions(self.disc, self.problem.bcs, self.penalties)
        return sum_contributions(contribs.values(), self.disc.n_dof)

    def apply_crack(self, sid: int, kind: str | None = None) -> list:
        """Crack a segment and patch ``K`` and ``f``; returns the regenerated entities."""
        kind = kind or self.problem.face_kind
        old = self.disc
        self.state = self.state.with_crack(int(sid), kind)
        self.disc = self._build()
        changed = {i for i in range(old.n)
                   if old.supports_u[i].members != self.disc.supports_u[i].members
                   or old.supports_phi[i].members != self.disc.supports_phi[i].members}
        seg = old.partition.segments[sid]
        changed.update((seg.e1, seg.e2))
        keys = [k for k in self.contribs
                if k == ("internal", sid) or changed.intersection(entity_cells(old, k))]
        removed = [self.contribs[k] for k in keys]
        added = []
        for k in keys:
            c = assemble_entity(self.disc, k, self.problem.bcs, self.penalties)
            self.contribs[k] = c
            added.append(c)
        n = self.disc.n_dof
        Kn, fn = sum_contributions(added, n)
        Ko, fo = sum_contributions(removed, n)
        self.K = (self.K + Kn - Ko).tocsr()
        self.K.eliminate_zeros()
        self.f = self.f + fn - fo
        log.info("cracked segment %d (%s): %d entities regenerated", sid, kind, len(keys))
        return keys

    def solve(self, load: float, x0: np.ndarray | None = None) -> tuple:
        """Solution at a load multiplier; returns ``(x, state)``."""
        p = self.problem
        if p.theory == "reduced":
            x = solve_linear(self.K, load * self.f, p.options)
            return x, None
        bcs = p.bcs.scaled(load)

        def assemble(xs):
            contribs = assemble_contributions(self.disc, bcs, self.penalties, xs)
            return sum_contributions(contribs.values(), self.disc.n_dof)

        start = np.zeros(self.n_dof) if x0 is None else x0
        st = newton_raphson(assemble, start, p.options)
        return st.x, st.x


# ---------------------------------------------------------------------------
# quasi-static loop


@dataclass
class StepRecord:
    step: int
    load: float
    new_cracks: list
    cracked: frozenset
    max_traction: float
    max_ber: float
    j: tuple
    x: np.ndarray = field(repr=False)
    crack_values: dict = field(default_factory=dict)


class FractureAborted(NumericalError):
    """Raised when a step fails; ``history`` holds the completed steps."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


def _segment_scores(system: CrackedSystem, x, state, workers: int = 1) -> tuple:
    disc = system.disc
    live = [s for s in disc.partition.internal_ids if s not in disc.cracked]

    def score(s):
        return hoop_traction(disc, s, x, state), compute_ber(disc, s, x, system.penalties, None, state)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(score, live))
    else:
        values = [score(s) for s in live]
    trac = {s: v[0] for s, v in zip(live, values)}
    ber = {s: v[1] for s, v in zip(live, values)}
    return live, trac, ber


def _select(criterion: CrackCriterion, scores: dict) -> list:
    over = [s for s, v in scores.items() if v > criterion.threshold]
    if not over:
        return []
    if criterion.policy == "all-exceeding":
        return sorted(over)
    # ties resolved by the lowest segment id
    return [min(over, key=lambda s: (-scores[s], s))]


def quasi_static_run(problem: FractureProblem, schedule: LoadSchedule,
                     criterion: CrackCriterion, workers: int = 1) -> list:
    """Solve, crack, re-solve until no segment qualifies, then advance the load.

    ``workers`` threads evaluate the criterion; cracking stays serial.
    """
    system = CrackedSystem(problem)
    history = []
    x = None
    cap = len(problem.partition.internal_ids)
    for step, load in enumerate(schedule.multipliers, start=1):
        new, values = [], {}
        try:
            for _ in range(cap + 1):
                x, state = system.solve(load, x)
                live, trac, ber = _segment_scores(system, x, state, workers)
                scores = trac if criterion.kind == "max_hoop_stress" else ber
                chosen = _select(criterion, scores)
                if not chosen:
                    break
                for s in chosen:
                    values[s] = (trac[s], ber[s])
                    system.apply_crack(s)
                    new.append(s)
        except FPMError as exc:
            raise FractureAborted(f"step {step} (load {load:g}) failed: {exc}", history) from exc
        disc = system.disc
        js = tuple(compute_j(disc, c, x, problem.direction, problem.bcs.scaled(load), state)
                   for c in problem.contours)
        history.append(StepRecord(
            step, load, new, system.state.cracked,
            max(trac.values(), default=0.0), max(ber.values(), default=0.0), js, x.copy(), values,
        ))
        log.info("step %d load %g: %d new cracks", step, load, len(new))
    return history


__all__ = [
    "CRITERIA", "FACE_KINDS", "POLICIES", "CrackCriterion", "CrackState", "CrackedSystem",
    "FractureAborted", "FractureProblem", "LoadSchedule", "StepRecord", "cells_within",
    "compute_ber", "compute_j", "contour_ber", "hoop_traction", "quasi_static_run",
]
