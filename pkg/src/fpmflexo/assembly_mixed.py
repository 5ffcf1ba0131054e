"""Mixed assembly with independent higher-order stress and its electric analogue.

Displacement, potential, higher-order stress ``mu`` and (full theory) ``Q``
share one linear shape per subdomain.  The relations ``mu = Cmk kappa - a E``
and ``Q = Phi V + b^T eps`` are imposed weakly; the second gradients of ``u``
and ``phi`` enter through lifted numerical traces:

    int_E w . kappa(u) = - int_E (C9 w_1 + C10 w_2) . eps_hat(u)
                         + int_dE (n3 w) . grad_u*  - int_dE (u* - u) . div(w) n

with ``u* = {u}`` and ``grad_u* = {eps_hat}`` on internal segments and the
prescribed or own traces on the boundary.  Prescribed ``R`` and ``Z`` are
enforced by multipliers that are constant on each boundary segment.

With one integration point at the host the ``mu`` and ``Q`` blocks are block
diagonal per point, so they are eliminated point by point together with the
multipliers (``condense``), leaving three unknowns per point.

Saddle vector ordering: ``[u (2N), phi (N), mu (6N), Q (4N), lam_R, lam_Z]``
(``Q`` and ``lam_Z`` only in the full theory).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .assembly_primal import (
    C5, C6, C9, C10, THEORIES, BoundaryConditionSet, Contribution, PenaltyParams,
    _gram, _pair, _rhs, direction_matrices, disc_corners, sum_contributions,
)
from .dq import gfd_weights
from .errors import AssemblyError, MaterialError
from .geometry import Partition, SupportPolicy, compute_supports
from .material import MaterialModel, electrostatic_matrices
from .shape import field_operators, mixed_shape
from .solver import SolutionState, SolveOptions, newton_raphson, solve_linear

MIXED_POLICY = SupportPolicy(interior_rings=1, boundary_rings=2, min_m=2)


@dataclass(frozen=True)
class Coefficients:
    """Inverse compliances used by the weak constitutive rows."""

    Cinv: np.ndarray
    Pinv: np.ndarray


@dataclass
class MixedDiscretization:
    partition: Partition
    material: MaterialModel
    theory: str
    supports: list
    shapes: list
    degenerate_mu: bool = False
    degenerate_Q: bool = False

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def full(self) -> bool:
        return self.theory == "full"

    @property
    def n_x(self) -> int:
        return 3 * self.n

    @property
    def n_high(self) -> int:
        """Size of ``[u, phi, mu, Q]``."""
        return (13 if self.full else 9) * self.n

    @property
    def active_material(self) -> MaterialModel:
        if self.full:
            return self.material
        m = self.material
        return MaterialModel(m.C, m.Cmk, m.Lam, None, m.a, None, m.e, m.eps0, m.young)

    def slices(self) -> dict:
        N = self.n
        out = {"u": slice(0, 2 * N), "phi": slice(2 * N, 3 * N), "mu": slice(3 * N, 9 * N)}
        if self.full:
            out["Q"] = slice(9 * N, 13 * N)
        return out

    def cell_dofs(self, i: int) -> np.ndarray:
        N = self.n
        mem = np.asarray(self.shapes[i].members)
        parts = [np.column_stack([2 * mem, 2 * mem + 1]).ravel(), 2 * N + mem,
                 (3 * N + 6 * mem[:, None] + np.arange(6)).ravel()]
        if self.full:
            parts.append((9 * N + 4 * mem[:, None] + np.arange(4)).ravel())
        return np.concatenate(parts)

    def coefficients(self, mu_unit: bool = False, q_unit: bool = False) -> Coefficients:
        """Inverse compliances; a degenerate family contributes zero unless
        its unit coefficient is requested."""
        m = self.material
        if self.degenerate_mu:
            Cinv = np.eye(6) if mu_unit else np.zeros((6, 6))
        else:
            Cinv = np.linalg.inv(m.Cmk)
        if not self.full:
            Pinv = np.zeros((4, 4))
        elif self.degenerate_Q:
            Pinv = np.eye(4) if q_unit else np.zeros((4, 4))
        else:
            Pinv = np.linalg.inv(m.Phi)
        return Coefficients(Cinv, Pinv)


def _check_invertible(M: np.ndarray, name: str) -> bool:
    """True if ``M`` is zero (degenerate), raises if singular otherwise."""
    scale = np.abs(M).max()
    if scale == 0.0:
        return True
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise MaterialError(f"{name} is singular but not zero; the mixed form needs it invertible")
    return False


def build_mixed_discretization(partition: Partition, material: MaterialModel,
                               theory: str = "reduced", *, degenerate_mu: bool = False,
                               degenerate_Q: bool = False, centroids: bool = True,
                               policy: SupportPolicy | None = None) -> MixedDiscretization:
    """Linear shapes from least-squares gradients over small supports.

    Hosts are moved to the cell centroids unless ``centroids`` is False.  A
    zero ``Cmk`` (or ``Phi`` in the full theory) needs the matching
    ``degenerate_*`` flag, in which case the constitutive row is replaced by
    ``mu = -a E`` (``Q = b^T eps``) imposed weakly.
    """
    if theory not in THEORIES:
        raise AssemblyError(f"theory must be one of {THEORIES}, got {theory!r}")
    zero_mu = _check_invertible(material.Cmk, "Cmk")
    if zero_mu != degenerate_mu:
        raise MaterialError("Cmk is zero: use degenerate_mu=True" if zero_mu
                            else "degenerate_mu=True needs Cmk = 0")
    if theory == "full":
        zero_q = _check_invertible(material.Phi, "Phi")
        if zero_q != degenerate_Q:
            raise MaterialError("Phi is zero: use degenerate_Q=True" if zero_q
                                else "degenerate_Q=True needs Phi = 0")
    elif degenerate_Q:
        raise AssemblyError("degenerate_Q only applies to the full theory")
    part = partition
    if centroids and not np.allclose(part.points, part.centroids, rtol=0,
                                     atol=1e-12 * part.diameter):
        part = part.with_hosts_at_centroids()
    supports = compute_supports(part, policy or MIXED_POLICY, part.adjacency(), part.boundary_cells())
    shapes = []
    for i, s in enumerate(supports):
        gw = gfd_weights(part.points[list(s.members)], owner=i)
        shapes.append(mixed_shape(s.members, gw, part.points[i]))
    return MixedDiscretization(part, material, theory, supports, shapes, degenerate_mu, degenerate_Q)


# ---------------------------------------------------------------------------
# operators


class MixedOps:
    """Field operators of one subdomain at points, on its local dofs plus
    ``extra`` trailing columns (multipliers)."""

    def __init__(self, disc: MixedDiscretization, cell: int, pts, extra: int = 0):
        shape = disc.shapes[cell]
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        m = shape.size
        fo = field_operators(shape, pts)
        self.npts = len(pts)
        nu, nm, nq = 2 * m, 6 * m, (4 * m if disc.full else 0)
        self.n_cell = nu + m + nm + nq
        self.n = self.n_cell + extra
        self.dofs = disc.cell_dofs(cell)

        def place(a, start):
            out = np.zeros(a.shape[:2] + (self.n,))
            out[:, :, start:start + a.shape[2]] = a
            return out

        self.u, self.eps, self.epshat = (place(getattr(fo, k), 0) for k in ("u", "eps", "epshat"))
        self.phi, self.E = place(fo.phi, nu), place(fo.E, nu)
        N = {pq: shape.derivative_rows(pts, *pq) for pq in ((0, 0), (1, 0), (0, 1))}

        def kron(rows, k):
            return np.einsum("pj,kl->pkjl", rows, np.eye(k)).reshape(len(pts), k, k * m)

        o = nu + m
        self.mu, self.mu1, self.mu2 = (place(kron(N[pq], 6), o) for pq in ((0, 0), (1, 0), (0, 1)))
        if disc.full:
            o += nm
            self.Q, self.Q1, self.Q2 = (place(kron(N[pq], 4), o) for pq in ((0, 0), (1, 0), (0, 1)))
        else:
            z = np.zeros((self.npts, 4, self.n))
            self.Q = self.Q1 = self.Q2 = z

    def extra(self, rows: int, start: int) -> np.ndarray:
        """Identity on trailing columns ``start .. start + rows`` at every point."""
        out = np.zeros((self.npts, rows, self.n))
        out[:, :, self.n_cell + start:self.n_cell + start + rows] = np.eye(rows)
        return out


@dataclass
class MixedFluxes:
    sigma: np.ndarray
    D: np.ndarray
    V: np.ndarray


def mixed_fluxes(ops: MixedOps, mat: MaterialModel, coef: Coefficients) -> MixedFluxes:
    """Stress, electric displacement and field gradient in terms of the mixed fields."""
    Ci, Pi = coef.Cinv, coef.Pinv
    b = mat.b
    mm = np.matmul
    V = mm(Pi, ops.Q) - mm(Pi @ b.T, ops.eps)
    return MixedFluxes(
        sigma=mm(mat.C + b @ Pi @ b.T, ops.eps) - mm(mat.e, ops.E) - mm(b @ Pi, ops.Q),
        D=mm(mat.Lam + mat.a.T @ Ci @ mat.a, ops.E) + mm(mat.e.T, ops.eps) + mm(mat.a.T @ Ci, ops.mu),
        V=V,
    )


def _frozen(ops: MixedOps, mat: MaterialModel, coef: Coefficients, state):
    if state is None:
        return None
    x = np.zeros(ops.n)
    x[: ops.n_cell] = state[ops.dofs]
    if not np.any(x):
        return None
    fl = mixed_fluxes(ops, mat, coef)
    Dh, Qh = electrostatic_matrices(fl.D @ x, ops.Q @ x)
    return Dh, Qh, fl.V


def _traction(ops, fl, dm, frozen):
    T = np.matmul(dm.n1, fl.sigma)
    if frozen is not None:
        Dh, Qh, V = frozen
        T = T + np.matmul(dm.n4, np.matmul(Dh, ops.E) + np.matmul(Qh, V))
    return T


def _sym(G: np.ndarray) -> np.ndarray:
    return G + G.T


def _trace_ops(ops: MixedOps, dm) -> dict:
    """Boundary trace operators of the mixed fields."""
    mm = np.matmul
    n3mu = mm(dm.n3, ops.mu)
    n6Q = mm(dm.n6, ops.Q)
    return {
        "X": mm(dm.n21, ops.mu1) + mm(dm.n22, ops.mu2),
        "Y": mm(dm.n51, ops.Q1) + mm(dm.n52, ops.Q2),
        "n3mu": n3mu,
        "n6Q": n6Q,
        "P_s": mm(dm.s4, n3mu),
        "R": mm(dm.n4, n3mu),
        "W_s": mm(dm.s[None], n6Q),
        "Z": mm(dm.n[None], n6Q),
        "du_s": mm(dm.s4, ops.epshat),
        "du_n": mm(dm.n4, ops.epshat),
        "dphi_s": mm(dm.s[None], -ops.E),
        "dphi_n": mm(dm.n[None], -ops.E),
    }


# ---------------------------------------------------------------------------
# multipliers and blocks


@dataclass(frozen=True)
class LagrangeDofs:
    """Segments carrying ``lam_R`` (two each) and ``lam_Z`` (one each)."""

    R: tuple
    Z: tuple
    offset: int

    @property
    def count(self) -> int:
        return 2 * len(self.R) + len(self.Z)

    def r_dofs(self, sid: int) -> np.ndarray:
        k = self.R.index(sid)
        return self.offset + 2 * k + np.arange(2)

    def z_dof(self, sid: int) -> np.ndarray:
        k = self.Z.index(sid)
        return self.offset + 2 * len(self.R) + np.array([k])


def lagrange_dofs(disc: MixedDiscretization, bcs: BoundaryConditionSet) -> LagrangeDofs:
    R, Z = [], []
    for sid in disc.partition.external_ids:
        bc = bcs.for_segment(sid)
        if bc.d == "R" and not disc.degenerate_mu:
            R.append(sid)
        if disc.full and bc.P == "Z" and not disc.degenerate_Q:
            Z.append(sid)
    return LagrangeDofs(tuple(R), tuple(Z), disc.n_high)


@dataclass
class MixedBlocks:
    """Saddle system and its named blocks (``block("u", "mu")`` is K_uμ)."""

    K: sp.csr_matrix
    f: np.ndarray
    slices: dict
    lagrange: LagrangeDofs
    kappa_rows: tuple | None = field(default=None, repr=False)

    def block(self, row: str, col: str) -> sp.csr_matrix:
        return self.K[self.slices[row], :][:, self.slices[col]].tocsr()

    def rhs(self, name: str) -> np.ndarray:
        return self.f[self.slices[name]]

    @property
    def n_total(self) -> int:
        return self.K.shape[0]


def _block_slices(disc: MixedDiscretization, lag: LagrangeDofs) -> dict:
    s = disc.slices()
    o = lag.offset
    s["x"] = slice(0, disc.n_x)
    s["R"] = slice(o, o + 2 * len(lag.R))
    s["Z"] = slice(o + 2 * len(lag.R), o + lag.count)
    return s


# ---------------------------------------------------------------------------
# local contributions


def _cell_matrix(mat: MaterialModel, coef: Coefficients, full: bool) -> np.ndarray:
    Ci, Pi = coef.Cinv, coef.Pinv
    a, b, e = mat.a, mat.b, mat.e
    z = np.zeros
    M = np.block([
        [mat.C + b @ Pi @ b.T, -e, z((3, 6)), -b @ Pi],
        [-e.T, -(mat.Lam + a.T @ Ci @ a), -a.T @ Ci, z((2, 4))],
        [z((6, 3)), -Ci @ a, -Ci, z((6, 4))],
        [-Pi @ b.T, z((4, 2)), z((4, 6)), Pi],
    ])
    return M if full else M[:11, :11]


def mixed_volume(disc: MixedDiscretization, cell: int, bcs, coef: Coefficients,
                 state=None, state_coef: Coefficients | None = None) -> Contribution:
    part = disc.partition
    c = part.cells[cell]
    mat = disc.active_material
    pts, w = part.points[cell][None], np.array([c.area])
    ops = MixedOps(disc, cell, pts)
    parts = [ops.eps, ops.E, ops.mu] + ([ops.Q] if disc.full else [])
    Zop = np.concatenate(parts, axis=1)
    K = _gram(w, Zop, np.matmul(_cell_matrix(mat, coef, disc.full), Zop))
    K -= _sym(_gram(w, np.matmul(C9, ops.mu1) + np.matmul(C10, ops.mu2), ops.epshat))
    if disc.full:
        K += _sym(_gram(w, np.matmul(C5, ops.Q1) + np.matmul(C6, ops.Q2), ops.E))
    f = np.zeros(ops.n)
    if bcs is not None and bcs.body_force is not None:
        f += _rhs(w, ops.u, bcs.body_force(pts))
    if bcs is not None and bcs.charge is not None:
        f -= _rhs(w, ops.phi, bcs.charge(pts))
    if disc.full:
        fz = _frozen(ops, mat, state_coef or coef, state)
        if fz is not None:
            Dh, Qh, V = fz
            x = state[ops.dofs]  # no trailing columns on a volume
            s_es = np.einsum("pij,pj->pi", Dh, ops.E @ x) + np.einsum("pij,pj->pi", Qh, V @ x)
            f -= _rhs(w, ops.epshat, s_es)
    return Contribution(ops.dofs, K, f)


def mixed_internal(disc: MixedDiscretization, sid: int, penalties: PenaltyParams,
                   coef: Coefficients, state=None, state_coef=None) -> Contribution:
    seg = disc.partition.segments[sid]
    mat = disc.active_material
    pts, w = seg.midpoint[None], np.array([seg.length])
    L = MixedOps(disc, seg.e1, pts)
    R = MixedOps(disc, seg.e2, pts)
    dm = direction_matrices(seg.normal, seg.tangent)
    fl, fr = mixed_fluxes(L, mat, coef), mixed_fluxes(R, mat, coef)
    sc = state_coef or coef
    fz_l = _frozen(L, mat, sc, state) if disc.full else None
    fz_r = _frozen(R, mat, sc, state) if disc.full else None
    tl, tr = _trace_ops(L, dm), _trace_ops(R, dm)

    def jump(a, b):
        return np.concatenate([a, -b], axis=2)

    def avg(a, b):
        return np.concatenate([0.5 * a, 0.5 * b], axis=2)

    h = seg.h
    K = _pair(w, jump(L.u, R.u), avg(_traction(L, fl, dm, fz_l), _traction(R, fr, dm, fz_r)),
              penalties.eta2[0] / h * np.eye(2))
    K += _sym(_gram(w, avg(tl["X"], tr["X"]), jump(L.u, R.u))
              + _gram(w, jump(tl["n3mu"], tr["n3mu"]), avg(L.epshat, R.epshat)))
    nd = dm.n[None]
    K += _pair(w, jump(L.phi, R.phi), avg(np.matmul(nd, fl.D), np.matmul(nd, fr.D)),
               -penalties.eta2[2] / h * np.eye(1))
    if disc.full:
        K += _sym(_gram(w, avg(tl["Y"], tr["Y"]), jump(L.phi, R.phi))
                  - _gram(w, jump(tl["n6Q"], tr["n6Q"]), avg(L.E, R.E)))
    return Contribution(np.concatenate([L.dofs, R.dofs]), K, np.zeros(L.n + R.n))


def mixed_external(disc: MixedDiscretization, sid: int, bc, penalties: PenaltyParams,
                   coef: Coefficients, lag: LagrangeDofs, state=None,
                   state_coef=None) -> Contribution:
    seg = disc.partition.segments[sid]
    mat = disc.active_material
    pts, w = seg.midpoint[None], np.array([seg.length])
    has_r, has_z = sid in lag.R, sid in lag.Z
    extra = 2 * has_r + has_z
    ops = MixedOps(disc, seg.e1, pts, extra)
    dm = direction_matrices(seg.normal, seg.tangent)
    fl = mixed_fluxes(ops, mat, coef)
    fz = _frozen(ops, mat, state_coef or coef, state) if disc.full else None
    t = _trace_ops(ops, dm)
    h = seg.h
    e1 = penalties.eta1
    K = np.zeros((ops.n, ops.n))
    f = np.zeros(ops.n)

    def nitsche(J, F, W, data):
        nonlocal K, f
        K += _pair(w, J, F, W)
        f += -_rhs(w, F, data) + _rhs(w, np.matmul(W, J), data)

    def couple(A, B):
        nonlocal K
        K += _sym(_gram(w, A, B))

    if bc.u == "u":
        ut = bc.value("u", pts)
        nitsche(ops.u, _traction(ops, fl, dm, fz), e1[0] / h * np.eye(2), ut)
        couple(t["X"], ops.u)
        f += _rhs(w, t["X"], ut)
        f -= _rhs(w, t["P_s"], bc.tangential("u", pts, dm.s))
    else:
        f += _rhs(w, ops.u, bc.value("Q", pts))
        couple(t["P_s"], t["du_s"])
    if bc.d == "d":
        f -= _rhs(w, t["R"], bc.value("d", pts))
    elif not disc.degenerate_mu:
        couple(t["R"], t["du_n"])
        Rt = bc.value("R", pts)
        f += _rhs(w, t["du_n"], Rt)
        lam = ops.extra(2, 0)
        couple(t["R"], lam)
        f += _rhs(w, lam, Rt)
    if bc.phi == "phi":
        pt = bc.value("phi", pts)
        nitsche(ops.phi, np.matmul(dm.n[None], fl.D), -e1[2] / h * np.eye(1), pt)
        if disc.full:
            couple(t["Y"], ops.phi)
            f += _rhs(w, t["Y"], pt)
            f -= _rhs(w, t["W_s"], bc.tangential("phi", pts, dm.s))
    else:
        f -= _rhs(w, ops.phi, bc.value("omega", pts))
        if disc.full:
            couple(t["W_s"], t["dphi_s"])
    if disc.full:
        if bc.P == "P":
            f -= _rhs(w, t["Z"], bc.value("P", pts))
        elif not disc.degenerate_Q:
            couple(t["Z"], t["dphi_n"])
            Zt = bc.value("Z", pts)
            f += _rhs(w, t["dphi_n"], Zt)
            lam = ops.extra(1, 2 * has_r)
            couple(t["Z"], lam)
            f += _rhs(w, lam, Zt)
    dofs = [ops.dofs]
    if has_r:
        dofs.append(lag.r_dofs(sid))
    if has_z:
        dofs.append(lag.z_dof(sid))
    return Contribution(np.concatenate(dofs), K, f)


def mixed_corner(disc: MixedDiscretization, corner, bcs: BoundaryConditionSet,
                 coef: Coefficients) -> Contribution | None:
    """Vertex terms from the tangential trace of ``u`` (and ``phi``) along
    natural boundary segments."""
    part = disc.partition
    sa, sb = part.segments[corner.incoming], part.segments[corner.outgoing]
    bca, bcb = bcs.for_segment(sa.id), bcs.for_segment(sb.id)
    families = [("u", "Q", "u", "P_s", "Ps")]
    if disc.full:
        families.append(("phi", "omega", "phi", "W_s", "Ws"))
    active = [fam for fam in families
              if getattr(bca, fam[0]) == fam[1] or getattr(bcb, fam[0]) == fam[1]]
    if not active:
        return None
    x = np.asarray(corner.vertex, dtype=float)[None]
    A = MixedOps(disc, sa.e1, x)
    B = MixedOps(disc, sb.e1, x)
    ta = _trace_ops(A, direction_matrices(sa.normal, sa.tangent))
    tb = _trace_ops(B, direction_matrices(sb.normal, sb.tangent))
    n = A.n + B.n
    K = np.zeros((n, n))
    f = np.zeros(n)
    one = np.ones(1)

    def left(a):
        return np.concatenate([a, np.zeros(a.shape[:2] + (B.n,))], axis=2)

    def right(b):
        return np.concatenate([np.zeros(b.shape[:2] + (A.n,)), b], axis=2)

    for fam, natural, val, flux, extra in active:
        va, vb = left(getattr(A, val)), right(getattr(B, val))
        Pa, Pb = left(ta[flux]), right(tb[flux])
        nat_a = getattr(bca, fam) == natural
        nat_b = getattr(bcb, fam) == natural
        if nat_a and nat_b:
            K += _pair(one, va - vb, 0.5 * (Pa + Pb))
            f += _rhs(one, 0.5 * (va + vb), bca.value(extra, x) - bcb.value(extra, x))
        elif nat_b:
            K -= _pair(one, vb, Pb)
            f += _rhs(one, Pb, bca.value(val, x))
        else:
            K += _pair(one, va, Pa)
            f -= _rhs(one, Pa, bcb.value(val, x))
    return Contribution(np.concatenate([A.dofs, B.dofs]), K, f)


# ---------------------------------------------------------------------------
# global saddle system


def mixed_entity_keys(disc: MixedDiscretization) -> list:
    part = disc.partition
    keys = [("volume", i) for i in range(part.n)]
    keys += [("internal", s) for s in part.internal_ids]
    keys += [("external", s) for s in part.external_ids]
    keys += [("corner", k) for k in range(len(disc_corners(disc)))]
    return keys


def _assemble(disc, bcs, penalties, coef, lag, state, state_coef) -> tuple:
    contribs = []
    corners = disc_corners(disc)
    for kind, k in mixed_entity_keys(disc):
        if kind == "volume":
            contribs.append(mixed_volume(disc, k, bcs, coef, state, state_coef))
        elif kind == "internal":
            contribs.append(mixed_internal(disc, k, penalties, coef, state, state_coef))
        elif kind == "external":
            contribs.append(mixed_external(disc, k, bcs.for_segment(k), penalties, coef, lag,
                                           state, state_coef))
        else:
            contribs.append(mixed_corner(disc, corners[k], bcs, coef))
    return sum_contributions(contribs, disc.n_high + lag.count)


def _replace_rows(K, f, K2, f2, rows: slice):
    """Rows ``rows`` of (K, f) taken from (K2, f2)."""
    n = K.shape[0]
    mask = np.zeros(n)
    mask[rows] = 1.0
    D = sp.diags(mask)
    I = sp.diags(1.0 - mask)
    return (I @ K + D @ K2).tocsr(), np.where(mask > 0, f2, f)


def assemble_mixed_blocks(disc: MixedDiscretization, bcs: BoundaryConditionSet,
                          penalties: PenaltyParams | None = None, state=None) -> MixedBlocks:
    """Saddle system for ``[u, phi, mu, Q, lam_R, lam_Z]``.

    ``state`` is a full saddle vector (full theory only); its electric
    displacement and ``Q`` are frozen in the electrostatic stress.  For a
    degenerate family the constitutive rows are the coefficient of the
    inverse compliance and the inverse is dropped from every other row.
    """
    penalties = penalties or PenaltyParams.default(disc.material)
    lag = lagrange_dofs(disc, bcs)
    if disc.full and state is not None and len(state) < disc.n_high:
        raise AssemblyError(f"state must hold the {disc.n_high} mixed unknowns, got {len(state)}")
    base = disc.coefficients()
    K, f = _assemble(disc, bcs, penalties, base, lag, state, base)
    sl = _block_slices(disc, lag)
    kappa_rows = None
    if disc.degenerate_mu:
        K1, f1 = _assemble(disc, bcs, penalties, disc.coefficients(mu_unit=True), lag, state, base)
        rows = sl["mu"]
        kappa_rows = (K[rows, :].tocsr(), f[rows].copy())
        K, f = _replace_rows(K, f, K1 - K, f1 - f, rows)
    if disc.degenerate_Q:
        K1, f1 = _assemble(disc, bcs, penalties, disc.coefficients(q_unit=True), lag, state, base)
        K, f = _replace_rows(K, f, K1 - K, f1 - f, sl["Q"])
    K.eliminate_zeros()
    return MixedBlocks(K, f, sl, lag, kappa_rows)


# ---------------------------------------------------------------------------
# point-level elimination


@dataclass
class CondensationData:
    """``high = -G K_hx x + g`` for each eliminated family ``h``."""

    G: dict
    g: dict
    K_hx: dict
    multiplier_solve: dict
    exterior: np.ndarray


def _block_inverse(A: sp.csr_matrix, k: int, name: str) -> sp.csr_matrix:
    n = A.shape[0] // k
    coo = A.tocoo()
    if np.any(coo.row // k != coo.col // k):
        raise AssemblyError(f"K_{name}{name} is not block diagonal per point; use one host "
                            "integration point")
    blocks = np.zeros((n, k, k))
    np.add.at(blocks, (coo.row // k, coo.row % k, coo.col % k), coo.data)
    try:
        inv = np.linalg.inv(blocks)
    except np.linalg.LinAlgError as exc:
        raise AssemblyError(f"a point block of K_{name}{name} is singular") from exc
    return sp.block_diag(list(inv), format="csr")


def _sparse_inverse(S: sp.csr_matrix) -> sp.csr_matrix:
    """Inverse of a matrix that decouples into small connected blocks."""
    n = S.shape[0]
    if n == 0:
        return sp.csr_matrix((0, 0))
    ncomp, labels = connected_components(abs(S) + sp.eye(n), directed=False)
    rows, cols, vals = [], [], []
    Sd = S.tolil()
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        sub = Sd[idx, :][:, idx].toarray()
        s = np.linalg.svd(sub, compute_uv=False)
        if s[-1] <= 1e-13 * max(s[0], 1e-300):
            raise AssemblyError("multiplier Schur complement is singular; check the segments "
                                "carrying R or Z conditions")
        inv = np.linalg.inv(sub)
        rows.append(np.repeat(idx, len(idx)))
        cols.append(np.tile(idx, len(idx)))
        vals.append(inv.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def _exterior_points(disc: MixedDiscretization) -> np.ndarray:
    mask = np.zeros(disc.n, dtype=bool)
    for i in disc.partition.boundary_cells():
        mask[list(disc.shapes[i].members)] = True
    return mask


def condense(blocks: MixedBlocks, disc: MixedDiscretization) -> tuple:
    """Eliminate ``mu``, ``Q`` and the multipliers.

    Returns ``(K_bar, f_bar, CondensationData)`` where ``K_bar`` acts on
    ``[u, phi]``.
    """
    sl = blocks.slices
    K, f = blocks.K, blocks.f
    x = sl["x"]
    Kbar = K[x, :][:, x].tocsr()
    fbar = f[x].copy()
    G, g, Khx, msolve = {}, {}, {}, {}
    for name, k, lam in (("mu", 6, "R"), ("Q", 4, "Z")):
        if name not in sl:
            continue
        h = sl[name]
        Ainv = _block_inverse(K[h, :][:, h].tocsr(), k, name)
        B = K[h, :][:, sl[lam]].tocsr()
        K_hx = K[h, :][:, x].tocsr()
        K_xh = K[x, :][:, h].tocsr()
        fh = f[h]
        if B.shape[1]:
            Y = (Ainv @ B).tocsr()
            S = (B.T @ Ainv @ B).tocsr()
            Sinv = _sparse_inverse(S)
            Gh = (Ainv - Y @ Sinv @ Y.T).tocsr()
            gh = Gh @ fh + Y @ (Sinv @ f[sl[lam]])
            msolve[name] = (Y, Sinv, f[sl[lam]])
        else:
            Gh = Ainv
            gh = Ainv @ fh
        Kbar = (Kbar - K_xh @ Gh @ K_hx).tocsr()
        fbar = fbar - K_xh @ gh
        G[name], g[name], Khx[name] = Gh, gh, K_hx
    Kbar.eliminate_zeros()
    return Kbar, fbar, CondensationData(G, g, Khx, msolve, _exterior_points(disc))


def recover_high_order(data: CondensationData, blocks: MixedBlocks, x: np.ndarray) -> dict:
    """``mu``, ``Q`` and the multipliers from the condensed solution ``x = [u, phi]``."""
    out = {}
    for name, lam in (("mu", "R"), ("Q", "Z")):
        if name not in data.G:
            continue
        Kx = data.K_hx[name] @ x
        out[name] = -(data.G[name] @ Kx) + data.g[name]
        if name in data.multiplier_solve:
            Y, Sinv, fl = data.multiplier_solve[name]
            out["lam_" + lam] = Sinv @ (Y.T @ (blocks.rhs(name) - Kx) - fl)
        else:
            out["lam_" + lam] = np.zeros(0)
    return out


def full_vector(disc: MixedDiscretization, blocks: MixedBlocks, x, high: dict) -> np.ndarray:
    """Saddle vector assembled from ``x`` and recovered high-order unknowns."""
    out = np.zeros(blocks.n_total)
    out[: disc.n_x] = x
    for name in ("mu", "Q"):
        if name in high:
            out[blocks.slices[name]] = high[name]
    out[blocks.slices["R"]] = high.get("lam_R", np.zeros(0))
    out[blocks.slices["Z"]] = high.get("lam_Z", np.zeros(0))
    return out


def postprocess_kappa(disc: MixedDiscretization, blocks: MixedBlocks, x: np.ndarray) -> np.ndarray:
    """Strain gradient per point, ``(N, 6)``, for a zero ``Cmk``.

    The weak statement ``int w . kappa = (lifted second gradient of u)`` is
    tested with the sum of the shape functions of each support.  Single
    shape functions give zero-mean oscillations of order one on irregular
    partitions, because the traces of the piecewise constant strain are
    constant along each segment; the support sum removes them.
    """
    if blocks.kappa_rows is None:
        raise AssemblyError("kappa post-processing applies to the degenerate (Cmk = 0) path")
    Kr, fr = blocks.kappa_rows
    xx = np.zeros(blocks.n_total)
    xx[: disc.n_x] = x
    r = (Kr @ xx - fr).reshape(-1, 6)
    areas = disc.partition.areas
    out = np.empty_like(r)
    for i, shape in enumerate(disc.shapes):
        mem = list(shape.members)
        out[i] = r[mem].sum(axis=0) / areas[mem].sum()
    return out


# ---------------------------------------------------------------------------
# drivers


@dataclass
class MixedSolution:
    state: SolutionState
    saddle: np.ndarray
    high: dict
    blocks: MixedBlocks
    condensation: CondensationData

    @property
    def mu(self) -> np.ndarray:
        return self.high["mu"].reshape(-1, 6)

    @property
    def Q(self) -> np.ndarray | None:
        q = self.high.get("Q")
        return None if q is None else q.reshape(-1, 4)


def constraint_report(disc: MixedDiscretization, bcs: BoundaryConditionSet) -> dict:
    tags = [bcs.for_segment(s) for s in disc.partition.external_ids]
    return {"displacement": any(t.u == "u" for t in tags),
            "potential": any(t.phi == "phi" for t in tags)}


def solve_mixed(disc: MixedDiscretization, bcs: BoundaryConditionSet,
                penalties: PenaltyParams | None = None,
                options: SolveOptions = SolveOptions(), keep_iterates: bool = False) -> MixedSolution:
    """Condensed solve; the full theory iterates with the electrostatic
    stress frozen at the previous saddle vector."""
    missing = [k for k, v in constraint_report(disc, bcs).items() if not v]
    if missing:
        warnings.warn(f"no essential condition on {', '.join(missing)}: the system is singular",
                      RuntimeWarning, stacklevel=2)
    last = {}

    def assemble(x):
        if disc.full and "blocks" in last and np.any(x):
            high = recover_high_order(last["data"], last["blocks"], x)
            state = full_vector(disc, last["blocks"], x, high)
        else:
            state = None
        blocks = assemble_mixed_blocks(disc, bcs, penalties, state)
        Kbar, fbar, data = condense(blocks, disc)
        last.update(blocks=blocks, data=data)
        return Kbar, fbar

    if disc.full:
        st = newton_raphson(assemble, np.zeros(disc.n_x), options, keep_iterates)
    else:
        Kbar, fbar = assemble(np.zeros(disc.n_x))
        st = SolutionState(solve_linear(Kbar, fbar, options), 1, [])
    # in the full theory the last assembly is at the converged iterate
    blocks, data = last["blocks"], last["data"]
    high = recover_high_order(data, blocks, st.x)
    return MixedSolution(st, full_vector(disc, blocks, st.x, high), high, blocks, data)


__all__ = [
    "Coefficients", "CondensationData", "LagrangeDofs", "MixedBlocks", "MixedDiscretization",
    "MixedSolution", "assemble_mixed_blocks", "build_mixed_discretization", "condense",
    "full_vector", "lagrange_dofs", "postprocess_kappa", "recover_high_order", "solve_mixed",
]
