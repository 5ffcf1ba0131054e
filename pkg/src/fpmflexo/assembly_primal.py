"""Primal interior-penalty assembly for reduced and full flexoelectric theories.

Every term is an instance of one symmetric kernel.  For a pair made of a
jump quantity ``J`` and its conjugate flux ``F`` an internal segment adds

    -[[J(v)]]{F(u)} - {F(v)}[[J(u)]] + [[J(v)]] W [[J(u)]]

where ``[[x]] = x|e1 - x|e2`` and ``{x}`` is the two-sided average.  The pairs
are displacement/traction, displacement gradient/higher-order traction,
potential/normal displacement and (full theory) potential gradient/``Q n``.
The electric rows are the mechanical ones multiplied by -1, which keeps K
symmetric.  Dirichlet families reuse the same pair on one side (Nitsche);
natural families only contribute loads.

The global unknown vector is ``[u1_0, u2_0, u1_1, ..., phi_0, phi_1, ...]``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .dq import RBFParams, dq_weights
from .errors import AssemblyError
from .fields import PolyField
from .geometry import Partition, SupportPolicy, compute_supports, corner_set
from .material import MaterialModel, electrostatic_matrices
from .quadrature import cell_rule, check_level, segment_rule
from .shape import field_operators, primal_shape

THEORIES = ("reduced", "full")
ORDERS = ("quadratic", "cubic")
AUGMENTATION = {1: "linear", 2: "quadratic", 3: "cubic"}

C1 = np.array([[1.0, 0, 0, 0], [0, 0, 0, 1]])
C2 = np.array([[0.0, 0, 1, 0], [0, 1, 0, 0]])
C3 = np.array([1.0, 0])
C4 = np.array([0.0, 1])
C5 = np.hstack([np.eye(2), np.zeros((2, 2))])
C6 = np.hstack([np.zeros((2, 2)), np.eye(2)])
# first-derivative strain from the strain gradient: eps_,1 = C7 kappa, eps_,2 = C8 kappa
C7 = np.array([[1.0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0.5], [0, 0, 0, 1, 0.5, 0]])
C8 = np.array([[0.0, 0, 0, 0, 0.5, 0], [0, 1, 0, 0, 0, 0], [0, 0, 1, 0, 0, 0.5]])
C9 = np.eye(6)[[0, 5, 4, 3]]
C10 = np.eye(6)[[4, 1, 2, 5]]


@dataclass(frozen=True)
class DirectionMatrices:
    n: np.ndarray
    s: np.ndarray
    n1: np.ndarray
    n21: np.ndarray
    n22: np.ndarray
    n3: np.ndarray
    n4: np.ndarray
    s4: np.ndarray
    n51: np.ndarray
    n52: np.ndarray
    n6: np.ndarray


def direction_matrices(n, s=None) -> DirectionMatrices:
    n1, n2 = (float(v) for v in n)
    if s is None:
        s = (-n2, n1)
    s1, s2 = (float(v) for v in s)
    return DirectionMatrices(
        n=np.array([n1, n2]),
        s=np.array([s1, s2]),
        n1=np.array([[n1, 0, n2], [0, n2, n1]]),
        n21=np.array([[n1, 0, 0, 0, n2, 0], [0, 0, 0, n1, 0, n2]]),
        n22=np.array([[0, 0, n2, 0, n1, 0], [0, n2, 0, 0, 0, n1]]),
        n3=np.array([[n1, 0, 0, 0, n2, 0], [0, n2, 0, 0, 0, n1],
                     [0, 0, n2, 0, n1, 0], [0, 0, 0, n1, 0, n2]]),
        n4=np.array([[n1, 0, n2, 0], [0, n2, 0, n1]]),
        s4=np.array([[s1, 0, s2, 0], [0, s2, 0, s1]]),
        n51=np.array([[n1, n2, 0, 0]]),
        n52=np.array([[0, 0, n1, n2]]),
        n6=np.array([[n1, 0, n2, 0], [0, n1, 0, n2]]),
    )


@dataclass(frozen=True)
class PenaltyParams:
    """``eta1 = (eta11, eta12, eta13, eta14)`` weight boundary terms and
    ``eta2`` the matching internal ones.  Indices 1-2 carry stiffness units,
    3-4 permittivity units."""

    eta1: tuple
    eta2: tuple

    def __post_init__(self):
        for name in ("eta1", "eta2"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 4 or min(v) <= 0:
                raise AssemblyError(f"{name} must hold four positive penalties, got {v}")
            object.__setattr__(self, name, v)

    @classmethod
    def default(cls, mat: MaterialModel, boundary: float = 1e2, internal: float = 10.0) -> "PenaltyParams":
        E, L = mat.elastic_scale, mat.dielectric_scale
        return cls((boundary * E, boundary * E, boundary * L, boundary * L),
                   (internal * E, internal * E, internal * L, internal * L))


# boundary families and their (essential, natural) tags
FAMILIES = {"u": ("u", "Q"), "d": ("d", "R"), "phi": ("phi", "omega"), "P": ("P", "Z")}
DATA_DIM = {"u": 2, "Q": 2, "d": 2, "R": 2, "phi": 1, "omega": 1, "P": 1, "Z": 1, "Ps": 2, "Ws": 1}


@dataclass
class SegmentBC:
    """Tags of the four boundary families on one external segment and the data.

    ``data`` maps a tag to a ``PolyField``; missing data means zero.  ``Ps``
    (tangential double traction) and ``Ws`` are optional data used only at
    vertices between two natural segments.
    """

    u: str = "Q"
    d: str = "R"
    phi: str = "omega"
    P: str = "Z"
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        for fam, tags in FAMILIES.items():
            if getattr(self, fam) not in tags:
                raise AssemblyError(f"family {fam!r} tag must be one of {tags}, got {getattr(self, fam)!r}")
        for key, val in self.data.items():
            if key not in DATA_DIM:
                raise AssemblyError(f"unknown boundary data {key!r}")
            if key not in self.tags() and key not in ("Ps", "Ws"):
                raise AssemblyError(f"data {key!r} given but the segment is not tagged {key!r}")
            if val.dim != DATA_DIM[key]:
                raise AssemblyError(f"data {key!r} needs {DATA_DIM[key]} components, got {val.dim}")

    def tags(self) -> tuple:
        return (self.u, self.d, self.phi, self.P)

    def value(self, key: str, pts) -> np.ndarray:
        f = self.data.get(key)
        if f is None:
            return np.zeros((len(pts), DATA_DIM[key]))
        return f(pts)

    def tangential(self, key: str, pts, s) -> np.ndarray:
        f = self.data.get(key)
        if f is None:
            return np.zeros((len(pts), DATA_DIM[key]))
        return f.grad(pts) @ np.asarray(s)

    def scaled(self, factor: float) -> "SegmentBC":
        return replace(self, data={k: v.scale(factor) for k, v in self.data.items()})


@dataclass
class BoundaryConditionSet:
    segments: dict = field(default_factory=dict)
    body_force: PolyField | None = None
    charge: PolyField | None = None

    def for_segment(self, sid: int) -> SegmentBC:
        bc = self.segments.get(sid)
        return bc if bc is not None else _NATURAL

    def scaled(self, factor: float) -> "BoundaryConditionSet":
        return BoundaryConditionSet(
            {k: v.scaled(factor) for k, v in self.segments.items()},
            None if self.body_force is None else self.body_force.scale(factor),
            None if self.charge is None else self.charge.scale(factor),
        )

    @classmethod
    def uniform(cls, partition: Partition, rule, body_force=None, charge=None) -> "BoundaryConditionSet":
        """Apply ``rule(segment) -> SegmentBC`` to every external segment."""
        return cls({sid: rule(partition.segments[sid]) for sid in partition.external_ids}, body_force, charge)


_NATURAL = SegmentBC()


@dataclass
class Discretization:
    partition: Partition
    material: MaterialModel
    theory: str
    order: str
    phi_order: str
    rbf: RBFParams
    quadrature: int
    supports_u: list
    supports_phi: list
    shapes_u: list
    shapes_phi: list
    cracked: frozenset = frozenset()
    impermeable: frozenset = frozenset()
    weight_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def n_dof(self) -> int:
        return 3 * self.partition.n

    @property
    def active_material(self) -> MaterialModel:
        if self.theory == "full":
            return self.material
        m = self.material
        return MaterialModel(m.C, m.Cmk, m.Lam, None, m.a, None, m.e, m.eps0, m.young)

    def dofs(self, i: int) -> np.ndarray:
        mu = np.asarray(self.shapes_u[i].members)
        mp = np.asarray(self.shapes_phi[i].members)
        return np.concatenate([np.column_stack([2 * mu, 2 * mu + 1]).ravel(), 2 * self.n + mp])

    def segment_active(self, sid: int) -> tuple:
        """(mechanical pairs active, electrical pairs active) for an internal segment."""
        return sid not in self.cracked, sid not in self.impermeable

    def dof_map(self) -> np.ndarray:
        idx = np.arange(self.n)
        return np.column_stack([2 * idx, 2 * idx + 1, 2 * self.n + idx])


def _weights(disc_cache: dict, partition: Partition, support, rbf: RBFParams):
    key = support.members
    w = disc_cache.get(key)
    if w is None:
        ring1 = list(range(1, 1 + len(support.ring1)))
        w = dq_weights(partition.points[list(key)], rbf, owner=key[0], ring1=ring1)
        disc_cache[key] = w
    return w


def build_discretization(partition: Partition, material: MaterialModel, order: str = "cubic",
                         theory: str = "reduced", *, phi_order: str | None = None,
                         rbf: RBFParams | None = None, quadrature: int = 1,
                         cracked=(), impermeable=(), weight_cache: dict | None = None,
                         policy_u: SupportPolicy | None = None,
                         policy_phi: SupportPolicy | None = None) -> Discretization:
    """Supports, DQ weights and shape functions for every subdomain.

    ``cracked`` internal segments are removed from the mechanical adjacency;
    the ``impermeable`` subset is also removed from the electrical one.
    """
    if theory not in THEORIES:
        raise AssemblyError(f"theory must be one of {THEORIES}, got {theory!r}")
    if order not in ORDERS:
        raise AssemblyError(f"order must be one of {ORDERS}, got {order!r}")
    if phi_order is None:
        phi_order = order if theory == "full" else "quadratic"
    if phi_order not in ORDERS:
        raise AssemblyError(f"potential order must be one of {ORDERS}, got {phi_order!r}")
    check_level(quadrature)
    rbf = rbf or RBFParams()
    cracked = frozenset(int(s) for s in cracked)
    impermeable = frozenset(int(s) for s in impermeable)
    if not impermeable <= cracked:
        raise AssemblyError("impermeable segments must also be listed as cracked")
    bcells = partition.boundary_cells()
    policy = SupportPolicy.for_order(AUGMENTATION[rbf.degree])
    sup_u = compute_supports(partition, policy_u or policy, partition.adjacency(cracked), bcells)
    sup_p = compute_supports(partition, policy_phi or policy, partition.adjacency(impermeable), bcells)
    cache = {} if weight_cache is None else weight_cache
    shapes_u, shapes_p = [], []
    for i in range(partition.n):
        su, spp = sup_u[i], sup_p[i]
        wu = _weights(cache, partition, su, rbf)
        wp = wu if spp.members == su.members else _weights(cache, partition, spp, rbf)
        host = partition.points[i]
        shapes_u.append(primal_shape(order, su.members, wu, host, theory, "u"))
        shapes_p.append(primal_shape(phi_order, spp.members, wp, host, theory, "phi"))
    return Discretization(partition, material, theory, order, phi_order, rbf, quadrature,
                          sup_u, sup_p, shapes_u, shapes_p, cracked, impermeable, cache)


# ---------------------------------------------------------------------------
# pointwise operators and fluxes


class SideOps:
    """Operators of one subdomain at a set of points, acting on its local dofs.

    With ``direction`` every operator returns the derivative of its field
    along that direction instead.
    """

    def __init__(self, disc: Discretization, cell: int, pts: np.ndarray, direction=None):
        su, sp_ = disc.shapes_u[cell], disc.shapes_phi[cell]
        if direction is not None:
            su, sp_ = su.directional(direction), sp_.directional(direction)
        ops = field_operators(su, pts, sp_)
        nu, npp = 2 * su.size, sp_.size
        self.n = nu + npp
        self.npts = len(pts)

        def pad_u(a):
            out = np.zeros(a.shape[:2] + (self.n,))
            out[:, :, :nu] = a
            return out

        def pad_p(a):
            out = np.zeros(a.shape[:2] + (self.n,))
            out[:, :, nu:] = a
            return out

        for name in ("u", "eps", "epshat", "kappa", "kappa1", "kappa2"):
            setattr(self, name, pad_u(getattr(ops, name)))
        for name in ("phi", "E", "V", "V1", "V2"):
            setattr(self, name, pad_p(getattr(ops, name)))
        self.dofs = disc.dofs(cell)


def _mm(A, X):
    return np.matmul(A, X)


_pmm = _mm


def _gram(w, A, B) -> np.ndarray:
    """sum_p w_p A_p^T B_p for stacks of (rows, n) operators."""
    p, r, n = A.shape
    A2 = (A * w[:, None, None]).reshape(p * r, n)
    B2 = B.reshape(p * r, B.shape[2])
    ia = np.flatnonzero(np.any(A2, axis=0))
    ib = np.flatnonzero(np.any(B2, axis=0))
    if len(ia) * len(ib) > 0.5 * n * B2.shape[1]:
        return A2.T @ B2
    # mixed-field operators touch few columns; multiply the occupied block only
    out = np.zeros((n, B2.shape[1]))
    out[np.ix_(ia, ib)] = A2[:, ia].T @ B2[:, ib]
    return out


@dataclass
class Fluxes:
    sigma: np.ndarray
    mu: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray


def fluxes(ops: SideOps, mat: MaterialModel) -> Fluxes:
    E1, E2 = ops.V[:, 0:2], ops.V[:, 2:4]
    return Fluxes(
        sigma=_mm(mat.C, ops.eps) - _mm(mat.e, ops.E) - _mm(mat.b, ops.V),
        mu=_mm(mat.Cmk, ops.kappa) - _mm(mat.a, ops.E),
        mu1=_mm(mat.Cmk, ops.kappa1) - _mm(mat.a, E1),
        mu2=_mm(mat.Cmk, ops.kappa2) - _mm(mat.a, E2),
        D=_mm(mat.Lam, ops.E) + _mm(mat.e.T, ops.eps) + _mm(mat.a.T, ops.kappa),
        Q=_mm(mat.Phi, ops.V) + _mm(mat.b.T, ops.eps),
        Q1=_mm(mat.Phi, ops.V1) + _mm(mat.b.T @ C7, ops.kappa),
        Q2=_mm(mat.Phi, ops.V2) + _mm(mat.b.T @ C8, ops.kappa),
    )


def frozen_electrostatics(ops: SideOps, mat: MaterialModel, state: np.ndarray | None):
    """``(Dh, Qh)`` at the points from the state, or None when absent/zero."""
    if state is None:
        return None
    x = state[ops.dofs]
    if not np.any(x):
        return None
    fl = fluxes(ops, mat)
    D = fl.D @ x
    Q = fl.Q @ x
    return electrostatic_matrices(D, Q)


def traction(ops: SideOps, fl: Fluxes, dm: DirectionMatrices, frozen=None) -> np.ndarray:
    """(sigma - div mu + sigma_ES) n as an operator, shape (npts, 2, n)."""
    T = _mm(dm.n1, fl.sigma) - _mm(dm.n21, fl.mu1) - _mm(dm.n22, fl.mu2)
    if frozen is not None:
        Dh, Qh = frozen
        T = T + _mm(dm.n4, _pmm(Dh, ops.E) + _pmm(Qh, ops.V))
    return T


def normal_displacement(fl: Fluxes, dm: DirectionMatrices) -> np.ndarray:
    """(D - div Q) . n as an operator, shape (npts, 1, n)."""
    return _mm(dm.n[None], fl.D) - _mm(dm.n51, fl.Q1) - _mm(dm.n52, fl.Q2)


# ---------------------------------------------------------------------------
# local contributions


@dataclass
class Contribution:
    dofs: np.ndarray
    K: np.ndarray
    f: np.ndarray


def _pair(w, J, F, W=None) -> np.ndarray:
    JF = _gram(w, J, F)
    K = -(JF + JF.T)
    if W is not None:
        K += _gram(w, J, np.matmul(np.atleast_2d(W), J))
    return K


def _rhs(w, J, data) -> np.ndarray:
    return np.einsum("pri,pr->i", J * w[:, None, None], data)


def assemble_volume(disc: Discretization, cell: int, bcs: BoundaryConditionSet | None = None,
                    state: np.ndarray | None = None) -> Contribution:
    part = disc.partition
    c = part.cells[cell]
    mat = disc.active_material
    pts, w = cell_rule(c.polygon, part.points[cell], c.area, disc.quadrature)
    ops = SideOps(disc, cell, pts)
    Z = np.concatenate([ops.eps, ops.kappa, ops.E, ops.V], axis=1)
    M = np.block([
        [mat.C, np.zeros((3, 6)), -mat.e, -mat.b],
        [np.zeros((6, 3)), mat.Cmk, -mat.a, np.zeros((6, 4))],
        [-mat.e.T, -mat.a.T, -mat.Lam, np.zeros((2, 4))],
        [-mat.b.T, np.zeros((4, 6)), np.zeros((4, 2)), -mat.Phi],
    ])
    K = _gram(w, Z, np.matmul(M, Z))
    f = np.zeros(ops.n)
    if bcs is not None and bcs.body_force is not None:
        f += _rhs(w, ops.u, bcs.body_force(pts))
    if bcs is not None and bcs.charge is not None:
        f -= _rhs(w, ops.phi, bcs.charge(pts))
    if disc.theory == "full":
        frozen = frozen_electrostatics(ops, mat, state)
        if frozen is not None:
            Dh, Qh = frozen
            x = state[ops.dofs]
            s_es = np.einsum("pij,pj->pi", Dh, ops.E @ x) + np.einsum("pij,pj->pi", Qh, ops.V @ x)
            f -= _rhs(w, ops.epshat, s_es)
    return Contribution(ops.dofs, K, f)


def _interface_pairs(disc, L, R, dm, h, pen, mech, elec, mat, frozen_l, frozen_r):
    """Yield (J, F, W) with J, F acting on the concatenated [left | right] dofs."""
    fl, fr = fluxes(L, mat), fluxes(R, mat)

    def jump(a, b):
        return np.concatenate([a, -b], axis=2)

    def avg(a, b):
        return np.concatenate([0.5 * a, 0.5 * b], axis=2)

    if mech:
        yield (jump(L.u, R.u), avg(traction(L, fl, dm, frozen_l), traction(R, fr, dm, frozen_r)),
               pen.eta2[0] / h * np.eye(2))
        yield (jump(L.epshat, R.epshat), avg(_mm(dm.n3, fl.mu), _mm(dm.n3, fr.mu)),
               pen.eta2[1] * h * dm.n4.T @ dm.n4)
    if elec:
        yield (jump(L.phi, R.phi), avg(normal_displacement(fl, dm), normal_displacement(fr, dm)),
               -pen.eta2[2] / h * np.eye(1))
        if disc.theory == "full":
            yield (jump(-L.E, -R.E), avg(_mm(dm.n6, fl.Q), _mm(dm.n6, fr.Q)),
                   -pen.eta2[3] * h * np.outer(dm.n, dm.n))


def assemble_internal(disc: Discretization, sid: int, penalties: PenaltyParams,
                      state: np.ndarray | None = None) -> Contribution | None:
    seg = disc.partition.segments[sid]
    mech, elec = disc.segment_active(sid)
    if not (mech or elec):
        return None
    mat = disc.active_material
    pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
    L = SideOps(disc, seg.e1, pts)
    R = SideOps(disc, seg.e2, pts)
    dm = direction_matrices(seg.normal, seg.tangent)
    full = disc.theory == "full"
    fz_l = frozen_electrostatics(L, mat, state) if full else None
    fz_r = frozen_electrostatics(R, mat, state) if full else None
    n = L.n + R.n
    K = np.zeros((n, n))
    for J, F, W in _interface_pairs(disc, L, R, dm, seg.h, penalties, mech, elec, mat, fz_l, fz_r):
        K += _pair(w, J, F, W)
    return Contribution(np.concatenate([L.dofs, R.dofs]), K, np.zeros(n))


def boundary_operators(ops: SideOps, mat: MaterialModel, dm: DirectionMatrices, frozen=None) -> dict:
    """Trace quantities and conjugate fluxes used by the boundary families."""
    fl = fluxes(ops, mat)
    m3 = _mm(dm.n3, fl.mu)
    nq = _mm(dm.n6, fl.Q)
    grad_phi = -ops.E
    return {
        "u": ops.u,
        "T": traction(ops, fl, dm, frozen),
        "du_s": _mm(dm.s4, ops.epshat),
        "P_s": _mm(dm.s4, m3),
        "du_n": _mm(dm.n4, ops.epshat),
        "R": _mm(dm.n4, m3),
        "phi": ops.phi,
        "Dn": normal_displacement(fl, dm),
        "dphi_s": _mm(dm.s[None], grad_phi),
        "W_s": _mm(dm.s[None], nq),
        "dphi_n": _mm(dm.n[None], grad_phi),
        "Z": _mm(dm.n[None], nq),
    }


def assemble_external(disc: Discretization, sid: int, bc: SegmentBC, penalties: PenaltyParams,
                      state: np.ndarray | None = None) -> Contribution:
    seg = disc.partition.segments[sid]
    mat = disc.active_material
    full = disc.theory == "full"
    pts, w = segment_rule(seg.a, seg.b, seg.length, disc.quadrature)
    ops = SideOps(disc, seg.e1, pts)
    dm = direction_matrices(seg.normal, seg.tangent)
    frozen = frozen_electrostatics(ops, mat, state) if full else None
    B = boundary_operators(ops, mat, dm, frozen)
    h = seg.h
    e1 = penalties.eta1
    K = np.zeros((ops.n, ops.n))
    f = np.zeros(ops.n)

    def nitsche(J, F, W, data):
        nonlocal K, f
        K += _pair(w, J, F, W)
        f += -_rhs(w, F, data)
        if W is not None:
            f += _rhs(w, np.matmul(np.atleast_2d(W), J), data)

    if bc.u == "u":
        nitsche(B["u"], B["T"], e1[0] / h * np.eye(2), bc.value("u", pts))
        nitsche(B["du_s"], B["P_s"], None, bc.tangential("u", pts, dm.s))
    else:
        f += _rhs(w, B["u"], bc.value("Q", pts))
    if bc.d == "d":
        nitsche(B["du_n"], B["R"], e1[1] * h * np.eye(2), bc.value("d", pts))
    else:
        f += _rhs(w, B["du_n"], bc.value("R", pts))
    if bc.phi == "phi":
        nitsche(B["phi"], B["Dn"], -e1[2] / h * np.eye(1), bc.value("phi", pts))
        if full:
            nitsche(B["dphi_s"], B["W_s"], None, bc.tangential("phi", pts, dm.s))
    else:
        f -= _rhs(w, B["phi"], bc.value("omega", pts))
    if full:
        if bc.P == "P":
            nitsche(B["dphi_n"], B["Z"], -e1[3] * h * np.eye(1), bc.value("P", pts))
        else:
            f += _rhs(w, B["dphi_n"], bc.value("Z", pts))
    return Contribution(ops.dofs, K, f)


def assemble_corners(disc: Discretization, corner, bcs: BoundaryConditionSet,
                     state: np.ndarray | None = None) -> Contribution | None:
    """Point terms at a boundary vertex left over from integrating tangential
    derivatives by parts on natural segments."""
    part = disc.partition
    sa, sb = part.segments[corner.incoming], part.segments[corner.outgoing]
    bca, bcb = bcs.for_segment(sa.id), bcs.for_segment(sb.id)
    mat = disc.active_material
    full = disc.theory == "full"
    x = np.asarray(corner.vertex, dtype=float)[None]
    families = [("u", "Q", "u", "du_s", "P_s", "Ps")]
    if full:
        families.append(("phi", "omega", "phi", "dphi_s", "W_s", "Ws"))
    active = [fam for fam in families
              if getattr(bca, fam[0]) == fam[1] or getattr(bcb, fam[0]) == fam[1]]
    if not active:
        return None
    A = SideOps(disc, sa.e1, x)
    Bo = SideOps(disc, sb.e1, x)
    dma = direction_matrices(sa.normal, sa.tangent)
    dmb = direction_matrices(sb.normal, sb.tangent)
    opa = boundary_operators(A, mat, dma, frozen_electrostatics(A, mat, state) if full else None)
    opb = boundary_operators(Bo, mat, dmb, frozen_electrostatics(Bo, mat, state) if full else None)
    na, nb = A.n, Bo.n
    K = np.zeros((na + nb, na + nb))
    f = np.zeros(na + nb)
    one = np.ones(1)
    for fam, natural, val, _, flux, extra in active:
        va = np.concatenate([opa[val], np.zeros_like(opb[val])], axis=2)
        vb = np.concatenate([np.zeros_like(opa[val]), opb[val]], axis=2)
        Pa = np.concatenate([opa[flux], np.zeros_like(opb[flux])], axis=2)
        Pb = np.concatenate([np.zeros_like(opa[flux]), opb[flux]], axis=2)
        nat_a = getattr(bca, fam) == natural
        nat_b = getattr(bcb, fam) == natural
        if nat_a and nat_b:
            # -([[v]]{P} + {P(v)}[[u]]) plus prescribed corner data {v}[[P~]]
            K += _pair(one, va - vb, 0.5 * (Pa + Pb))
            f += _rhs(one, 0.5 * (va + vb), bca.value(extra, x) - bcb.value(extra, x))
        elif nat_b:
            # natural segment starting at an essential one
            K -= _pair(one, vb, Pb)
            f += _rhs(one, Pb, bca.value(val, x))
        else:
            K += _pair(one, va, Pa)
            f -= _rhs(one, Pa, bcb.value(val, x))
    return Contribution(np.concatenate([A.dofs, Bo.dofs]), K, f)


# ---------------------------------------------------------------------------
# global system


@dataclass
class GlobalSystem:
    K: sp.csr_matrix
    f: np.ndarray
    dof_map: np.ndarray
    constrained: dict = field(default_factory=dict)

    @property
    def nullspace(self) -> list:
        """Families without any essential condition (rigid or constant modes)."""
        return [k for k, v in self.constrained.items() if not v]


def entity_keys(disc: Discretization) -> list:
    part = disc.partition
    keys = [("volume", i) for i in range(part.n)]
    keys += [("internal", s) for s in part.internal_ids]
    keys += [("external", s) for s in part.external_ids]
    keys += [("corner", k) for k in range(len(disc_corners(disc)))]
    return keys


def disc_corners(disc: Discretization) -> list:
    cache = disc.partition._cache
    if "corners" not in cache:
        cache["corners"] = corner_set(disc.partition)
    return cache["corners"]


def entity_cells(disc: Discretization, key) -> tuple:
    kind, k = key
    part = disc.partition
    if kind == "volume":
        return (k,)
    if kind in ("internal", "external"):
        s = part.segments[k]
        return (s.e1, s.e2) if kind == "internal" else (s.e1,)
    c = disc_corners(disc)[k]
    return (part.segments[c.incoming].e1, part.segments[c.outgoing].e1)


def assemble_entity(disc: Discretization, key, bcs: BoundaryConditionSet, penalties: PenaltyParams,
                    state: np.ndarray | None = None) -> Contribution | None:
    kind, k = key
    if kind == "volume":
        return assemble_volume(disc, k, bcs, state)
    if kind == "internal":
        return assemble_internal(disc, k, penalties, state)
    if kind == "external":
        return assemble_external(disc, k, bcs.for_segment(k), penalties, state)
    return assemble_corners(disc, disc_corners(disc)[k], bcs, state)


def assemble_contributions(disc: Discretization, bcs: BoundaryConditionSet,
                           penalties: PenaltyParams, state: np.ndarray | None = None) -> dict:
    """Per-entity contributions in a fixed order (volumes, internal, external, corners)."""
    if disc.theory == "full" and state is None:
        raise AssemblyError("full theory needs a state vector (use zeros for the first iterate)")
    return {key: assemble_entity(disc, key, bcs, penalties, state) for key in entity_keys(disc)}


def sum_contributions(contribs, n_dof: int) -> tuple:
    rows, cols, vals = [], [], []
    f = np.zeros(n_dof)
    for c in contribs:
        if c is None:
            continue
        d = c.dofs
        r, q = np.nonzero(c.K)
        rows.append(d[r])
        cols.append(d[q])
        vals.append(c.K[r, q])
        np.add.at(f, d, c.f)
    if rows:
        K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n_dof, n_dof)).tocsr()
    else:
        K = sp.csr_matrix((n_dof, n_dof))
    K.sum_duplicates()
    return K, f


def constraint_report(disc: Discretization, bcs: BoundaryConditionSet) -> dict:
    tags = [bcs.for_segment(s) for s in disc.partition.external_ids]
    return {
        "displacement": any(t.u == "u" for t in tags),
        "potential": any(t.phi == "phi" for t in tags),
    }


def assemble_system(disc: Discretization, bcs: BoundaryConditionSet,
                    penalties: PenaltyParams | None = None,
                    state: np.ndarray | None = None) -> GlobalSystem:
    penalties = penalties or PenaltyParams.default(disc.material)
    contribs = assemble_contributions(disc, bcs, penalties, state)
    K, f = sum_contributions(contribs.values(), disc.n_dof)
    report = constraint_report(disc, bcs)
    missing = [k for k, v in report.items() if not v]
    if missing:
        warnings.warn(f"no essential condition on {', '.join(missing)}: the system is singular",
                      RuntimeWarning, stacklevel=2)
    return GlobalSystem(K, f, disc.dof_map(), report)


def build_system(partition: Partition, mat: MaterialModel, bcs: BoundaryConditionSet,
                 penalties: PenaltyParams | None = None, theory: str = "reduced",
                 order: str = "cubic", state: np.ndarray | None = None, **options) -> GlobalSystem:
    """Discretize and assemble in one call; ``options`` go to ``build_discretization``."""
    disc = build_discretization(partition, mat, order, theory, **options)
    if theory == "full" and state is None:
        state = np.zeros(disc.n_dof)
    return assemble_system(disc, bcs, penalties, state)
