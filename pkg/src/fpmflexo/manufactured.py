"""Loads and boundary data consistent with prescribed polynomial fields.

Given polynomial ``u`` and ``phi`` and a material, every flux is again a
polynomial, so body force, charge and all eight boundary data sets follow by
exact differentiation.  The electrostatic stress is not included, so the data
are exact for the reduced theory and for the linear part of the full one.
"""
from __future__ import annotations

import numpy as np

from .assembly_primal import BoundaryConditionSet, SegmentBC, direction_matrices
from .fields import PolyField, combine, stack
from .geometry import Segment
from .material import MaterialModel


class ManufacturedSolution:
    def __init__(self, u: PolyField, phi: PolyField, mat: MaterialModel, theory: str = "reduced"):
        if u.dim != 2 or phi.dim != 1:
            raise ValueError("u needs two components and phi one")
        self.u, self.phi, self.mat, self.theory = u, phi, mat, theory
        d = lambda f, p, q: f.derivative(p, q)  # noqa: E731
        u1, u2 = u.component(0), u.component(1)
        self.eps = stack([d(u1, 1, 0), d(u2, 0, 1), d(u1, 0, 1) + d(u2, 1, 0)])
        self.kappa = stack([d(u1, 2, 0), d(u2, 0, 2), d(u1, 0, 2), d(u2, 2, 0),
                            d(u1, 1, 1).scale(2), d(u2, 1, 1).scale(2)])
        self.E = stack([d(phi, 1, 0), d(phi, 0, 1)]).scale(-1.0)
        self.V = stack([d(phi, 2, 0), d(phi, 1, 1), d(phi, 1, 1), d(phi, 0, 2)]).scale(-1.0)
        b = mat.b if theory == "full" else np.zeros((3, 4))
        Phi = mat.Phi if theory == "full" else np.zeros((4, 4))
        self.sigma = combine(mat.C, self.eps) - combine(mat.e, self.E) - combine(b, self.V)
        self.mu = combine(mat.Cmk, self.kappa) - combine(mat.a, self.E)
        self.D = combine(mat.Lam, self.E) + combine(mat.e.T, self.eps) + combine(mat.a.T, self.kappa)
        self.Q = combine(Phi, self.V) + combine(b.T, self.eps)

    def _c(self, f: PolyField, k: int) -> PolyField:
        return f.component(k)

    @property
    def total_stress(self) -> PolyField:
        """``sigma_ij - mu_ijk,k`` ordered [11, 22, 12, 21]."""
        m = lambda k, p, q: self._c(self.mu, k).derivative(p, q)  # noqa: E731
        s = lambda k: self._c(self.sigma, k)  # noqa: E731
        return stack([
            s(0) - m(0, 1, 0) - m(4, 0, 1),
            s(1) - m(5, 1, 0) - m(1, 0, 1),
            s(2) - m(4, 1, 0) - m(2, 0, 1),
            s(2) - m(3, 1, 0) - m(5, 0, 1),
        ])

    def body_force(self) -> PolyField:
        S = self.total_stress
        c = S.component
        return stack([c(0).derivative(1, 0) + c(2).derivative(0, 1),
                      c(3).derivative(1, 0) + c(1).derivative(0, 1)]).scale(-1.0)

    def _div_q(self) -> PolyField:
        """``Q_ij,j`` for i = 1, 2."""
        q = self.Q.component
        return stack([q(0).derivative(1, 0) + q(2).derivative(0, 1),
                      q(1).derivative(1, 0) + q(3).derivative(0, 1)])

    def charge(self) -> PolyField:
        G = self.D - self._div_q()
        return G.component(0).derivative(1, 0) + G.component(1).derivative(0, 1)

    def segment_data(self, seg: Segment) -> dict:
        """Every boundary datum on a straight segment, keyed like ``SegmentBC.data``."""
        dm = direction_matrices(seg.normal, seg.tangent)
        n, s = dm.n, dm.s
        S = self.total_stress
        T = combine(np.array([[n[0], 0, n[1], 0], [0, n[1], 0, n[0]]]), S)
        m3 = combine(dm.n3, self.mu)
        Ps = combine(dm.s4, m3)
        Q = T - _along(Ps, s)
        q1 = self.Q.derivative(1, 0)
        q2 = self.Q.derivative(0, 1)
        Dn = combine(n[None], self.D) - combine(dm.n51, q1) - combine(dm.n52, q2)
        nq = combine(dm.n6, self.Q)
        Ws = combine(s[None], nq)
        grad_u = lambda k: stack([self.u.component(k).derivative(1, 0),  # noqa: E731
                                  self.u.component(k).derivative(0, 1)])
        d = stack([combine(n[None], grad_u(0)), combine(n[None], grad_u(1))])
        grad_phi = stack([self.phi.derivative(1, 0), self.phi.derivative(0, 1)])
        return {
            "u": self.u, "Q": Q, "d": d, "R": combine(dm.n4, m3),
            "phi": self.phi, "omega": -(Dn - _along(Ws, s)),
            "P": combine(n[None], grad_phi), "Z": combine(n[None], nq),
            "Ps": Ps, "Ws": Ws,
        }

    def boundary_conditions(self, partition, tags=None) -> BoundaryConditionSet:
        """Conditions with data from this solution; ``tags(segment)`` returns
        the keyword tags of ``SegmentBC`` (default: all essential)."""
        def rule(seg):
            t = {"u": "u", "d": "d", "phi": "phi", "P": "P"}
            if tags is not None:
                t.update(tags(seg))
            data = self.segment_data(seg)
            keep = set(t.values())
            if t["u"] == "Q":
                keep.add("Ps")
            if t["phi"] == "omega" and self.theory == "full":
                keep.add("Ws")
            return SegmentBC(**t, data={k: v for k, v in data.items() if k in keep})

        return BoundaryConditionSet.uniform(partition, rule, self.body_force(), self.charge())

    def nodal(self, points) -> np.ndarray:
        """Exact global vector ``[u1_0, u2_0, ..., phi_0, ...]`` at the points."""
        return np.concatenate([self.u(points).ravel(), self.phi(points)[:, 0]])


def _along(f: PolyField, s) -> PolyField:
    return f.derivative(1, 0).scale(s[0]) + f.derivative(0, 1).scale(s[1])
