"""Discontinuous Taylor-polynomial shape functions and their field operators.

Inside subdomain ``i`` a scalar field is the truncated Taylor polynomial about
the host point whose value is the nodal value and whose derivatives come from
the DQ (or GFD) weights over the support.  ``ShapeFn.T`` maps the nodal values
of the support to the Taylor coefficients ``[f, f_x, f_y, f_xx, f_xy, f_yy,
f_xxx, f_xxy, f_xyy, f_yyy]`` (truncated to the order).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .dq import DQWeights, GFDWeights
from .errors import AssemblyError

TAYLOR_TERMS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3))
N_TERMS = {"linear": 3, "quadratic": 6, "cubic": 10}


@dataclass(frozen=True)
class ShapeFn:
    owner: int
    order: str
    host: np.ndarray
    members: np.ndarray
    T: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)

    def derivative_rows(self, pts, p: int = 0, q: int = 0) -> np.ndarray:
        """Rows mapping nodal values to the (p, q) partial at ``pts`` (npts, m+1)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        dx = pts[:, 0] - self.host[0]
        dy = pts[:, 1] - self.host[1]
        basis = np.zeros((len(pts), self.T.shape[0]))
        for k, (a, b) in enumerate(TAYLOR_TERMS[: self.T.shape[0]]):
            if a >= p and b >= q:
                basis[:, k] = dx ** (a - p) * dy ** (b - q) / (factorial(a - p) * factorial(b - q))
        return basis @ self.T

    def values(self, pts) -> np.ndarray:
        return self.derivative_rows(pts)

    def directional(self, direction) -> "ShapeFn":
        """Shape of the derivative field ``direction . grad f``."""
        s1, s2 = direction
        nt = self.T.shape[0]
        index = {t: k for k, t in enumerate(TAYLOR_TERMS[:nt])}
        S = np.zeros((nt, nt))
        for k, (a, b) in enumerate(TAYLOR_TERMS[:nt]):
            if (a + 1, b) in index:
                S[k, index[(a + 1, b)]] += s1
            if (a, b + 1) in index:
                S[k, index[(a, b + 1)]] += s2
        return ShapeFn(self.owner, self.order, self.host, self.members, S @ self.T)


def primal_shape(order: str, members, dq: DQWeights, host, theory: str = "reduced",
                 field: str = "u") -> ShapeFn:
    """Quadratic or cubic Taylor shape closed by the DQ weights."""
    if order not in ("quadratic", "cubic"):
        raise AssemblyError(f"primal order must be quadratic or cubic, got {order!r}")
    if theory == "full" and field == "phi" and order != "cubic":
        raise AssemblyError("full theory needs a cubic potential to form the field gradient")
    nt = N_TERMS[order]
    members = np.asarray(members, dtype=int)
    T = np.zeros((nt, len(members)))
    T[0, 0] = 1.0
    T[1:] = dq.B[: nt - 1]
    return ShapeFn(int(members[0]), order, np.asarray(host, dtype=float), members, T)


def mixed_shape(members, gfd: GFDWeights, host) -> ShapeFn:
    """Linear Taylor shape closed by first-derivative weights."""
    members = np.asarray(members, dtype=int)
    T = np.zeros((3, len(members)))
    T[0, 0] = 1.0
    T[1:] = gfd.B
    return ShapeFn(int(members[0]), "linear", np.asarray(host, dtype=float), members, T)


@dataclass
class FieldOperators:
    """Operators at ``npts`` points, each of shape (npts, rows, cols).

    Displacement operators act on interleaved ``[u1_0, u2_0, u1_1, ...]``
    over the displacement support; potential operators act on the potential
    support.
    """

    u: np.ndarray
    eps: np.ndarray
    epshat: np.ndarray
    kappa: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    phi: np.ndarray
    E: np.ndarray
    V: np.ndarray
    V1: np.ndarray
    V2: np.ndarray


def _interleave(r1, r2):
    npts, n = (r1 if r1 is not None else r2).shape
    out = np.zeros((npts, 2 * n))
    if r1 is not None:
        out[:, 0::2] = r1
    if r2 is not None:
        out[:, 1::2] = r2
    return out


def field_operators(shape: ShapeFn, at, shape_phi: ShapeFn | None = None) -> FieldOperators:
    """Displacement and potential operators at the points ``at``."""
    sp = shape if shape_phi is None else shape_phi
    pts = np.atleast_2d(np.asarray(at, dtype=float))
    du = {pq: shape.derivative_rows(pts, *pq) for pq in TAYLOR_TERMS}
    dp = {pq: sp.derivative_rows(pts, *pq) for pq in TAYLOR_TERMS}
    v = _interleave

    def stack(rows):
        return np.stack(rows, axis=1)

    return FieldOperators(
        u=stack([v(du[0, 0], None), v(None, du[0, 0])]),
        eps=stack([v(du[1, 0], None), v(None, du[0, 1]), v(du[0, 1], du[1, 0])]),
        epshat=stack([v(du[1, 0], None), v(None, du[0, 1]), v(du[0, 1], None), v(None, du[1, 0])]),
        kappa=stack([v(du[2, 0], None), v(None, du[0, 2]), v(du[0, 2], None),
                     v(None, du[2, 0]), v(2 * du[1, 1], None), v(None, 2 * du[1, 1])]),
        kappa1=stack([v(du[3, 0], None), v(None, du[1, 2]), v(du[1, 2], None),
                      v(None, du[3, 0]), v(2 * du[2, 1], None), v(None, 2 * du[2, 1])]),
        kappa2=stack([v(du[2, 1], None), v(None, du[0, 3]), v(du[0, 3], None),
                      v(None, du[2, 1]), v(2 * du[1, 2], None), v(None, 2 * du[1, 2])]),
        phi=stack([dp[0, 0]]),
        E=-stack([dp[1, 0], dp[0, 1]]),
        V=-stack([dp[2, 0], dp[1, 1], dp[1, 1], dp[0, 2]]),
        V1=-stack([dp[3, 0], dp[2, 1], dp[2, 1], dp[1, 2]]),
        V2=-stack([dp[2, 1], dp[1, 2], dp[1, 2], dp[0, 3]]),
    )
