"""Local radial-basis differential quadrature and first-order GFD weights.

For a support ``P0..Pm`` (owner first) the weights ``B`` satisfy
``d^(s+t) f / dx^s dy^t (P0) ~= B[row] @ f(P)`` for the nine derivative rows in
``DERIVATIVES``.  The approximation space is spanned by ``1, x, y`` and the
``m - 2`` radial functions ``g_i`` obtained by removing from ``psi_i`` its
linear interpolant through the three anchor points ``P0, P1, P2``.  This makes
the polynomial constraints implicit and keeps the collocation matrix square.

Linear augmentation reproduces only linear fields, so second and third
derivative estimates saturate under refinement.  ``RBFParams.degree`` raises
the augmentation to quadratic or cubic monomials; the anchors then become a
unisolvent subset chosen by pivoted QR and the ``g_i`` subtract the matching
polynomial interpolant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import SingularSupportError

DERIVATIVES = ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3))
RBF_KINDS = ("mq", "imq", "gaussian")


@dataclass(frozen=True)
class RBFParams:
    kind: str = "mq"
    c0: float = 1.0
    degree: int = 1     # polynomial augmentation; 1 reproduces linear fields only

    def __post_init__(self):
        if self.kind not in RBF_KINDS:
            raise ValueError(f"unknown RBF kind {self.kind!r}; expected one of {RBF_KINDS}")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if self.degree not in (1, 2, 3):
            raise ValueError("polynomial augmentation degree must be 1, 2 or 3")


@dataclass(frozen=True)
class DQWeights:
    owner: int
    B: np.ndarray
    d0: float = 1.0
    cond: float = 1.0


@dataclass(frozen=True)
class GFDWeights:
    owner: int
    B: np.ndarray


def _radial_derivs(kind: str, c: float, rho: np.ndarray):
    """F, F', F'', F''' of the radial profile written as a function of r^2."""
    if kind == "gaussian":
        f = np.exp(-rho / c**2)
        k = -1.0 / c**2
        return f, k * f, k * k * f, k**3 * f
    p = 0.5 if kind == "mq" else -0.5
    base = rho + c * c
    return (base**p, p * base**(p - 1), p * (p - 1) * base**(p - 2),
            p * (p - 1) * (p - 2) * base**(p - 3))


def rbf_eval(kind: str, c: float, r):
    """Value and radial derivative of the basis function at distance ``r``."""
    r = np.asarray(r, dtype=float)
    f, f1, _, _ = _radial_derivs(kind, c, r * r)
    return f, 2.0 * r * f1


def rbf_partials(kind: str, c: float, dx, dy) -> np.ndarray:
    """Value and the nine partial derivatives of psi(dx, dy), shape (10, ...)."""
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    f, f1, f2, f3 = _radial_derivs(kind, c, dx * dx + dy * dy)
    return np.array([
        f,
        2 * dx * f1,
        2 * dy * f1,
        2 * f1 + 4 * dx * dx * f2,
        4 * dx * dy * f2,
        2 * f1 + 4 * dy * dy * f2,
        12 * dx * f2 + 8 * dx**3 * f3,
        4 * dy * f2 + 8 * dx * dx * dy * f3,
        4 * dx * f2 + 8 * dx * dy * dy * f3,
        12 * dy * f2 + 8 * dy**3 * f3,
    ])


def enclosing_circle(points: np.ndarray) -> tuple:
    """Smallest enclosing circle (centre, radius) by Welzl's move-to-front scheme."""
    pts = [np.asarray(p, dtype=float) for p in points]

    def circ2(a, b):
        c = 0.5 * (a + b)
        return c, float(np.linalg.norm(a - c))

    def circ3(a, b, c):
        ax, ay = a
        bx, by = b
        cx, cy = c
        d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        if abs(d) < 1e-300:
            far = max(((a, b), (a, c), (b, c)), key=lambda t: np.linalg.norm(t[0] - t[1]))
            return circ2(*far)
        ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
              + (cx * cx + cy * cy) * (ay - by)) / d
        uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
              + (cx * cx + cy * cy) * (bx - ax)) / d
        ctr = np.array([ux, uy])
        return ctr, float(np.linalg.norm(a - ctr))

    def inside(circle, p):
        return np.linalg.norm(p - circle[0]) <= circle[1] * (1 + 1e-12) + 1e-300

    circle = (pts[0], 0.0)
    for i in range(1, len(pts)):
        if inside(circle, pts[i]):
            continue
        circle = (pts[i], 0.0)
        for j in range(i):
            if inside(circle, pts[j]):
                continue
            circle = circ2(pts[i], pts[j])
            for k in range(j):
                if not inside(circle, pts[k]):
                    circle = circ3(pts[i], pts[j], pts[k])
    return circle


def _tri_det(p0, p1, p2) -> float:
    return (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])


def choose_anchors(coords: np.ndarray, candidates=None) -> tuple:
    """Pair of support indices (>0) spanning the largest triangle with P0."""
    n = len(coords)
    pools = []
    if candidates is not None and len(candidates) >= 2:
        pools.append(list(candidates))
    pools.append(list(range(1, n)))
    scale = np.ptp(coords, axis=0).max() ** 2
    for pool in pools:
        best, pair = 0.0, None
        for ii, i in enumerate(pool):
            for j in pool[ii + 1:]:
                d = abs(_tri_det(coords[0], coords[i], coords[j]))
                if d > best:
                    best, pair = d, (i, j)
        if pair is not None and best > 1e-10 * scale:
            return pair
    raise SingularSupportError("support points are collinear")


def barycentric_weights(coords: np.ndarray) -> np.ndarray:
    """Rows ``alpha_i`` with ``P_i = sum_j alpha_ij P_j`` for anchors ``j = 0, 1, 2``."""
    (x0, y0), (x1, y1), (x2, y2) = coords[0], coords[1], coords[2]
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    x, y = coords[3:, 0], coords[3:, 1]
    a0 = (x1 * y2 - x2 * y1 + x * (y1 - y2) + y * (x2 - x1)) / det
    a1 = (x2 * y0 - x0 * y2 + x * (y2 - y0) + y * (x0 - x2)) / det
    a2 = (x0 * y1 - x1 * y0 + x * (y0 - y1) + y * (x1 - x0)) / det
    return np.column_stack([a0, a1, a2])


def monomial_exponents(degree: int) -> list:
    return [(a - b, b) for a in range(degree + 1) for b in range(a + 1)]


def _vandermonde(X: np.ndarray, degree: int) -> np.ndarray:
    return np.column_stack([X[:, 0]**a * X[:, 1]**b for a, b in monomial_exponents(degree)])


def _monomial_partials(x0, y0, degree: int) -> np.ndarray:
    """Partials (rows of DERIVATIVES) of each monomial at (x0, y0), shape (M, 9)."""
    from math import factorial
    out = np.zeros((len(monomial_exponents(degree)), 9))
    for r, (a, b) in enumerate(monomial_exponents(degree)):
        for k, (s, t) in enumerate(DERIVATIVES):
            if s <= a and t <= b:
                coef = factorial(a) // factorial(a - s) * factorial(b) // factorial(b - t)
                out[r, k] = coef * x0**(a - s) * y0**(b - t)
    return out


def choose_anchor_set(coords: np.ndarray, degree: int, ring1=None) -> list:
    """Indices of the unisolvent anchor points, P0 first."""
    if degree == 1:
        return [0, *choose_anchors(coords, ring1)]
    V = _vandermonde(coords - coords[0], degree)
    V = V / np.linalg.norm(V, axis=1, keepdims=True).clip(1e-300)
    q0 = V[0] / np.linalg.norm(V[0])
    R = V[1:] - np.outer(V[1:] @ q0, q0)
    _, rr, piv = sla.qr(R.T, pivoting=True, mode="economic")
    M = V.shape[1]
    if len(piv) < M - 1 or abs(rr[M - 2, M - 2]) <= 1e-10 * abs(rr[0, 0]):
        raise SingularSupportError("support is not unisolvent for the requested degree")
    return [0, *(int(p) + 1 for p in piv[:M - 1])]


def build_collocation(coords, c: float, kind: str = "mq", degree: int = 1) -> tuple:
    """Collocation matrix G and derivative block DG with anchors listed first.

    Row ``b`` of G holds basis function ``b`` sampled at all support points:
    the monomials up to ``degree`` (``1, x, y`` for the default linear
    augmentation) followed by the reduced radial functions ``g_i``.  Column
    ``k`` of DG (shape ``(m+1, 9)``) holds the ``DERIVATIVES[k]`` partials of
    every basis function at ``P0``.
    """
    X = np.asarray(coords, dtype=float)
    n = len(X)
    M = len(monomial_exponents(degree))
    if n < M:
        raise SingularSupportError(f"support needs at least {M} points")
    if abs(_tri_det(X[0], X[1], X[2])) <= 1e-14 * np.ptp(X, axis=0).max() ** 2 and degree == 1:
        raise SingularSupportError("anchor points P0, P1, P2 are collinear")
    G = np.zeros((n, n))
    DG = np.zeros((n, 9))
    G[:M] = _vandermonde(X, degree).T
    DG[:M] = _monomial_partials(X[0, 0], X[0, 1], degree)
    if n > M:
        if degree == 1:
            alpha = barycentric_weights(X)
        else:
            Va = _vandermonde(X[:M], degree)
            alpha = np.linalg.solve(Va.T, _vandermonde(X[M:], degree).T).T
        diff = X[:, None, :] - X[None, :, :]
        psi = _radial_derivs(kind, c, (diff**2).sum(-1))[0]       # psi_j(P_k) at [k, j]
        dpsi = rbf_partials(kind, c, X[0, 0] - X[:, 0], X[0, 1] - X[:, 1])[1:]   # (9, n)
        G[M:] = psi[:, M:].T - alpha @ psi[:, :M].T
        DG[M:] = dpsi[:, M:].T - alpha @ dpsi[:, :M].T
    return G, DG


def dq_weights(coords, params: RBFParams = RBFParams(), owner: int = 0,
               ring1=None) -> DQWeights:
    """Derivative weights at ``coords[0]``; rows follow ``DERIVATIVES``.

    The support is shifted to ``P0`` and scaled by the enclosing-circle
    diameter ``d0`` before collocation, so ``c = c0 * d0`` becomes ``c0``.
    """
    X = np.asarray(coords, dtype=float)
    n = len(X)
    if n < 3:
        raise SingularSupportError(f"support of point {owner} has fewer than 3 points")
    _, r = enclosing_circle(X)
    d0 = 2.0 * r
    Y = (X - X[0]) / d0
    try:
        anchors = choose_anchor_set(Y, params.degree, ring1)
    except SingularSupportError as exc:
        raise SingularSupportError(f"support of point {owner}: {exc}") from None
    order = anchors + [k for k in range(1, n) if k not in anchors]
    try:
        G, DG = build_collocation(Y[order], params.c0, params.kind, params.degree)
        lu = sla.lu_factor(G, check_finite=True)
        W = sla.lu_solve(lu, DG)
    except (ValueError, np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise SingularSupportError(f"collocation matrix of point {owner} is singular") from exc
    if not np.all(np.isfinite(W)) or np.any(np.diag(lu[0]) == 0):
        raise SingularSupportError(f"collocation matrix of point {owner} is singular")
    B = np.empty((9, n))
    B[:, order] = W.T
    powers = np.array([s + t for s, t in DERIVATIVES])
    B /= (d0 ** powers)[:, None]
    return DQWeights(owner, B, d0, float(np.linalg.cond(G)))


def gfd_weights(coords, owner: int = 0) -> GFDWeights:
    """Weighted least-squares gradient weights (inverse-square distance weights)."""
    X = np.asarray(coords, dtype=float)
    if len(X) < 3:
        raise SingularSupportError(f"support of point {owner} has fewer than 3 points")
    A = X[1:] - X[0]
    r2 = (A**2).sum(1)
    scale = np.sqrt(r2.max())
    As = A / scale
    w = scale**2 / r2
    M = As.T @ (w[:, None] * As)
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise SingularSupportError(f"support of point {owner} is collinear")
    Wn = np.linalg.solve(M, (w[:, None] * As).T) / scale
    B = np.empty((2, len(X)))
    B[:, 1:] = Wn
    B[:, 0] = -Wn.sum(1)
    return GFDWeights(owner, B)
