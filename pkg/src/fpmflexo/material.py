"""Constitutive matrices for flexoelectric dielectrics.

Vector conventions (Voigt-like):

* strain ``[e11, e22, 2 e12]`` and stress ``[s11, s22, s12]``
* strain gradient ``[k111, k222, k122, k211, 2 k112, 2 k212]`` with
  ``k_ijk = u_i,jk`` and higher-order stress ``[m111, m222, m122, m211, m112, m212]``
* electric field ``E = -grad phi`` and displacement ``D``
* field gradient ``[V11, V21, V12, V22]`` with ``V_ij = E_i,j`` and its conjugate ``Q``
* electrostatic stress ``[s11, s22, s12, s21]``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaterialError

EPS0 = 8.8541878128e-12

# strain-gradient slots grouped by the displacement component they differentiate
GRAD_U1 = (0, 2, 4)   # u1,11  u1,22  2 u1,12
GRAD_U2 = (3, 1, 5)   # u2,11  u2,22  2 u2,12


def _arr(x, shape, name):
    a = np.zeros(shape) if x is None else np.asarray(x, dtype=float)
    if a.shape != shape:
        raise MaterialError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise MaterialError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True)
class MaterialModel:
    C: np.ndarray
    Cmk: np.ndarray = field(default=None)
    Lam: np.ndarray = field(default=None)
    Phi: np.ndarray = field(default=None)
    a: np.ndarray = field(default=None)
    b: np.ndarray = field(default=None)
    e: np.ndarray = field(default=None)
    eps0: float = EPS0
    young: float | None = None

    def __post_init__(self):
        for name, shape in (("C", (3, 3)), ("Cmk", (6, 6)), ("Lam", (2, 2)), ("Phi", (4, 4)),
                            ("a", (6, 2)), ("b", (3, 4)), ("e", (3, 2))):
            object.__setattr__(self, name, _arr(getattr(self, name), shape, name))
        for name in ("C", "Cmk", "Lam", "Phi"):
            m = getattr(self, name)
            if not np.allclose(m, m.T, rtol=1e-12, atol=1e-14 * max(np.abs(m).max(), 1e-300)):
                raise MaterialError(f"{name} must be symmetric")
        for name in ("C", "Lam"):
            if np.linalg.eigvalsh(getattr(self, name)).min() <= 0:
                raise MaterialError(f"{name} must be positive definite")
        for name in ("Cmk", "Phi"):
            m = getattr(self, name)
            if np.abs(m).max() > 0 and np.linalg.eigvalsh(m).min() < -1e-12 * np.abs(m).max():
                raise MaterialError(f"{name} must be positive semidefinite")

    @property
    def elastic_scale(self) -> float:
        """Young's modulus if known, else the largest elastic stiffness."""
        return float(self.young) if self.young else float(np.abs(self.C).max())

    @property
    def dielectric_scale(self) -> float:
        return float(np.abs(self.Lam).max())

    @property
    def has_gradient_elasticity(self) -> bool:
        return bool(np.abs(self.Cmk).max() > 0)

    @property
    def has_field_gradient(self) -> bool:
        return bool(np.abs(self.Phi).max() > 0)

    def scaled_coupling(self, factor: float) -> "MaterialModel":
        """Copy with the electromechanical couplings and Phi multiplied by ``factor``."""
        return MaterialModel(self.C, self.Cmk, self.Lam, factor * self.Phi, factor * self.a,
                             factor * self.b, factor * self.e, self.eps0, self.young)


def constitutive_full(mat: MaterialModel, eps, kappa, E, V):
    """Stress, higher-order stress, electric displacement and its gradient conjugate."""
    eps, kappa, E, V = (np.asarray(x, dtype=float) for x in (eps, kappa, E, V))
    sigma = eps @ mat.C.T - E @ mat.e.T - V @ mat.b.T
    mu = kappa @ mat.Cmk.T - E @ mat.a.T
    D = E @ mat.Lam.T + eps @ mat.e + kappa @ mat.a
    Q = V @ mat.Phi.T + eps @ mat.b
    return sigma, mu, D, Q


def constitutive_reduced(mat: MaterialModel, eps, kappa, E):
    eps, kappa, E = (np.asarray(x, dtype=float) for x in (eps, kappa, E))
    sigma = eps @ mat.C.T - E @ mat.e.T
    mu = kappa @ mat.Cmk.T - E @ mat.a.T
    D = E @ mat.Lam.T + eps @ mat.e + kappa @ mat.a
    return sigma, mu, D


def electrostatic_matrices(D, Q):
    """Matrices ``Dh`` (4x2) and ``Qh`` (4x4) with ``s_ES = Dh E + Qh V``.

    Accepts stacked inputs of shape (..., 2) and (..., 4).
    """
    D = np.asarray(D, dtype=float)
    Q = np.asarray(Q, dtype=float)
    D1, D2 = D[..., 0], D[..., 1]
    Q11, Q21, Q12, Q22 = Q[..., 0], Q[..., 1], Q[..., 2], Q[..., 3]
    z = np.zeros_like(D1)
    Dh = np.stack([
        np.stack([0.5 * D1, -0.5 * D2], -1),
        np.stack([-0.5 * D1, 0.5 * D2], -1),
        np.stack([D2, z], -1),
        np.stack([z, D1], -1),
    ], -2)
    zq = np.zeros_like(Q11)
    Qh = np.stack([
        np.stack([0.5 * Q11, -0.5 * Q21, Q21 - 0.5 * Q12, -0.5 * Q22], -1),
        np.stack([-0.5 * Q11, Q12 - 0.5 * Q21, -0.5 * Q12, 0.5 * Q22], -1),
        np.stack([Q12, zq, Q22, zq], -1),
        np.stack([zq, Q11, zq, Q21], -1),
    ], -2)
    return Dh, Qh


def sigma_es(Dh, Qh, E, V):
    return np.einsum("...ij,...j->...i", Dh, E) + np.einsum("...ij,...j->...i", Qh, V)


def electrostatic_stress_index(D, Q, E, V):
    """Index-notation evaluation of the electrostatic stress, ordered [11, 22, 12, 21]."""
    Dv = np.asarray(D, dtype=float)
    Ev = np.asarray(E, dtype=float)
    Qm = np.array([[Q[0], Q[2]], [Q[1], Q[3]]], dtype=float)   # Q_ij
    Vm = np.array([[V[0], V[2]], [V[1], V[3]]], dtype=float)   # V_ij
    s = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            s[i, j] = Ev[i] * Dv[j] + sum(Vm[i, k] * Qm[k, j] for k in range(2))
            if i == j:
                s[i, j] -= 0.5 * sum(Ev[k] * Dv[k] for k in range(2))
                s[i, j] -= 0.5 * sum(Vm[k, l] * Qm[k, l] for k in range(2) for l in range(2))
    return np.array([s[0, 0], s[1, 1], s[0, 1], s[1, 0]])


def elastic_matrix(young: float, nu: float, plane: str = "strain") -> np.ndarray:
    if not young > 0:
        raise MaterialError("Young's modulus must be positive")
    if nu >= 0.5 or nu <= -1.0:
        raise MaterialError(f"Poisson ratio {nu} outside (-1, 0.5); incompressible limit not supported")
    if plane == "strain":
        f = young / ((1 + nu) * (1 - 2 * nu))
        return f * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, 0.5 - nu]])
    if plane == "stress":
        f = young / (1 - nu * nu)
        return f * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, 0.5 * (1 - nu)]])
    raise MaterialError(f"plane must be 'strain' or 'stress', got {plane!r}")


def gradient_matrix(C: np.ndarray, ell: float) -> np.ndarray:
    """``ell**2`` times ``C`` acting separately on the second gradients of u1 and u2."""
    Cmk = np.zeros((6, 6))
    Cmk[np.ix_(GRAD_U1, GRAD_U1)] = ell**2 * C
    Cmk[np.ix_(GRAD_U2, GRAD_U2)] = ell**2 * C
    return Cmk


def isotropic_builder(young: float, nu: float, ell: float = 0.0, *, flexo=None, piezo=None,
                      converse=None, permittivity=None, ell_phi: float = 0.0,
                      plane: str = "strain", eps0: float = EPS0) -> MaterialModel:
    """Isotropic elastic solid with optional couplings.

    ``permittivity`` is a scalar or 2x2 matrix (defaults to ``eps0``);
    ``Phi = ell_phi**2`` times the permittivity acting on each column of V.
    """
    C = elastic_matrix(young, nu, plane)
    if permittivity is None:
        permittivity = eps0
    lam = np.asarray(permittivity, dtype=float)
    Lam = lam * np.eye(2) if lam.ndim == 0 else lam
    return MaterialModel(
        C=C,
        Cmk=gradient_matrix(C, ell),
        Lam=Lam,
        Phi=ell_phi**2 * np.kron(np.eye(2), Lam),
        a=flexo,
        b=converse,
        e=piezo,
        eps0=eps0,
        young=young,
    )
