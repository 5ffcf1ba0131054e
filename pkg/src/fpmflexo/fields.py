"""Prescribed fields: bivariate polynomials with exact derivatives.

A ``PolyField`` with ``dim`` components stores coefficients ``c[k, i, j]`` of
``sum_ij c[k, i, j] x**i y**j``.  Boundary data, body loads and manufactured
solutions are all expressed this way so derivatives stay exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P


@dataclass(frozen=True)
class PolyField:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3:
            raise ValueError("polynomial coefficients must have shape (dim, nx, ny) or (nx, ny)")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def constant(cls, value) -> "PolyField":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(v.reshape(-1, 1, 1))

    @classmethod
    def zeros(cls, dim: int) -> "PolyField":
        return cls(np.zeros((dim, 1, 1)))

    @classmethod
    def linear(cls, c0, cx, cy) -> "PolyField":
        """Components ``c0 + cx x + cy y`` (array-like per component)."""
        c0, cx, cy = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (c0, cx, cy))
        out = np.zeros((len(c0), 2, 2))
        out[:, 0, 0], out[:, 1, 0], out[:, 0, 1] = c0, cx, cy
        return cls(out)

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.stack([P.polyval2d(pts[:, 0], pts[:, 1], c) for c in self.coeffs], axis=-1)

    def derivative(self, p: int = 0, q: int = 0) -> "PolyField":
        c = self.coeffs
        if p:
            c = P.polyder(c, p, axis=1) if c.shape[1] > p else np.zeros((c.shape[0], 1, c.shape[2]))
        if q:
            c = P.polyder(c, q, axis=2) if c.shape[2] > q else np.zeros((c.shape[0], c.shape[1], 1))
        return PolyField(c)

    def grad(self, pts) -> np.ndarray:
        """Gradient at ``pts`` with shape (npts, dim, 2)."""
        return np.stack([self.derivative(1, 0)(pts), self.derivative(0, 1)(pts)], axis=-1)

    def _pad(self, other: "PolyField"):
        a, b = self.coeffs, other.coeffs
        shape = (max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1]), max(a.shape[2], b.shape[2]))
        pa = np.zeros(shape)
        pb = np.zeros(shape)
        pa[: a.shape[0], : a.shape[1], : a.shape[2]] = a
        pb[: b.shape[0], : b.shape[1], : b.shape[2]] = b
        return pa, pb

    def __add__(self, other: "PolyField") -> "PolyField":
        pa, pb = self._pad(other)
        return PolyField(pa + pb)

    def __sub__(self, other: "PolyField") -> "PolyField":
        pa, pb = self._pad(other)
        return PolyField(pa - pb)

    def __neg__(self) -> "PolyField":
        return PolyField(-self.coeffs)

    def scale(self, factor: float) -> "PolyField":
        return PolyField(factor * self.coeffs)

    def component(self, k: int) -> "PolyField":
        return PolyField(self.coeffs[k:k + 1])

    def times(self, other: "PolyField") -> "PolyField":
        """Product of a scalar field with each component of ``other``."""
        if self.dim != 1:
            raise ValueError("left factor must be scalar")
        c = self.coeffs[0]
        return PolyField(np.stack([_mul2d(c, o) for o in other.coeffs]))

    def to_list(self) -> list:
        return self.coeffs.tolist()


def _mul2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if a[i, j]:
                out[i:i + b.shape[0], j:j + b.shape[1]] += a[i, j] * b
    return out


def stack(fields) -> PolyField:
    """Concatenate the components of several fields."""
    fields = list(fields)
    nx = max(f.coeffs.shape[1] for f in fields)
    ny = max(f.coeffs.shape[2] for f in fields)
    comps = []
    for f in fields:
        c = np.zeros((f.dim, nx, ny))
        c[:, : f.coeffs.shape[1], : f.coeffs.shape[2]] = f.coeffs
        comps.append(c)
    return PolyField(np.concatenate(comps, axis=0))


def combine(matrix, field: PolyField) -> PolyField:
    """Constant matrix times a vector field (componentwise linear combination)."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    return PolyField(np.tensordot(A, field.coeffs, axes=(1, 0)))
