"""Sparse linear solves and the fixed-point iteration for the full theory."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .errors import NumericalError

log = logging.getLogger(__name__)

METHODS = ("direct", "iterative")


@dataclass(frozen=True)
class SolveOptions:
    method: str = "direct"
    rel_tol: float = 1e-10
    abs_tol: float = 0.0
    max_newton: int = 25
    newton_rel_tol: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not (self.rel_tol > 0 and self.newton_rel_tol > 0) or self.abs_tol < 0:
            raise ValueError("tolerances must be positive")
        if self.max_newton < 1:
            raise ValueError("max_newton must be at least 1")


@dataclass
class SolutionState:
    """Global vector ``[u1_0, u2_0, ..., phi_0, ...]`` with convenience views."""

    x: np.ndarray
    iterations: int = 1
    history: list = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return len(self.x) // 3

    @property
    def u(self) -> np.ndarray:
        return self.x[: 2 * self.n_points].reshape(-1, 2)

    @property
    def phi(self) -> np.ndarray:
        return self.x[2 * self.n_points:]


def _residual(K, x, f) -> float:
    return float(np.linalg.norm(K @ x - f))


def solve_linear(K, f, options: SolveOptions = SolveOptions()) -> np.ndarray:
    """Solve ``K x = f`` and check ``|Kx - f| <= rel_tol |f| + abs_tol``."""
    f = np.asarray(f, dtype=float)
    if not sp.issparse(K):
        K = sp.csr_matrix(np.asarray(K, dtype=float))
    if K.shape[0] != K.shape[1] or K.shape[0] != len(f):
        raise NumericalError(f"system shape {K.shape} does not match right-hand side {f.shape}")
    fnorm = float(np.linalg.norm(f))
    if fnorm == 0.0:
        return np.zeros_like(f)
    target = options.rel_tol * fnorm + options.abs_tol
    if options.method == "direct":
        try:
            lu = spl.splu(sp.csc_matrix(K))
            x = lu.solve(f)
        except RuntimeError as exc:
            raise NumericalError(f"factorization failed ({exc}); the system is singular") from exc
        r = _residual(K, x, f)
        if not np.all(np.isfinite(x)) or r > target:
            # one step of refinement removes most round-off on badly scaled systems
            x = x + lu.solve(f - K @ x)
            r = _residual(K, x, f)
    else:
        x, info = spl.minres(K, f, rtol=options.rel_tol, maxiter=20 * K.shape[0])
        r = _residual(K, x, f)
        if info != 0 and r > target:
            raise NumericalError(f"MINRES did not converge (info={info}, residual {r:.3e})")
    if not np.all(np.isfinite(x)) or r > target:
        raise NumericalError(
            f"linear solve residual {r:.3e} exceeds {target:.3e}; the system is singular or "
            "badly conditioned"
        )
    return x


def newton_raphson(assemble, x0, options: SolveOptions = SolveOptions(),
                   keep_iterates: bool = False) -> SolutionState:
    """Fixed-point iteration ``x_{k+1} = K(x_k)^-1 f(x_k)``.

    ``assemble(x)`` returns ``(K, f)``.  The iteration stops when the relative
    increment or the residual of the freshly assembled system falls below
    ``newton_rel_tol``; a state-independent system therefore stops after one
    solve.  With ``keep_iterates`` each history entry also holds its iterate.
    """
    x = np.asarray(x0, dtype=float).copy()
    K, f = assemble(x)
    history = []
    for k in range(1, options.max_newton + 1):
        x_new = solve_linear(K, f, options)
        step = float(np.linalg.norm(x_new - x))
        scale = max(float(np.linalg.norm(x_new)), 1e-300)
        x = x_new
        K, f = assemble(x)
        res = _residual(K, x, f) / max(float(np.linalg.norm(f)), 1e-300)
        history.append({"iteration": k, "increment": step / scale, "residual": res})
        if keep_iterates:
            history[-1]["x"] = x.copy()
        log.info("iteration %d: relative increment %.3e, residual %.3e", k, step / scale, res)
        if step <= options.newton_rel_tol * scale or res <= options.newton_rel_tol:
            return SolutionState(x, k, history)
    trace = ", ".join(f"{h['residual']:.2e}" for h in history)
    raise NumericalError(f"no convergence after {options.max_newton} iterations; residuals: {trace}")
