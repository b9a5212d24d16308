"""Slow, independent reference implementations used by the test suite.

Deliberately structurally different from the production solvers (projected
gradient vs active set, sort-and-threshold projection vs alternating
clamp/shift), so agreement between the two is evidence, not a tautology.
The projected-gradient inner loop is numba-jitted because the worst
instances need ~1e5 iterations; the loop body is the naive textbook update.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .validation import as_matrix, as_vector


@njit(cache=True)
def _project_simplex(v):
    """Exact Euclidean projection of ``v`` onto {p >= 0, sum p = 1}."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = 0
    for j in range(n):
        if u[j] - (css[j] - 1.0) / (j + 1) > 0.0:
            rho = j
    theta = (css[rho] - 1.0) / (rho + 1)
    out = v - theta
    for i in range(n):
        if out[i] < 0.0:
            out[i] = 0.0
    return out


@njit(cache=True)
def _projected_gradient(h, b, p0, step, max_iters, tol):
    """Minimize p'Hp - 2b'p over the simplex; returns (p, iterations)."""
    p = p0.copy()
    f_prev = p @ (h @ p) - 2.0 * (b @ p)
    done = 0
    for it in range(max_iters):
        grad = 2.0 * (h @ p - b)
        p = _project_simplex(p - step * grad)
        f = p @ (h @ p) - 2.0 * (b @ p)
        done = it + 1
        if f_prev - f < tol:
            break
        f_prev = f
    return p, done


def simplex_euclidean_project(v) -> np.ndarray:
    """Unique Euclidean projection onto the probability simplex."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    return _project_simplex(v)


def _solve_column(z, codes, lam, p_tilde, max_iters, tol):
    z = as_vector(z, "z")
    codes = as_matrix(codes, "codes")
    p_tilde = as_vector(p_tilde, "p_tilde")
    if codes.shape[0] != z.shape[0] or codes.shape[1] != p_tilde.shape[0]:
        raise ValueError(
            f"inconsistent shapes: codes {codes.shape}, z {z.shape}, p_tilde {p_tilde.shape}"
        )
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    k = codes.shape[1]
    h = codes.T @ codes + lam * np.eye(k)
    b = codes.T @ z + lam * p_tilde
    sigma_max = np.linalg.norm(codes, 2) if codes.size else 0.0
    step = 1.0 / (2.0 * (sigma_max * sigma_max + lam)) if (sigma_max or lam) else 1.0
    start = _project_simplex(p_tilde.copy())
    return _projected_gradient(h, b, start, step, int(max_iters), float(tol))


def qp_oracle_column(z, codes, lam, p_tilde, max_iters: int = 10**6, tol: float = 1e-14):
    """Reference minimizer of ||z - C p||^2 + lam ||p - p_tilde||^2 on the simplex.

    Projected gradient with step 1/(2(sigma_max(C)^2 + lam)), run until the
    objective decrease falls below ``tol`` or ``max_iters`` is hit. The
    objective value at the result is reliable to ~1e-12; the argmin itself
    only to ~1e-6 for badly conditioned instances.
    """
    p, _ = _solve_column(z, codes, lam, p_tilde, max_iters, tol)
    return p


def qp_objective(z, codes, lam, p_tilde, p) -> float:
    """The per-column objective ||z - C p||^2 + lam ||p - p_tilde||^2."""
    z = as_vector(z, "z")
    codes = as_matrix(codes, "codes")
    p = as_vector(p, "p")
    p_tilde = as_vector(p_tilde, "p_tilde")
    r = z - codes @ p
    d = p - p_tilde
    return float(r @ r + lam * (d @ d))


@dataclass
class OracleReport:
    """Outcome of cross-checking a solver column against the oracle."""

    objective_gap: float  # solver objective minus oracle objective
    argmin_distance: float  # infinity-norm distance between the two argmins
    iterations: int  # oracle iterations spent


def compare_with_solver(z, codes, lam, p_tilde, p_solver) -> OracleReport:
    """Run the oracle on one column and report how far ``p_solver`` is from it."""
    p_oracle, iters = _solve_column(z, codes, lam, p_tilde, 10**6, 1e-14)
    gap = qp_objective(z, codes, lam, p_tilde, p_solver) - qp_objective(
        z, codes, lam, p_tilde, p_oracle
    )
    dist = float(np.max(np.abs(np.asarray(p_solver, dtype=np.float64) - p_oracle)))
    return OracleReport(objective_gap=gap, argmin_distance=dist, iterations=iters)


def fd_gradient(fn: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a deterministic scalar function.

    Exact to roundoff on quadratics; useless at kinks, so callers must keep
    probe points away from non-smooth boundaries.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        saved = flat_x[i]
        flat_x[i] = saved + eps
        f_plus = float(fn(x))
        flat_x[i] = saved - eps
        f_minus = float(fn(x))
        flat_x[i] = saved
        flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
