"""Soft convex quantization.

Each latent column z is re-expressed as a convex combination C p of codebook
columns, where p solves the per-column QP

    minimize   ||z - C p||^2 + lam * ||p - p_tilde||^2
    subject to p >= 0,  sum(p) = 1,

with p_tilde the detached one-hot nearest-code assignment. Large lam pins p
to p_tilde (hard quantization); lam -> 0 recovers the best convex-hull
approximation of z.

Two routes are provided:

* ``scq_exact``: a primal active-set solver per column, returning primal and
  dual variables with KKT residuals at roundoff level. Its derivative comes
  from implicit differentiation of the reduced KKT system on the final
  active set (``scq_exact_vjp``), exposed as a tape node by
  ``scq_exact_quantize``.
* ``scq_fast``: one SPD linear solve for the unconstrained regularized
  problem, then m alternating clamp/shift iterations toward the simplex.
  The shift runs last, so column sums are exactly one while small negative
  entries may survive; ``min_entry`` reports the worst one. The whole path
  is a composition of tape primitives, hence differentiable w.r.t. both the
  encoder output and the codebook with no straight-through approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import DegenerateActiveSetError, ShapeMismatchError, SolverStallError
from .quantizers import SOFT, Assignment, QuantizeResult, perplexity, vq_assign
from .validation import as_matrix, as_vector, check_positive_int

_FEAS_TOL = 1e-12  # how negative a face solution may be and still count feasible
_DUAL_TOL = 1e-11  # duals above -this are treated as optimal
_WEAK_TOL = 1e-12  # active duals below this mean a non-unique derivative
_RATIO_TINY = 1e-14


@dataclass
class ScqConfig:
    """Knobs of the fast variant: regularizer, projection sweeps, final clamp."""

    lam: float
    projection_steps: int = 20
    final_clamp: bool = False

    def __post_init__(self):
        self.lam = float(self.lam)
        if not self.lam > 0.0 or not np.isfinite(self.lam):
            raise ValueError(f"lam must be positive and finite, got {self.lam}")
        self.projection_steps = check_positive_int(self.projection_steps, "projection_steps")


# ---------------------------------------------------------------------------
# Fast variant (linear solve + alternating projection)


def simplex_project_steps(p, m: int) -> np.ndarray:
    """m sweeps of clamp-to-nonnegative then shift-columns-to-sum-one.

    This is alternating projection, not the exact Euclidean projection: after
    the final shift every column sums to exactly one, but entries clamped at
    zero may have been pushed slightly negative again.
    """
    p = as_matrix(p, "p")
    m = check_positive_int(m, "m")
    k = p.shape[0]
    for _ in range(m):
        p = np.maximum(p, 0.0)
        p = p - (p.sum(axis=0, keepdims=True) - 1.0) / k
    return p


def _shift_columns_node(p: Node) -> Node:
    """Tape twin of the hyperplane shift; affine, self-adjoint minus column mean."""
    k = p.value.shape[0]
    value = p.value - (p.value.sum(axis=0, keepdims=True) - 1.0) / k

    def vjp(u):
        return u - u.sum(axis=0, keepdims=True) / k

    return p.tape.record("shift_columns_to_one", value, [(p, vjp)])


def _normalize_columns_node(p: Node) -> Node:
    """Divide each column by its sum (guarding all-zero columns)."""
    sums = p.value.sum(axis=0, keepdims=True)
    safe = np.where(sums > 1e-300, sums, 1.0)
    value = p.value / safe

    def vjp(u):
        return u / safe - (u * p.value).sum(axis=0, keepdims=True) / (safe * safe)

    return p.tape.record("normalize_columns", value, [(p, vjp)])


def _project_steps_node(p: Node, m: int) -> Node:
    for _ in range(m):
        p = ad.clamp_min(p, 0.0)
        p = _shift_columns_node(p)
    return p


def scq_fast(z_node: Node, c_node: Node, cfg: ScqConfig) -> QuantizeResult:
    """Algorithmic relaxation: solve (C'C + lam I) P = C'Z + lam P_tilde, project.

    Gradients flow to the codebook through both the system matrix and the
    right-hand side, and through the final combination C P; the one-hot
    target contributes nothing (it is a detached constant).
    """
    tape = z_node.tape
    k = c_node.value.shape[1]
    indices, hard_assign = vq_assign(z_node.value, c_node.value)
    c_t = ad.transpose(c_node)
    system = ad.add(ad.matmul(c_t, c_node), tape.leaf(cfg.lam * np.eye(k), op="ridge"))
    rhs = ad.add(
        ad.matmul(c_t, z_node),
        tape.leaf(cfg.lam * hard_assign.weights, op="vq_target"),
    )
    p = ad.solve_spd(system, rhs)
    p = _project_steps_node(p, cfg.projection_steps)
    min_entry = float(p.value.min())
    if cfg.final_clamp:
        p = ad.clamp_min(p, 0.0)
        p = _normalize_columns_node(p)
        min_entry = float(p.value.min())
    quantized = ad.matmul(c_node, p)
    diff = z_node.value - quantized.value
    return QuantizeResult(
        quantized=quantized,
        decoder_input=quantized,
        assignment=Assignment(weights=p.value, kind=SOFT),
        quant_error=float(np.mean(diff * diff)),
        min_entry=min_entry,
        perplexity=perplexity(p.value),
        indices=indices,
    )


# ---------------------------------------------------------------------------
# Exact variant (active-set QP + implicit differentiation)


def _solve_kkt_face(h, b, free):
    """Equality-constrained minimizer on a face: [[2H_FF, 1],[1', 0]] [q; mu]."""
    s = len(free)
    system = np.zeros((s + 1, s + 1))
    system[:s, :s] = 2.0 * h[np.ix_(free, free)]
    system[:s, s] = 1.0
    system[s, :s] = 1.0
    rhs = np.zeros(s + 1)
    rhs[:s] = 2.0 * b[free]
    rhs[s] = 1.0
    scale = max(1.0, float(np.abs(rhs).max()), float(np.abs(system).max()))
    try:
        sol = np.linalg.solve(system, rhs)
        if not np.all(np.isfinite(sol)) or np.max(np.abs(system @ sol - rhs)) > 1e-8 * scale:
            raise np.linalg.LinAlgError("unreliable face solve")
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(system, rhs, rcond=None)[0]
    return sol[:s], float(sol[s])


def _active_set_column(h, b, start_index):
    """Primal active-set iteration from the vertex e_start; strictly convex H.

    Returns (p, mu, nu, changes). Raises SolverStall after 10K active-set
    changes (K the number of codes).
    """
    k = h.shape[0]
    p = np.zeros(k)
    p[start_index] = 1.0
    free = [int(start_index)]
    cap = 10 * k
    for change in range(1, cap + 1):
        q, mu = _solve_kkt_face(h, b, free)
        if q.min() >= -_FEAS_TOL:
            p = np.zeros(k)
            p[free] = q
            nu = 2.0 * (h @ p - b) + mu
            nu[free] = 0.0
            probe = nu.copy()
            probe[free] = np.inf
            worst = int(np.argmin(probe))
            if not np.isfinite(probe[worst]) or probe[worst] >= -_DUAL_TOL:
                return p, mu, nu, change
            free = sorted(free + [worst])
        else:
            d = q - p[free]
            blockers = d < -_RATIO_TINY
            ratios = np.full(len(free), np.inf)
            ratios[blockers] = p[free][blockers] / -d[blockers]
            hit = int(np.argmin(ratios))
            step = min(float(ratios[hit]), 1.0)
            p[free] = p[free] + step * d
            leaving = free[hit]
            p[leaving] = 0.0
            free.remove(leaving)
            if not free:
                raise SolverStallError("active-set iteration emptied the free set")
    raise SolverStallError(f"exceeded {cap} active-set changes")


@dataclass
class ScqExactSolution:
    """Per-column optima with duals: mu (equality), nu (nonnegativity)."""

    assignment: Assignment
    mu: np.ndarray  # (M,)
    nu: np.ndarray  # (K, M)
    indices: np.ndarray  # (M,) one-hot targets used
    changes: np.ndarray  # (M,) active-set changes spent per column


def scq_exact(z, codes, lam: float) -> ScqExactSolution:
    """Solve the simplex-constrained QP per column to KKT residual <= 1e-10.

    lam = 0 is allowed (the face systems fall back to least-squares when the
    Gram matrix is rank-deficient); lam > 0 gives a unique minimizer.
    """
    z = as_matrix(z, "z")
    codes = as_matrix(codes, "codes")
    lam = float(lam)
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lam must be finite and nonnegative, got {lam}")
    if z.shape[0] != codes.shape[0]:
        raise ShapeMismatchError(f"embedding dims differ: z {z.shape} vs codes {codes.shape}")
    k, m = codes.shape[1], z.shape[1]
    indices, _ = vq_assign(z, codes)
    h = codes.T @ codes + lam * np.eye(k)
    b_all = codes.T @ z
    b_all[indices, np.arange(m)] += lam
    weights = np.empty((k, m))
    mu = np.empty(m)
    nu = np.empty((k, m))
    changes = np.empty(m, dtype=np.int64)
    for col in range(m):
        p, mu_c, nu_c, spent = _active_set_column(h, b_all[:, col], indices[col])
        weights[:, col] = p
        mu[col] = mu_c
        nu[:, col] = nu_c
        changes[col] = spent
    return ScqExactSolution(
        assignment=Assignment(weights=weights, kind=SOFT),
        mu=mu,
        nu=nu,
        indices=indices,
        changes=changes,
    )


@dataclass
class KktResiduals:
    """How far a (p, mu, nu) triple is from the first-order conditions."""

    stationarity: float  # inf-norm of 2(Hp - b) + mu 1 - nu
    primal_gap: float  # |1'p - 1|
    negativity: float  # max(0, -min p)
    dual_violation: float  # max(0, -min nu)
    complementarity: float  # |nu . p|

    def worst(self) -> float:
        return max(
            self.stationarity,
            self.primal_gap,
            self.negativity,
            self.dual_violation,
            self.complementarity,
        )


def kkt_residuals(z, codes, lam, p_tilde, p, mu, nu) -> KktResiduals:
    """Evaluate the KKT system of one column at the given primal/dual point."""
    z = as_vector(z, "z")
    codes = as_matrix(codes, "codes")
    p = as_vector(p, "p")
    p_tilde = as_vector(p_tilde, "p_tilde")
    nu = as_vector(nu, "nu")
    h_p = codes.T @ (codes @ p) + lam * p
    b = codes.T @ z + lam * p_tilde
    stationarity = float(np.max(np.abs(2.0 * (h_p - b) + mu - nu)))
    return KktResiduals(
        stationarity=stationarity,
        primal_gap=abs(float(p.sum()) - 1.0),
        negativity=max(0.0, -float(p.min())),
        dual_violation=max(0.0, -float(nu.min())),
        complementarity=abs(float(nu @ p)),
    )


def scq_objective(z, codes, lam, p_tilde, p) -> float:
    """||z - C p||^2 + lam ||p - p_tilde||^2 for one column."""
    z = as_vector(z, "z")
    p = as_vector(p, "p")
    p_tilde = as_vector(p_tilde, "p_tilde")
    r = z - as_matrix(codes, "codes") @ p
    d = p - p_tilde
    return float(r @ r + lam * (d @ d))


def _reduced_kkt_solve(codes_free, lam, rhs_top, on_singular: str):
    """Solve [[2(C_S'C_S + lam I), 1],[1', 0]] [w; eta] = [rhs_top; 0]."""
    s = codes_free.shape[1]
    system = np.zeros((s + 1, s + 1))
    system[:s, :s] = 2.0 * (codes_free.T @ codes_free + lam * np.eye(s))
    system[:s, s] = 1.0
    system[s, :s] = 1.0
    rhs = np.zeros(s + 1)
    rhs[:s] = rhs_top
    scale = max(1.0, float(np.abs(system).max()), float(np.abs(rhs).max()))
    used_fallback = False
    try:
        sol = np.linalg.solve(system, rhs)
        if not np.all(np.isfinite(sol)) or np.max(np.abs(system @ sol - rhs)) > 1e-6 * scale:
            raise np.linalg.LinAlgError("reduced system unreliable")
    except np.linalg.LinAlgError:
        if on_singular == "raise":
            raise DegenerateActiveSetError(
                "reduced KKT system is singular; derivative undefined on this active set"
            ) from None
        sol = np.linalg.lstsq(system, rhs, rcond=None)[0]
        used_fallback = True
    return sol[:s], used_fallback


def scq_exact_vjp(z, codes, lam, p, duals, upstream, on_singular: str = "raise"):
    """Pull one column's upstream gradient through the KKT implicit function.

    With free set S = {j : p_j > 0}, solve the bordered system
    [[2(C_S'C_S + lam I), 1],[1', 0]] [w; eta] = [upstream_S; 0]; then

        grad_z   = 2 C_S w
        grad_C_S = 2 ((z - C_S p_S) w' - (C_S w) p_S')

    and zero on inactive columns. ``duals`` (mu, nu) are used to verify
    strict complementarity when ``on_singular`` is "raise": an active
    coordinate with a vanishing dual means the derivative is not unique.
    """
    if on_singular not in ("raise", "lstsq"):
        raise ValueError(f"on_singular must be 'raise' or 'lstsq', got {on_singular!r}")
    z = as_vector(z, "z")
    codes = as_matrix(codes, "codes")
    p = as_vector(p, "p")
    upstream = as_vector(upstream, "upstream")
    if p.shape[0] != codes.shape[1] or upstream.shape[0] != p.shape[0]:
        raise ShapeMismatchError("p and upstream must have one entry per code")
    free = np.flatnonzero(p > 0.0)
    if free.size == 0:
        raise DegenerateActiveSetError("no strictly positive entries in p")
    if duals is not None and on_singular == "raise":
        _, nu = duals
        nu = as_vector(nu, "nu")
        active = np.setdiff1d(np.arange(p.shape[0]), free, assume_unique=True)
        if active.size and float(nu[active].min()) < _WEAK_TOL:
            raise DegenerateActiveSetError(
                "weakly active constraint (p_j = 0 with nu_j ~ 0); derivative not unique"
            )
    codes_free = codes[:, free]
    w, _ = _reduced_kkt_solve(codes_free, lam, upstream[free], on_singular)
    grad_z = 2.0 * (codes_free @ w)
    residual = z - codes_free @ p[free]
    grad_c = np.zeros_like(codes)
    grad_c[:, free] = 2.0 * (np.outer(residual, w) - np.outer(codes_free @ w, p[free]))
    return grad_c, grad_z


def scq_exact_quantize(
    z_node: Node, c_node: Node, lam: float, on_singular: str = "lstsq"
) -> QuantizeResult:
    """Tape node for the exact solver; backward runs the per-column KKT vjp.

    Columns whose derivative is not uniquely determined (weakly active
    constraints at the optimum) are reported in ``flagged_columns``; with
    ``on_singular="lstsq"`` their backward pass falls back to the
    least-squares solution of the reduced system instead of raising.
    """
    solution = scq_exact(z_node.value, c_node.value, lam)
    weights = solution.assignment.weights
    z_value = z_node.value.copy()
    codes_value = c_node.value.copy()
    n_cols = weights.shape[1]

    flagged = []
    for col in range(n_cols):
        p_col = weights[:, col]
        nu_col = solution.nu[:, col]
        active = p_col == 0.0
        if active.any() and float(nu_col[active].min()) < _WEAK_TOL:
            flagged.append(col)

    cache: dict = {"u": None}

    def _pull(upstream):
        if cache["u"] is not upstream:
            grad_c = np.zeros_like(codes_value)
            grad_z = np.zeros_like(z_value)
            for col in range(n_cols):
                gc, gz = scq_exact_vjp(
                    z_value[:, col],
                    codes_value,
                    lam,
                    weights[:, col],
                    (solution.mu[col], solution.nu[:, col]),
                    upstream[:, col],
                    on_singular=on_singular,
                )
                grad_c += gc
                grad_z[:, col] = gz
            cache["u"] = upstream
            cache["grad_c"] = grad_c
            cache["grad_z"] = grad_z
        return cache["grad_c"], cache["grad_z"]

    p_node = z_node.tape.record(
        "scq_exact",
        weights,
        [
            (z_node, lambda u: _pull(u)[1]),
            (c_node, lambda u: _pull(u)[0]),
        ],
    )
    quantized = ad.matmul(c_node, p_node)
    diff = z_node.value - quantized.value
    return QuantizeResult(
        quantized=quantized,
        decoder_input=quantized,
        assignment=solution.assignment,
        quant_error=float(np.mean(diff * diff)),
        min_entry=float(weights.min()),
        perplexity=perplexity(weights),
        indices=solution.indices,
        flagged_columns=tuple(flagged),
    )
