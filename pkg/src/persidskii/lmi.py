"""Affine LMI containers and a deterministic feasibility front-end.

An affine LMI is L(x) = F0 + sum_i x_i * F_i with every F symmetric; the
feasibility question is whether some x makes L(x) negative definite with a
scale-aware strict margin. The solve itself is delegated to CLARABEL (a
deterministic primal-dual interior-point method over the PSD cone) through
cvxpy, with SCS as a fallback; everything around it (canonical form, margins,
post-hoc verification) is handled here so results do not depend on solver
bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericError, StructureError

# Scale-aware strictness: eps_strict = EPS_COEFF * (1 + ||F0||_F).
EPS_COEFF = 1e-8
# Iteration cap forwarded to the solver; hitting it yields Inconclusive.
MAX_SOLVER_ITER = 500
_SYM_TOL = 1e-9


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Return (M + M^T)/2 after validating shape and finiteness."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NumericError("matrix contains NaN or Inf")
    return 0.5 * (mat + mat.T)


def min_eigenvalue(mat: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (real arithmetic only)."""
    sym = symmetrize(mat)
    skew = np.abs(mat - mat.T).max() if np.asarray(mat).size else 0.0
    scale = 1.0 + np.abs(sym).max() if sym.size else 1.0
    if skew > 1e-6 * scale:
        raise StructureError(f"matrix is not symmetric (max skew {skew:.3e})")
    if sym.size == 0:
        raise DimensionError("empty matrix has no eigenvalues")
    return float(np.linalg.eigvalsh(sym)[0])


def max_eigenvalue(mat: np.ndarray) -> float:
    return -min_eigenvalue(-np.asarray(mat, dtype=float))


class FeasibilityStatus(Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class AffineLmi:
    """Canonical affine LMI: L(x) = constant + sum_i x[i] * coeffs[i].

    coeffs has shape (n_vars, dim, dim); structure_tags names each scalar
    variable (used to rebuild structured matrices from a witness).
    """

    constant: np.ndarray
    coeffs: np.ndarray
    structure_tags: tuple[str, ...]

    def __post_init__(self):
        const = symmetrize(self.constant)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 3:
            raise DimensionError("coeffs must be a (n_vars, dim, dim) stack")
        if coeffs.shape[1:] != const.shape:
            raise DimensionError(
                f"coefficient blocks {coeffs.shape[1:]} do not match constant {const.shape}"
            )
        if not np.all(np.isfinite(coeffs)):
            raise NumericError("coefficient stack contains NaN or Inf")
        scale = 1.0 + np.abs(coeffs).max() if coeffs.size else 1.0
        if coeffs.size and np.abs(coeffs - coeffs.transpose(0, 2, 1)).max() > _SYM_TOL * scale:
            raise StructureError("every coefficient block must be symmetric")
        if len(self.structure_tags) != coeffs.shape[0]:
            raise StructureError(
                f"{len(self.structure_tags)} tags for {coeffs.shape[0]} variables"
            )
        object.__setattr__(self, "constant", const)
        object.__setattr__(self, "coeffs", 0.5 * (coeffs + coeffs.transpose(0, 2, 1)))
        object.__setattr__(self, "structure_tags", tuple(self.structure_tags))

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    @property
    def n_vars(self) -> int:
        return self.coeffs.shape[0]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n_vars:
            raise DimensionError(f"witness has {x.size} entries, LMI has {self.n_vars} variables")
        return self.constant + np.tensordot(x, self.coeffs, axes=(0, 0))

    def margin_at(self, x: np.ndarray) -> float:
        """Post-hoc margin lambda_max(L(x)), computed by eigendecomposition."""
        return max_eigenvalue(self.evaluate(x))

    @property
    def eps_strict(self) -> float:
        return EPS_COEFF * (1.0 + float(np.linalg.norm(self.constant, "fro")))


def block_diag_lmis(lmis: Sequence[AffineLmi]) -> AffineLmi:
    """Stack LMIs sharing one variable vector into a single block-diagonal LMI."""
    if not lmis:
        raise StructureError("need at least one LMI to stack")
    n_vars = lmis[0].n_vars
    tags = lmis[0].structure_tags
    for lmi in lmis[1:]:
        if lmi.n_vars != n_vars or lmi.structure_tags != tags:
            raise StructureError("stacked LMIs must share the same variable layout")
    dims = [lmi.dim for lmi in lmis]
    total = sum(dims)
    constant = np.zeros((total, total))
    coeffs = np.zeros((n_vars, total, total))
    ofs = 0
    for lmi, d in zip(lmis, dims):
        constant[ofs:ofs + d, ofs:ofs + d] = lmi.constant
        coeffs[:, ofs:ofs + d, ofs:ofs + d] = lmi.coeffs
        ofs += d
    return AffineLmi(constant, coeffs, tags)


@dataclass(frozen=True)
class FeasibilityResult:
    status: FeasibilityStatus
    witness: Optional[np.ndarray]
    margin: Optional[float]
    eps_strict: float
    solver_iterations: int = -1
    diagnostic: str = ""

    @property
    def feasible(self) -> bool:
        return self.status is FeasibilityStatus.FEASIBLE


def _solve_cvxpy(lmi: AffineLmi, objective: Optional[np.ndarray], eps: float):
    """Returns (status_str, x_value, iterations, solver_name). Raises on total failure."""
    import cvxpy as cp

    d = lmi.dim
    x = cp.Variable(lmi.n_vars) if lmi.n_vars else None
    if lmi.n_vars:
        cols = sp.csc_matrix(
            np.stack([lmi.coeffs[i].ravel(order="F") for i in range(lmi.n_vars)], axis=1)
        )
        lin = cp.reshape(cols @ x, (d, d), order="F")
        expr = cp.Constant(lmi.constant) + 0.5 * (lin + lin.T)
    else:
        expr = cp.Constant(lmi.constant)

    scale = 1.0 + float(np.linalg.norm(lmi.constant, "fro"))
    if objective is None:
        t = cp.Variable()
        constraints = [expr << t * np.eye(d), t >= -1e3 * scale]
        prob = cp.Problem(cp.Minimize(t), constraints)
    else:
        c = np.asarray(objective, dtype=float).ravel()
        if c.size != lmi.n_vars:
            raise DimensionError("objective length does not match variable count")
        constraints = [expr << -eps * np.eye(d)]
        prob = cp.Problem(cp.Minimize(c @ x), constraints)

    solver_kwargs = dict(
        max_iter=MAX_SOLVER_ITER,
        tol_gap_abs=1e-11,
        tol_gap_rel=1e-11,
        tol_feas=1e-11,
    )
    try:
        prob.solve(solver=cp.CLARABEL, **solver_kwargs)
        solver = "CLARABEL"
    except cp.error.SolverError:
        prob.solve(solver=cp.SCS, eps=1e-9, max_iters=20000)
        solver = "SCS"
    iters = -1
    if prob.solver_stats is not None and prob.solver_stats.num_iters is not None:
        iters = int(prob.solver_stats.num_iters)
    xval = None
    if lmi.n_vars and x.value is not None:
        xval = np.asarray(x.value, dtype=float).copy()
    elif lmi.n_vars == 0:
        xval = np.zeros(0)
    return prob.status, xval, iters, solver


def least_infeasible_point(lmi: AffineLmi) -> tuple[Optional[np.ndarray], Optional[float]]:
    """Minimize lambda_max(L(x)) and return (x, margin) even when the margin is positive.

    Unlike solve_feasibility this keeps the witness regardless of the verdict,
    which is what iterative schemes need for a starting point. Returns
    (None, None) only when the solver fails outright.
    """
    if lmi.n_vars == 0:
        return np.zeros(0), max_eigenvalue(lmi.constant)
    try:
        raw_status, xval, _, _ = _solve_cvxpy(lmi, None, lmi.eps_strict)
    except Exception:
        return None, None
    if xval is None or not np.all(np.isfinite(xval)):
        return None, None
    return xval, lmi.margin_at(xval)


def solve_feasibility(
    lmi: AffineLmi,
    objective: Optional[np.ndarray] = None,
) -> FeasibilityResult:
    """Decide strict feasibility L(x) <= -eps_strict*I, optionally minimizing c^T x.

    The verdict never relies on the solver's own status alone: the returned
    margin is recomputed from the witness by eigendecomposition, and Feasible
    is claimed only when that margin clears -eps_strict. Solver failures and
    iteration-cap hits surface as Inconclusive, never as Infeasible.
    """
    eps = lmi.eps_strict

    if lmi.n_vars == 0:
        margin = max_eigenvalue(lmi.constant)
        status = FeasibilityStatus.FEASIBLE if margin <= -eps else FeasibilityStatus.INFEASIBLE
        return FeasibilityResult(status, np.zeros(0), margin, eps, 0, "constant LMI")

    try:
        raw_status, xval, iters, solver = _solve_cvxpy(lmi, objective, eps)
    except Exception as exc:  # solver totally unavailable or crashed
        return FeasibilityResult(
            FeasibilityStatus.INCONCLUSIVE, None, None, eps, -1, f"solver failure: {exc}"
        )

    ok_statuses = ("optimal", "optimal_inaccurate")
    infeasible_statuses = ("infeasible", "infeasible_inaccurate")

    if raw_status in ok_statuses and xval is not None and np.all(np.isfinite(xval)):
        margin = lmi.margin_at(xval)
        if margin <= -eps:
            return FeasibilityResult(
                FeasibilityStatus.FEASIBLE, xval, margin, eps, iters, f"{solver}:{raw_status}"
            )
        if objective is None:
            # Converged min of lambda_max stayed above the strict threshold.
            return FeasibilityResult(
                FeasibilityStatus.INFEASIBLE, None, margin, eps, iters, f"{solver}:{raw_status}"
            )
        return FeasibilityResult(
            FeasibilityStatus.INCONCLUSIVE, None, margin, eps, iters,
            f"{solver}:{raw_status} witness missed margin",
        )
    if raw_status in infeasible_statuses:
        return FeasibilityResult(
            FeasibilityStatus.INFEASIBLE, None, None, eps, iters, f"{solver}:{raw_status}"
        )
    return FeasibilityResult(
        FeasibilityStatus.INCONCLUSIVE, None, None, eps, iters, f"{solver}:{raw_status}"
    )
