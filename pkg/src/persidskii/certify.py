"""Delay-dependent ISS certification via LMI feasibility.

Two quadratic-form assemblies are enforced jointly over shared variables:

* assemble_psi / assemble_psi_delay_free: the compact reporting form in the
  stacked vector (x, phi_d, x_d, w). This is the matrix stored-against and
  re-verified on every certificate.
* an internal completed form: the exact derivative bound of the stored
  functional

      V = x^T P x + 2 sum_i lam_i int_0^{c_i^T x} phi_i
        + int_{t-tau}^t x^T Q x + tau * intint xdot^T S xdot

  over the extended vector (x, phi_d, x_d, v, w, phi_0), where v is the
  window average of x and phi_0 stacks the undelayed channel outputs. The
  delay enters through tau^2 * xdot^T S xdot plus a Wirtinger-type lower
  bound on the window integral of xdot^T S xdot; that pairing is what makes
  feasibility genuinely delay-dependent (the compact form alone is invariant
  under S -> c*S rescaling across delays). Sector multipliers act on both
  the delayed and the undelayed outputs.

certify_iss solves both forms jointly over shared variables, so every
returned certificate re-verifies on the compact assembly and its functional
decreases along unforced trajectories. The feasible set is (up to solver
floors) positively homogeneous in the certificate matrices, so gamma acts
as a relative weight on the disturbance row; absolute gain estimates follow
from (P, gamma) jointly, and delay margins are effectively gamma-robust.
Channels without a usable primitive (state-scheduled gains, unbounded
sector slopes) keep lam_i = 0; lambda_mode="zero" pins every lam_i and
drops the phi_0 rows entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad

from .errors import (
    BracketError,
    CoverageError,
    DimensionError,
    NumericError,
    StructureError,
)
from .lmi import (
    AffineLmi,
    FeasibilityResult,
    FeasibilityStatus,
    block_diag_lmis,
    max_eigenvalue,
    solve_feasibility,
    symmetrize,
)
from .model import PersidskiiSystem

# Delays at or below this are treated as zero and routed to the delay-free form.
TAU_SWITCH = 1e-9
FORMAT_VERSION = 1

_trapz = getattr(np, "trapezoid", None) or np.trapz


# ---------------------------------------------------------------------------
# Assemblies
# ---------------------------------------------------------------------------

def _as_diag(mat, size: int, name: str) -> np.ndarray:
    arr = np.asarray(mat, dtype=float)
    if arr.ndim <= 1:
        arr = np.diag(arr.reshape(-1)) if size else np.zeros((0, 0))
    if arr.shape != (size, size):
        raise DimensionError(f"{name} must be {size}x{size}, got {arr.shape}")
    return arr


def _sector_r(sys: PersidskiiSystem) -> np.ndarray:
    """R = diag(1/sigma_i); infinite sectors contribute 0."""
    sig = sys.sector_sigmas()
    with np.errstate(divide="ignore"):
        r = np.where(np.isinf(sig), 0.0, 1.0 / sig)
    return np.diag(r) if sys.k else np.zeros((0, 0))


def assemble_psi(sys: PersidskiiSystem, P, Q, S, Lam, gamma: float, tau: float) -> np.ndarray:
    """Compact certification matrix in the vector (x, phi_d, x_d, w).

    Blocks: (1,1) He(PA)+Q-S/tau, (1,2) -PB+A^T C^T Lam, (1,3) S/tau,
    (1,4) PD, (2,2) -2 Lam - R, (3,3) -Q-S/tau, (4,4) -gamma^2 I, rest zero.
    Requires tau > 0 (use assemble_psi_delay_free at zero delay).
    """
    if not tau > 0.0:
        raise StructureError("assemble_psi requires tau > 0; use the delay-free form")
    if not gamma > 0.0:
        raise StructureError("gamma must be positive")
    n, k, m = sys.n, sys.k, sys.m
    P = _as_diag(P, n, "P")
    Q = symmetrize(np.asarray(Q, dtype=float).reshape(n, n))
    S = symmetrize(np.asarray(S, dtype=float).reshape(n, n))
    Lam = _as_diag(Lam, k, "Lambda")
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    R = _sector_r(sys)
    s_over_tau = S / tau

    dim = 2 * n + k + m
    psi = np.zeros((dim, dim))
    ix = slice(0, n)
    ip = slice(n, n + k)
    id_ = slice(n + k, 2 * n + k)
    iw = slice(2 * n + k, dim)
    psi[ix, ix] = P @ A + A.T @ P + Q - s_over_tau
    psi[ix, ip] = -P @ B + A.T @ C.T @ Lam
    psi[ix, id_] = s_over_tau
    psi[ix, iw] = P @ D
    psi[ip, ip] = -2.0 * Lam - R
    psi[id_, id_] = -Q - s_over_tau
    psi[iw, iw] = -(gamma ** 2) * np.eye(m)
    return symmetrize(psi + np.triu(psi, 1).T)


def assemble_psi_delay_free(sys: PersidskiiSystem, P, Lam, gamma: float) -> np.ndarray:
    """Zero-delay certification matrix in the vector (x, phi, w)."""
    if not gamma > 0.0:
        raise StructureError("gamma must be positive")
    n, k, m = sys.n, sys.k, sys.m
    P = _as_diag(P, n, "P")
    Lam = _as_diag(Lam, k, "Lambda")
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    R = _sector_r(sys)
    dim = n + k + m
    psi = np.zeros((dim, dim))
    ix, ip, iw = slice(0, n), slice(n, n + k), slice(n + k, dim)
    psi[ix, ix] = P @ A + A.T @ P
    psi[ix, ip] = -P @ B + A.T @ C.T @ Lam
    psi[ix, iw] = P @ D
    psi[ip, ip] = -2.0 * Lam - R
    psi[iw, iw] = -(gamma ** 2) * np.eye(m)
    return symmetrize(psi + np.triu(psi, 1).T)


def _lam_eligible(sys: PersidskiiSystem) -> np.ndarray:
    """Channels whose primitive term is usable as a Lyapunov ingredient.

    Needs a finite sector slope (the undelayed multiplier row closes through
    -2 M0 / sigma) and a path-independent primitive, which state-scheduled
    gains lack.
    """
    out = np.zeros(sys.k, dtype=bool)
    for i, nl in enumerate(sys.nonlinearities):
        out[i] = math.isfinite(nl.sigma) and nl.kind != "bounded_gain"
    return out


def _assemble_completed(sys: PersidskiiSystem, P, Q, S, Md, M0, Lam,
                        gamma: float, tau: float,
                        A_override: Optional[np.ndarray] = None,
                        phi0_idx: Optional[Sequence[int]] = None) -> np.ndarray:
    """Exact derivative bound of the stored functional at delay tau.

    Signal vector (x, phi_d, x_d, v, w, phi_0): v is the average of x over
    the delay window and phi_0 collects the undelayed outputs of the channels
    listed in phi0_idx (default: every channel with a usable primitive).
    Md multiplies the sector bound at the delayed output, M0 at the undelayed
    one. The delayed-energy derivative contributes tau^2 * xdot^T S xdot,
    Schur-expanded through xdot = A x - B phi_d + D w, minus a Wirtinger-type
    lower bound on the window integral of xdot^T S xdot.
    """
    n, k, m = sys.n, sys.k, sys.m
    A = sys.A if A_override is None else A_override
    B, C, D = sys.B, sys.C, sys.D
    P = _as_diag(P, n, "P")
    Q = symmetrize(np.asarray(Q, dtype=float).reshape(n, n))
    S = symmetrize(np.asarray(S, dtype=float).reshape(n, n))
    Md = _as_diag(Md, k, "M_d")
    M0 = _as_diag(M0, k, "M_0")
    Lam = _as_diag(Lam, k, "Lambda")
    R = _sector_r(sys)
    if phi0_idx is None:
        idx = [int(i) for i in np.nonzero(_lam_eligible(sys))[0]]
    else:
        idx = [int(i) for i in phi0_idx]
    kf = len(idx)
    dim = 3 * n + k + m + kf
    ix = slice(0, n)
    ip = slice(n, n + k)
    id_ = slice(n + k, 2 * n + k)
    iv = slice(2 * n + k, 3 * n + k)
    iw = slice(3 * n + k, 3 * n + k + m)
    i0 = slice(3 * n + k + m, dim)

    psi = np.zeros((dim, dim))
    psi[ix, ix] = P @ A + A.T @ P + Q - 4.0 * S
    psi[ix, ip] = -P @ B
    psi[ix, id_] = -2.0 * S
    psi[ix, iv] = 6.0 * S
    psi[ix, iw] = P @ D
    psi[ip, ip] = -2.0 * Md @ R
    psi[ip, id_] = Md @ C
    psi[id_, id_] = -Q - 4.0 * S
    psi[id_, iv] = 6.0 * S
    psi[iv, iv] = -12.0 * S
    psi[iw, iw] = -(gamma ** 2) * np.eye(m)
    if kf:
        Cf = C[idx, :]
        LCf = Lam[np.ix_(idx, idx)] @ Cf
        M0f = M0[np.ix_(idx, idx)]
        psi[ix, i0] = (LCf @ A).T + Cf.T @ M0f
        psi[ip, i0] = -(LCf @ B).T
        psi[iw, i0] = (LCf @ D).T
        psi[i0, i0] = -2.0 * M0f @ R[np.ix_(idx, idx)]
    psi = symmetrize(psi + np.triu(psi, 1).T)
    E = np.zeros((n, dim))
    E[:, ix] = A
    E[:, ip] = -B
    E[:, iw] = D
    return psi + (tau ** 2) * (E.T @ S @ E)


def _assemble_completed_delay_free(sys: PersidskiiSystem, P, M, Lam, gamma: float,
                                   A_override: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-delay derivative bound in (x, phi, w).

    The delayed and undelayed outputs coincide, so a single multiplier M
    covers the sector bound. Lam=None pins the primitive weights to zero
    (used where they would turn bilinear, e.g. gain synthesis).
    """
    n, k, m = sys.n, sys.k, sys.m
    A = sys.A if A_override is None else A_override
    B, C, D = sys.B, sys.C, sys.D
    P = _as_diag(P, n, "P")
    M = _as_diag(M, k, "M")
    Lam = np.zeros((k, k)) if Lam is None else _as_diag(Lam, k, "Lambda")
    R = _sector_r(sys)
    dim = n + k + m
    psi = np.zeros((dim, dim))
    ix, ip, iw = slice(0, n), slice(n, n + k), slice(n + k, dim)
    LC = Lam @ C
    psi[ix, ix] = P @ A + A.T @ P
    psi[ix, ip] = -P @ B + C.T @ M + (LC @ A).T
    psi[ix, iw] = P @ D
    psi[ip, ip] = -(LC @ B + (LC @ B).T) - 2.0 * M @ R
    psi[ip, iw] = LC @ D
    psi[iw, iw] = -(gamma ** 2) * np.eye(m)
    return symmetrize(psi + np.triu(psi, 1).T)


# ---------------------------------------------------------------------------
# Variable layout and LMI construction
# ---------------------------------------------------------------------------

def vech_indices(n: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def mat_from_vech(v: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    for val, (i, j) in zip(v, vech_indices(n)):
        out[i, j] = val
        out[j, i] = val
    return out


@dataclass(frozen=True)
class _Layout:
    n: int
    k: int
    p: slice
    q: Optional[slice]
    s: Optional[slice]
    m: slice
    m0: Optional[slice]
    lam: Optional[slice]
    lam_idx: tuple
    n_vars: int
    tags: tuple

    def unpack(self, x: np.ndarray):
        n, k = self.n, self.k
        P = np.diag(x[self.p])
        Q = mat_from_vech(x[self.q], n) if self.q is not None else None
        S = mat_from_vech(x[self.s], n) if self.s is not None else None
        Md = np.diag(x[self.m]) if k else np.zeros((0, 0))
        M0 = np.zeros((k, k))
        Lam = np.zeros((k, k))
        idx = list(self.lam_idx)
        if self.m0 is not None and idx:
            M0[idx, idx] = x[self.m0]
        if self.lam is not None and idx:
            Lam[idx, idx] = x[self.lam]
        return P, Q, S, Md, M0, Lam


def _make_layout(n: int, k: int, lam_idx: Sequence[int], lambda_mode: str,
                 delayed: bool = True) -> _Layout:
    nq = n * (n + 1) // 2
    tags: List[str] = []
    p = slice(0, n)
    tags += [f"P[{i}]" for i in range(n)]
    q = s = None
    end = n
    if delayed:
        # Q, S only enter the delayed functional; the delay-free problem
        # stays small without them
        q = slice(end, end + nq)
        tags += [f"Q[{i},{j}]" for i, j in vech_indices(n)]
        s = slice(end + nq, end + 2 * nq)
        tags += [f"S[{i},{j}]" for i, j in vech_indices(n)]
        end += 2 * nq
    m = slice(end, end + k)
    tags += [f"M[{i}]" for i in range(k)]
    end += k
    m0 = lam = None
    kf = len(lam_idx)
    if lambda_mode == "free" and kf:
        if delayed:
            # at zero delay the two sector multipliers merge into M
            m0 = slice(end, end + kf)
            tags += [f"M0[{i}]" for i in lam_idx]
            end += kf
        lam = slice(end, end + kf)
        tags += [f"Lambda[{i}]" for i in lam_idx]
        end += kf
    return _Layout(n, k, p, q, s, m, m0, lam, tuple(lam_idx), end, tuple(tags))


def _affine_from_fn(layout: _Layout, fn: Callable[[np.ndarray], np.ndarray]) -> AffineLmi:
    """Extract the affine form of fn(x) (affine by construction) by unit evaluation."""
    zero = np.zeros(layout.n_vars)
    f0 = fn(zero)
    coeffs = np.empty((layout.n_vars, *f0.shape))
    for i in range(layout.n_vars):
        e = np.zeros(layout.n_vars)
        e[i] = 1.0
        coeffs[i] = fn(e) - f0
    return AffineLmi(f0, coeffs, layout.tags)


def _certification_lmi(sys: PersidskiiSystem, gamma: float, tau: float,
                       lambda_mode: str) -> Tuple[AffineLmi, _Layout]:
    """Joint LMI: completed form, compact form, and positivity side blocks.

    Only P > 0 is imposed, never a unit lower bound: the compact form caps
    the Lyapunov weight of a strongly-driven channel (its phi_d diagonal is
    -2 Lam - R with no free multiplier), so P must stay free to shrink.
    Absolute-scale anchoring is left to callers that need it (gain
    synthesis pads its own identity block).

    For gamma > 1 the disturbance rows are congruence-scaled by 1/gamma
    (assembled with D/gamma at level 1), keeping the constant block O(1) so
    the strictness margin never inflates with gamma^2. The witness is shared,
    and un-scaling the rows can only push the compact-form margin further
    negative, so stored certificates remain valid as-is.
    """
    n, k = sys.n, sys.k
    delayed = tau > TAU_SWITCH
    gs = max(1.0, float(gamma))
    if gs > 1.0 and sys.m:
        sys = replace(sys, D=sys.D / gs)
        gamma = gamma / gs
    if lambda_mode == "free":
        idx = tuple(int(i) for i in np.nonzero(_lam_eligible(sys))[0])
    else:
        idx = ()
    layout = _make_layout(n, k, idx, lambda_mode, delayed=delayed)

    def build(x: np.ndarray) -> np.ndarray:
        P, Q, S, Md, M0, Lam = layout.unpack(x)
        blocks = []
        if delayed:
            blocks.append(
                _assemble_completed(sys, P, Q, S, Md, M0, Lam, gamma, tau, phi0_idx=idx)
            )
            blocks.append(assemble_psi(sys, P, Q, S, Lam, gamma, tau))
        else:
            blocks.append(_assemble_completed_delay_free(sys, P, Md, Lam, gamma))
            blocks.append(assemble_psi_delay_free(sys, P, Lam, gamma))
        blocks.append(-P)
        if delayed:
            blocks.append(-Q)
            blocks.append(-S)
        if k:
            blocks.append(-Md)
        if idx:
            if layout.m0 is not None:
                blocks.append(-M0[np.ix_(idx, idx)])
            blocks.append(-Lam[np.ix_(idx, idx)])
        dims = [b.shape[0] for b in blocks]
        total = sum(dims)
        out = np.zeros((total, total))
        ofs = 0
        for b, d in zip(blocks, dims):
            out[ofs:ofs + d, ofs:ofs + d] = b
            ofs += d
        return out

    return _affine_from_fn(layout, build), layout


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IssCertificate:
    """A feasible point of the certification LMI, stored matrix-wise.

    margin is lambda_max of the compact assembly at these matrices, recomputed
    by eigendecomposition (never the solver's own objective value).
    """

    P: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    Lam: np.ndarray
    gamma: float
    tau: float
    margin: float
    eps_strict: float
    meta: dict

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        object.__setattr__(self, "Q", symmetrize(self.Q))
        object.__setattr__(self, "S", symmetrize(self.S))
        object.__setattr__(self, "Lam", np.asarray(self.Lam, dtype=float))

    def validate(self) -> None:
        n = self.P.shape[0]
        if not np.allclose(self.P, np.diag(np.diag(self.P))):
            raise StructureError("P must be diagonal")
        if np.diag(self.P).min(initial=np.inf) <= 0:
            raise StructureError("P diagonal must be positive")
        for name, mat in (("Q", self.Q), ("S", self.S)):
            if mat.shape != (n, n):
                raise DimensionError(f"{name} must be {n}x{n}")
            if np.linalg.eigvalsh(mat)[0] <= 0:
                raise StructureError(f"{name} must be positive definite")
        if self.Lam.size and (np.diag(self.Lam) < 0).any():
            raise StructureError("Lambda diagonal must be nonnegative")
        if not self.margin <= -self.eps_strict:
            raise StructureError(
                f"certificate margin {self.margin:.3e} above -eps {-self.eps_strict:.3e}"
            )

    def reverify(self, sys: PersidskiiSystem) -> float:
        """Recompute the compact-form margin against a system."""
        if self.tau > TAU_SWITCH:
            return max_eigenvalue(
                assemble_psi(sys, self.P, self.Q, self.S, self.Lam, self.gamma, self.tau)
            )
        return max_eigenvalue(assemble_psi_delay_free(sys, self.P, self.Lam, self.gamma))

    def to_json_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "n": int(self.P.shape[0]),
            "k": int(self.Lam.shape[0]),
            "P_diag": np.diag(self.P).tolist(),
            "Q": self.Q.tolist(),
            "S": self.S.tolist(),
            "Lambda_diag": np.diag(self.Lam).tolist() if self.Lam.size else [],
            "gamma": float(self.gamma),
            "tau": float(self.tau),
            "margin": float(self.margin),
            "eps_strict": float(self.eps_strict),
            "meta": {k: v for k, v in self.meta.items() if isinstance(v, (str, int, float, bool))},
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json_dict(d: dict) -> "IssCertificate":
        if d.get("format_version") != FORMAT_VERSION:
            raise StructureError(f"unsupported certificate format_version {d.get('format_version')}")
        k = int(d["k"])
        lam = np.diag(np.asarray(d["Lambda_diag"], dtype=float)) if k else np.zeros((0, 0))
        return IssCertificate(
            P=np.diag(np.asarray(d["P_diag"], dtype=float)),
            Q=np.asarray(d["Q"], dtype=float),
            S=np.asarray(d["S"], dtype=float),
            Lam=lam,
            gamma=float(d["gamma"]),
            tau=float(d["tau"]),
            margin=float(d["margin"]),
            eps_strict=float(d["eps_strict"]),
            meta=dict(d.get("meta", {})),
        )

    @staticmethod
    def load(path) -> "IssCertificate":
        with open(path) as fh:
            return IssCertificate.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class CertifyOutcome:
    status: FeasibilityStatus
    certificate: Optional[IssCertificate]
    result: FeasibilityResult

    @property
    def feasible(self) -> bool:
        return self.status is FeasibilityStatus.FEASIBLE


def certify_iss(sys: PersidskiiSystem, gamma: float, tau: Optional[float] = None,
                lambda_mode: str = "free") -> CertifyOutcome:
    """Decide delay-dependent ISS with gain gamma at delay tau (default: sys.tau).

    Inconclusive solver outcomes are reported as such, never mapped to
    Infeasible. On success the certificate re-verifies on the compact assembly
    and its functional decreases along unforced trajectories. gamma is a
    relative disturbance weight (the feasible set is scale-invariant up to
    solver floors), so delay margins are effectively gamma-robust.
    """
    if not gamma > 0.0:
        raise StructureError("gamma must be positive")
    tau = sys.tau if tau is None else float(tau)
    if tau < 0.0 or not math.isfinite(tau):
        raise StructureError("tau must be finite and nonnegative")
    if lambda_mode not in ("zero", "free"):
        raise StructureError(f"unknown lambda_mode '{lambda_mode}'")

    lmi, layout = _certification_lmi(sys, gamma, tau, lambda_mode)
    res = solve_feasibility(lmi)
    if res.status is not FeasibilityStatus.FEASIBLE:
        return CertifyOutcome(res.status, None, res)

    P, Q, S, Md, M0, Lam = layout.unpack(res.witness)
    n = sys.n
    if tau <= TAU_SWITCH:
        # the delay-free functional has no Q, S terms; store inert identities
        Q = np.eye(n)
        S = np.eye(n)
        compact = assemble_psi_delay_free(sys, P, Lam, gamma)
    else:
        compact = assemble_psi(sys, P, Q, S, Lam, gamma, tau)
    margin = max_eigenvalue(compact)
    # strictness threshold tied to the solved problem's scale
    eps_used = min(res.eps_strict, lmi.eps_strict)
    cert = IssCertificate(
        P=P, Q=Q, S=S, Lam=Lam, gamma=gamma, tau=tau, margin=margin,
        eps_strict=eps_used,
        meta={
            "solver": res.diagnostic,
            "solver_iterations": res.solver_iterations,
            "joint_margin": float(res.margin),
            "multiplier_M_diag": np.diag(Md).tolist() if Md.size else [],
            "multiplier_M0_diag": np.diag(M0).tolist() if M0.size else [],
            "lambda_mode": lambda_mode,
        },
    )
    cert.validate()
    return CertifyOutcome(FeasibilityStatus.FEASIBLE, cert, res)


# ---------------------------------------------------------------------------
# Delay margin bisection and region sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TauMaxResult:
    tau_max: float
    certificate: IssCertificate
    iterations: int
    bracket: Tuple[float, float]
    inconclusive_count: int


def tau_max_bisection(sys: PersidskiiSystem, gamma: float, tau_lo: float, tau_hi: float,
                      tol: float = 1e-6, lambda_mode: str = "free") -> TauMaxResult:
    """Largest certifiable delay in [tau_lo, tau_hi] to absolute tolerance tol.

    Requires a valid bracket: feasible at tau_lo, infeasible at tau_hi.
    The returned tau_max is the certified (feasible) end of the final bracket,
    with its certificate. Inconclusive solves are counted and treated as
    not-certified (conservative).
    """
    if not (0.0 <= tau_lo < tau_hi):
        raise BracketError(f"need 0 <= tau_lo < tau_hi, got [{tau_lo}, {tau_hi}]")
    if tol <= 0:
        raise BracketError("tol must be positive")

    inconclusive = 0

    def probe(tau: float) -> CertifyOutcome:
        nonlocal inconclusive
        out = certify_iss(sys, gamma, tau=tau, lambda_mode=lambda_mode)
        if out.status is FeasibilityStatus.INCONCLUSIVE:
            inconclusive += 1
        return out

    lo_out = probe(tau_lo)
    if not lo_out.feasible:
        raise BracketError(
            f"tau_lo={tau_lo} is not certifiable at gamma={gamma} (status {lo_out.status.value})"
        )
    hi_out = probe(tau_hi)
    if hi_out.feasible:
        raise BracketError(
            f"tau_hi={tau_hi} is still certifiable at gamma={gamma}; increase the bracket"
        )

    lo, hi = tau_lo, tau_hi
    best_cert = lo_out.certificate
    iters = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        out = probe(mid)
        if out.feasible:
            lo = mid
            best_cert = out.certificate
        else:
            hi = mid
        iters += 1
        if iters > 200:
            raise BracketError("bisection failed to converge in 200 iterations")
    # monotonicity guard: the boundary just below tau_max must still certify;
    # if it does not, feasibility is not monotone in tau and the bisection
    # result is untrustworthy, so fall back to a dense scan from tau_lo
    guard_tau = max(tau_lo, lo - tol)
    if guard_tau < lo and not probe(guard_tau).feasible:
        scan_tau = tau_lo
        best_cert = lo_out.certificate
        steps = min(int(math.ceil((tau_hi - tau_lo) / tol)), 100000)
        for k in range(1, steps + 1):
            t_k = min(tau_lo + k * tol, tau_hi)
            out = probe(t_k)
            iters += 1
            if not out.feasible:
                break
            scan_tau = t_k
            best_cert = out.certificate
        return TauMaxResult(scan_tau, best_cert, iters, (scan_tau, scan_tau + tol), inconclusive)
    return TauMaxResult(lo, best_cert, iters, (lo, hi), inconclusive)


@dataclass(frozen=True)
class RegionEntry:
    gamma: float
    tau_boundary: Optional[float]
    status: str  # "boundary" | "infeasible_at_zero" | "exceeds_cap" | "inconclusive"


@dataclass(frozen=True)
class FeasibilityRegion:
    sigma: float
    entries: Tuple[RegionEntry, ...]
    tau_tol: float

    def boundaries(self) -> np.ndarray:
        return np.array(
            [e.tau_boundary if e.tau_boundary is not None else np.nan for e in self.entries]
        )


def region_sweep(sys_family: Callable[[float], PersidskiiSystem],
                 sigma_list: Sequence[float], gamma_grid: Sequence[float],
                 tau_tol: float = 1e-4, tau_cap: float = 10.0,
                 tau_seed: float = 1e-4, lambda_mode: str = "free") -> List[FeasibilityRegion]:
    """Feasible-delay boundary tau(gamma) for each sector scaling sigma.

    For each (sigma, gamma): certify at zero delay; if infeasible the entry is
    empty, otherwise the boundary is bracketed by doubling from tau_seed and
    bisected to tau_tol (capped at tau_cap).
    """
    regions: List[FeasibilityRegion] = []
    for sigma in sigma_list:
        sys = sys_family(float(sigma))
        entries: List[RegionEntry] = []
        for gamma in gamma_grid:
            gamma = float(gamma)
            base = certify_iss(sys, gamma, tau=0.0, lambda_mode=lambda_mode)
            if base.status is FeasibilityStatus.INCONCLUSIVE:
                entries.append(RegionEntry(gamma, None, "inconclusive"))
                continue
            if not base.feasible:
                entries.append(RegionEntry(gamma, None, "infeasible_at_zero"))
                continue
            lo, hi = 0.0, tau_seed
            capped = True
            while hi <= tau_cap:
                out = certify_iss(sys, gamma, tau=hi, lambda_mode=lambda_mode)
                if out.feasible:
                    lo = hi
                    hi *= 2.0
                else:
                    capped = False
                    break
            if capped:
                entries.append(RegionEntry(gamma, tau_cap, "exceeds_cap"))
                continue
            # bisect (lo feasible or zero, hi infeasible)
            while hi - lo > tau_tol:
                mid = 0.5 * (lo + hi)
                if mid <= TAU_SWITCH:
                    break
                out = certify_iss(sys, gamma, tau=mid, lambda_mode=lambda_mode)
                if out.feasible:
                    lo = mid
                else:
                    hi = mid
            entries.append(RegionEntry(gamma, lo, "boundary"))
        regions.append(FeasibilityRegion(float(sigma), tuple(entries), tau_tol))
    return regions


def write_region_csv(regions: Sequence[FeasibilityRegion], path) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["sigma", "gamma", "tau_boundary_s", "status"])
        for region in regions:
            for e in region.entries:
                writer.writerow([
                    "%.17g" % region.sigma,
                    "%.17g" % e.gamma,
                    "" if e.tau_boundary is None else "%.17g" % e.tau_boundary,
                    e.status,
                ])


# ---------------------------------------------------------------------------
# Lyapunov-Krasovskii functional evaluation
# ---------------------------------------------------------------------------

def evaluate_lkf(sys: PersidskiiSystem, cert: IssCertificate,
                 times: np.ndarray, states: np.ndarray) -> float:
    """Evaluate V at the segment's final time.

    V = x^T P x + 2 sum_i lam_i int_0^{c_i^T x} phi_i
      + int_{t-tau}^t x^T Q x dtheta
      + tau int_{t-tau}^t (theta - t + tau) xdot^T S xdot dtheta

    (the double integral reduced to its equivalent single-integral weight).
    The segment must cover [t - tau, t]; xdot is reconstructed by finite
    differences on the given grid.
    """
    times = np.asarray(times, dtype=float).ravel()
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] != times.size or states.shape[1] != sys.n:
        raise DimensionError("segment must be (T, n) states over T times")
    if times.size < 2 and cert.tau > 0:
        raise CoverageError("need at least two samples to cover a delay window")
    t_end = times[-1]
    tau = cert.tau

    x_end = states[-1]
    v1 = float(x_end @ cert.P @ x_end)

    v2 = 0.0
    lam_diag = np.diag(cert.Lam) if cert.Lam.size else np.zeros(0)
    for i, nl in enumerate(sys.nonlinearities):
        lam = lam_diag[i] if i < lam_diag.size else 0.0
        if lam == 0.0:
            continue
        if nl.kind == "bounded_gain":
            raise StructureError("state-scheduled channels admit no path-independent integral")
        upper = float(sys.C[i] @ x_end)
        val, _ = quad(lambda s: float(nl.value(s)), 0.0, upper, limit=200)
        v2 += 2.0 * lam * val

    if tau <= TAU_SWITCH:
        return v1 + v2

    t_start = t_end - tau
    slack = 1e-9 * (1.0 + abs(t_end))
    if times[0] > t_start + slack:
        raise CoverageError(
            f"segment starts at {times[0]} but the delay window needs {t_start}"
        )
    # restrict to [t-tau, t], inserting an interpolated sample at the window start
    mask = times >= t_start - slack
    tw = times[mask]
    xw = states[mask]
    if tw[0] > t_start + 1e-15:
        j = int(np.searchsorted(times, t_start))
        lamb = (t_start - times[j - 1]) / (times[j] - times[j - 1])
        x_interp = (1 - lamb) * states[j - 1] + lamb * states[j]
        tw = np.concatenate([[t_start], tw])
        xw = np.vstack([x_interp, xw])

    v3 = float(_trapz(np.einsum("ti,ij,tj->t", xw, cert.Q, xw), tw))

    xdot = np.gradient(xw, tw, axis=0)
    weight = tw - t_start
    integrand = weight * np.einsum("ti,ij,tj->t", xdot, cert.S, xdot)
    v4 = tau * float(_trapz(integrand, tw))
    return v1 + v2 + v3 + v4
