"""Dictionary lifting, EDMD regression, and stability-constrained identification.

A lifted model advances observables g(x) by g+ = A_K g + B_K Phi(C_K g) + D_K u,
where Phi applies designated sector nonlinearities to selected lifted
coordinates (C_K rows are unit selectors fixed at dictionary construction).
Unconstrained EDMD fits (A_K, B_K, D_K) by least squares. The constrained
variant alternates between (i) the same regression subject to the
certification LMI with multipliers frozen, which is one convex program, and
(ii) re-certifying the new model to refresh the multipliers. Certification
happens on the Euler surrogate A_c = (A_K - I)/dt at zero delay, with the
known input treated as the disturbance channel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .certify import CertifyOutcome, certify_iss, _certification_lmi
from .errors import ConfigError, DimensionError, NumericError, StructureError
from .lmi import EPS_COEFF, MAX_SOLVER_ITER, least_infeasible_point
from .model import PersidskiiSystem, SectorNonlinearity


# ---------------------------------------------------------------------------
# Observable dictionary
# ---------------------------------------------------------------------------

def _monomial_exponents(n: int, degree: int) -> List[Tuple[int, ...]]:
    """Exponent tuples of total degree 1..degree in graded lexicographic order."""
    out: List[Tuple[int, ...]] = []

    def fill(prefix, remaining, slots):
        if slots == 1:
            out.append(tuple(prefix + [remaining]))
            return
        for e in range(remaining, -1, -1):
            fill(prefix + [e], remaining - e, slots - 1)

    for d in range(1, degree + 1):
        fill([], d, n)
    return out


@dataclass(frozen=True)
class Dictionary:
    """Ordered observable list g(x) plus the sector-channel wiring.

    terms are simple descriptors: ("state", i), ("monomial", exponents),
    ("rbf", center, width), ("sin", i, freq), ("cos", i, freq). channels pair
    an observable index with the sector nonlinearity it feeds, which fixes
    C_K as unit selector rows.
    """

    n: int
    terms: tuple
    channels: tuple = ()
    includes_state: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise DimensionError("state dimension must be >= 1")
        terms = tuple(tuple(t) if not isinstance(t, tuple) else t for t in self.terms)
        for t in terms:
            kind = t[0]
            if kind == "state":
                if not (0 <= t[1] < self.n):
                    raise StructureError(f"state index {t[1]} out of range")
            elif kind == "monomial":
                if len(t[1]) != self.n or any(e < 0 for e in t[1]):
                    raise StructureError(f"bad monomial exponents {t[1]}")
            elif kind == "rbf":
                if len(t[1]) != self.n:
                    raise StructureError("rbf center dimension mismatch")
                if not float(t[2]) > 0.0:
                    raise ConfigError(f"rbf width must be positive, got {t[2]}")
            elif kind in ("sin", "cos"):
                if not (0 <= t[1] < self.n):
                    raise StructureError(f"trig index {t[1]} out of range")
            else:
                raise StructureError(f"unknown observable kind '{kind}'")
        channels = tuple((int(i), nl) for i, nl in self.channels)
        for i, nl in channels:
            if not (0 <= i < len(terms)):
                raise StructureError(f"channel observable index {i} out of range")
            if not isinstance(nl, SectorNonlinearity):
                raise StructureError("channel needs a SectorNonlinearity")
        if self.includes_state:
            for i in range(self.n):
                if i >= len(terms) or terms[i] != ("state", i):
                    raise StructureError(
                        "includes_state requires the first n observables to be the coordinates"
                    )
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "channels", channels)

    @property
    def n_g(self) -> int:
        return len(self.terms)

    @property
    def k_phi(self) -> int:
        return len(self.channels)

    def selector(self) -> np.ndarray:
        """C_K: one unit row per channel picking its observable."""
        C = np.zeros((self.k_phi, self.n_g))
        for row, (i, _) in enumerate(self.channels):
            C[row, i] = 1.0
        return C

    def phis(self) -> tuple:
        return tuple(nl for _, nl in self.channels)

    def lift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n:
            raise DimensionError(f"state has {x.size} entries, dictionary expects {self.n}")
        out = np.empty(self.n_g)
        for j, t in enumerate(self.terms):
            kind = t[0]
            if kind == "state":
                out[j] = x[t[1]]
            elif kind == "monomial":
                out[j] = np.prod(x ** np.asarray(t[1], dtype=float))
            elif kind == "rbf":
                c = np.asarray(t[1], dtype=float)
                w = float(t[2])
                out[j] = math.exp(-float(np.sum((x - c) ** 2)) / (2.0 * w * w))
            elif kind == "sin":
                out[j] = math.sin(t[2] * x[t[1]])
            else:
                out[j] = math.cos(t[2] * x[t[1]])
        if not np.all(np.isfinite(out)):
            raise NumericError("lifted vector contains NaN or Inf")
        return out

    def lift_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([self.lift(row) for row in X])

    # -- composition --------------------------------------------------------
    @staticmethod
    def identity(n: int) -> "Dictionary":
        return Dictionary(n, tuple(("state", i) for i in range(n)), (), True)

    @staticmethod
    def monomials(n: int, degree: int) -> "Dictionary":
        if degree < 1:
            raise ConfigError("monomial degree must be >= 1")
        terms: List[tuple] = [("state", i) for i in range(n)]
        for e in _monomial_exponents(n, degree):
            if sum(e) >= 2:
                terms.append(("monomial", e))
        return Dictionary(n, tuple(terms), (), True)

    def with_rbf(self, center, width: float) -> "Dictionary":
        t = self.terms + (("rbf", tuple(float(c) for c in center), float(width)),)
        return Dictionary(self.n, t, self.channels, self.includes_state)

    def with_trig(self, index: int, freq: float = 1.0) -> "Dictionary":
        t = self.terms + (("sin", int(index), float(freq)), ("cos", int(index), float(freq)))
        return Dictionary(self.n, t, self.channels, self.includes_state)

    def with_channel(self, obs_index: int, nl: SectorNonlinearity) -> "Dictionary":
        return Dictionary(
            self.n, self.terms, self.channels + ((int(obs_index), nl),), self.includes_state
        )

    # -- serialization -------------------------------------------------------
    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "terms": [list(t) if t[0] != "monomial" else ["monomial", list(t[1])]
                      for t in [self._term_listable(t) for t in self.terms]],
            "channels": [[i, nl.descriptor()] for i, nl in self.channels],
            "includes_state": self.includes_state,
        }

    @staticmethod
    def _term_listable(t: tuple) -> tuple:
        if t[0] == "rbf":
            return ("rbf", list(t[1]), t[2])
        return t

    @staticmethod
    def from_json_dict(d: dict) -> "Dictionary":
        terms = []
        for t in d["terms"]:
            kind = t[0]
            if kind == "monomial":
                terms.append(("monomial", tuple(int(e) for e in t[1])))
            elif kind == "rbf":
                terms.append(("rbf", tuple(float(c) for c in t[1]), float(t[2])))
            elif kind == "state":
                terms.append(("state", int(t[1])))
            else:
                terms.append((kind, int(t[1]), float(t[2])))
        channels = tuple(
            (int(i), SectorNonlinearity.from_descriptor(nd)) for i, nd in d.get("channels", [])
        )
        return Dictionary(int(d["n"]), tuple(terms), channels, bool(d["includes_state"]))


def fit_sector_bound(fn, lo: float, hi: float, n_grid: int = 2001,
                     inflation: float = 1.1) -> float:
    """Numerical slope bound of a scalar map on [lo, hi], inflated for margin."""
    if not hi > lo:
        raise StructureError("need hi > lo")
    s = np.linspace(lo, hi, n_grid)
    v = np.asarray([float(fn(si)) for si in s])
    slopes = np.abs(np.diff(v) / np.diff(s))
    return float(slopes.max() * inflation)


# ---------------------------------------------------------------------------
# Lifted model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LiftedModel:
    """Discrete-time lifted dynamics g+ = A_K g + B_K Phi(C_K g) + D_K u."""

    A_K: np.ndarray
    B_K: np.ndarray
    C_K: np.ndarray
    D_K: np.ndarray
    dt: float
    phis: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_K, dtype=float))
        ng = A.shape[0]
        if A.shape != (ng, ng):
            raise DimensionError("A_K must be square")
        B = np.asarray(self.B_K, dtype=float).reshape(ng, -1)
        C = np.asarray(self.C_K, dtype=float).reshape(-1, ng)
        D = np.asarray(self.D_K, dtype=float).reshape(ng, -1)
        if C.shape[0] != B.shape[1] or len(self.phis) != B.shape[1]:
            raise DimensionError("channel count mismatch between B_K, C_K, phis")
        for row in C:
            ones = np.isclose(row, 1.0)
            if ones.sum() != 1 or not np.allclose(row[~ones], 0.0):
                raise StructureError("C_K rows must be unit selectors")
        if not self.dt > 0:
            raise StructureError("dt must be positive")
        for mat in (A, B, C, D):
            if not np.all(np.isfinite(mat)):
                raise NumericError("lifted matrices contain NaN or Inf")
        object.__setattr__(self, "A_K", A)
        object.__setattr__(self, "B_K", B)
        object.__setattr__(self, "C_K", C)
        object.__setattr__(self, "D_K", D)
        object.__setattr__(self, "phis", tuple(self.phis))

    @property
    def n_g(self) -> int:
        return self.A_K.shape[0]

    @property
    def k_phi(self) -> int:
        return self.B_K.shape[1]

    @property
    def m_u(self) -> int:
        return self.D_K.shape[1]

    @property
    def phi_sectors(self) -> np.ndarray:
        return np.array([nl.sigma for nl in self.phis], dtype=float)

    def phi(self, g: np.ndarray) -> np.ndarray:
        s = self.C_K @ np.asarray(g, dtype=float)
        return np.array([nl.value(s[i]) for i, nl in enumerate(self.phis)])

    def step(self, g: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
        g = np.asarray(g, dtype=float).ravel()
        out = self.A_K @ g
        if self.k_phi:
            out = out + self.B_K @ self.phi(g)
        if u is not None and self.m_u:
            out = out + self.D_K @ np.asarray(u, dtype=float).ravel()
        return out

    def to_json_dict(self) -> dict:
        return {
            "A_K": self.A_K.tolist(),
            "B_K": self.B_K.tolist(),
            "C_K": self.C_K.tolist(),
            "D_K": self.D_K.tolist(),
            "dt": self.dt,
            "phis": [nl.descriptor() for nl in self.phis],
            "meta": {k: v for k, v in self.meta.items()
                     if isinstance(v, (str, int, float, bool))},
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json_dict(d: dict) -> "LiftedModel":
        return LiftedModel(
            A_K=np.asarray(d["A_K"], dtype=float),
            B_K=np.asarray(d["B_K"], dtype=float),
            C_K=np.asarray(d["C_K"], dtype=float),
            D_K=np.asarray(d["D_K"], dtype=float),
            dt=float(d["dt"]),
            phis=tuple(SectorNonlinearity.from_descriptor(nd) for nd in d.get("phis", [])),
            meta=dict(d.get("meta", {})),
        )

    @staticmethod
    def load(path) -> "LiftedModel":
        with open(path) as fh:
            return LiftedModel.from_json_dict(json.load(fh))


def lifted_surrogate(model: LiftedModel) -> PersidskiiSystem:
    """Continuous-time surrogate: the one-step increment divided by dt.

    The known input becomes the disturbance channel, so the certificate's gain
    bounds the input-to-lifted-state response.
    """
    dt = model.dt
    return PersidskiiSystem(
        A=(model.A_K - np.eye(model.n_g)) / dt,
        B=-model.B_K / dt,
        C=model.C_K,
        D=model.D_K / dt,
        tau=0.0,
        nonlinearities=model.phis,
    )


def certify_lifted(model: LiftedModel, gamma: Optional[float] = None) -> CertifyOutcome:
    """Certify the Euler surrogate at zero delay.

    With gamma given, one feasibility decision at that level. Otherwise the
    smallest certifiable level is searched by doubling then bisection (5%
    relative) and the certificate at that level is returned.
    """
    sys_l = lifted_surrogate(model)
    if gamma is not None:
        return certify_iss(sys_l, gamma, 0.0)
    hi = 1.0
    out = certify_iss(sys_l, hi, 0.0)
    doublings = 0
    while not out.feasible and doublings < 20:
        hi *= 4.0
        doublings += 1
        out = certify_iss(sys_l, hi, 0.0)
    if not out.feasible:
        return out
    lo = hi / 4.0 if doublings else 1e-3
    best = out
    while hi - lo > 0.05 * hi:
        mid = math.sqrt(lo * hi)
        probe = certify_iss(sys_l, mid, 0.0)
        if probe.feasible:
            hi, best = mid, probe
        else:
            lo = mid
    return best


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def _design_matrices(dictionary: Dictionary, data):
    """Stack lifted regressors Z = [g, Phi(C g), u] and targets g+ from triples."""
    X, U, Xp = [], [], []
    m_u = None
    for item in data:
        if len(item) != 3:
            raise StructureError("data items must be (x, u, x_next) triples")
        x, u, xp = item
        X.append(np.asarray(x, dtype=float).ravel())
        Xp.append(np.asarray(xp, dtype=float).ravel())
        if u is None:
            uu = np.zeros(0)
        else:
            uu = np.asarray(u, dtype=float).ravel()
        if m_u is None:
            m_u = uu.size
        elif uu.size != m_u:
            raise StructureError("inconsistent input dimension across samples")
        U.append(uu)
    if not X:
        raise StructureError("identification needs at least one sample")
    G = dictionary.lift_many(np.asarray(X))
    Gp = dictionary.lift_many(np.asarray(Xp))
    C_K = dictionary.selector()
    phis = dictionary.phis()
    if dictionary.k_phi:
        S = G @ C_K.T
        Phi = np.column_stack([phis[i].value(S[:, i]) for i in range(len(phis))])
        Z = np.column_stack([G, Phi, np.asarray(U)])
    else:
        Z = np.column_stack([G, np.asarray(U)]) if m_u else G
    return Z, Gp, C_K, phis, int(m_u)


def _gram_cholesky(Z: np.ndarray, Gp: np.ndarray, ridge: float):
    """Return (L, W, regularized) with G = L L^T and W = L^{-1} Z^T Gp."""
    Gm = Z.T @ Z
    c = Z.T @ Gp
    evals = np.linalg.eigvalsh(0.5 * (Gm + Gm.T))
    regularized = bool(evals[0] <= 1e-12 * max(evals[-1], 1.0))
    if regularized:
        Gm = Gm + ridge * np.eye(Gm.shape[0])
    L = np.linalg.cholesky(0.5 * (Gm + Gm.T))
    W = scipy.linalg.solve_triangular(L, c, lower=True)
    return L, W, regularized


def edmd_unconstrained(dictionary: Dictionary, data, dt: float = 1.0,
                       ridge: float = 1e-10) -> LiftedModel:
    """Least-squares fit of (A_K, B_K, D_K) with the channel wiring fixed.

    Rank-deficient regressors are ridge-regularized (flagged in meta) rather
    than failing, so degenerate data still yields a defined model.
    """
    Z, Gp, C_K, phis, m_u = _design_matrices(dictionary, data)
    ng, kp = dictionary.n_g, dictionary.k_phi
    if Z.shape[0] < ng + kp + m_u:
        raise StructureError(
            f"need at least {ng + kp + m_u} samples, got {Z.shape[0]}"
        )
    L, W, regularized = _gram_cholesky(Z, Gp, ridge)
    ThetaT = scipy.linalg.solve_triangular(L.T, W, lower=False)
    model = LiftedModel(
        A_K=ThetaT[:ng].T,
        B_K=ThetaT[ng:ng + kp].T,
        C_K=C_K,
        D_K=ThetaT[ng + kp:].T,
        dt=dt,
        phis=phis,
        meta={"regularized": regularized},
    )
    return model


def prediction_rmse(model: LiftedModel, dictionary: Dictionary, data) -> float:
    """One-step-ahead RMSE in lifted space over all samples and coordinates."""
    Z, Gp, _, _, m_u = _design_matrices(dictionary, data)
    Theta = np.column_stack([model.A_K, model.B_K, model.D_K])
    pred = Z @ Theta.T
    return float(np.sqrt(np.mean((Gp - pred) ** 2)))


# ---------------------------------------------------------------------------
# Constrained identification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentifyConfig:
    max_alternations: int = 100
    conv_tol: float = 1e-8
    gamma_id: float = 1e3
    dt: float = 1.0
    ridge: float = 1e-10


@dataclass(frozen=True)
class IdentificationReport:
    rmse_unconstrained: float
    rmse_constrained: float
    lmi_margin: float
    iterations: int
    converged: bool
    feasible: bool


def _constrained_regression(L, W, dictionary: Dictionary, P: np.ndarray, M: np.ndarray,
                            gamma: float, dt: float, m_u: int) -> Optional[np.ndarray]:
    """Step (i): least squares over Theta subject to the frozen-multiplier LMI.

    Returns Theta^T (cols x N_g) or None when the solver fails. Both the
    completed and the compact delay-free blocks are enforced so the iterate
    stays inside the same feasible set the certification step verifies.
    """
    import cvxpy as cp

    ng, kp = dictionary.n_g, dictionary.k_phi
    cols = ng + kp + m_u
    C_K = dictionary.selector()
    sigmas = np.array([nl.sigma for nl in dictionary.phis()], dtype=float)
    R = np.diag(np.where(np.isinf(sigmas), 0.0, 1.0 / sigmas)) if kp else np.zeros((0, 0))

    ThetaT = cp.Variable((cols, ng))
    A_c = (ThetaT[:ng].T - np.eye(ng)) / dt
    PA = P @ A_c
    # model convention is +B_K Phi; the certification forms carry -B phi
    PB = P @ (-(ThetaT[ng:ng + kp].T) / dt) if kp else None
    PD = P @ (ThetaT[ng + kp:].T / dt) if m_u else None

    def blockmat(rows):
        keep = [r for r in rows if r is not None]
        return cp.bmat(keep)

    gam2 = gamma ** 2
    rows_sound = []
    rows_compact = []
    top_s = [PA + PA.T + np.eye(ng)]
    top_c = [PA + PA.T]
    if kp:
        top_s.append(-PB + C_K.T @ M)
        top_c.append(-PB)
    if m_u:
        top_s.append(PD)
        top_c.append(PD)
    rows_sound.append(top_s)
    rows_compact.append(top_c)
    if kp:
        mid_s = [(-PB + C_K.T @ M).T, -2.0 * M @ R]
        mid_c = [(-PB).T, -R]
        if m_u:
            mid_s.append(np.zeros((kp, m_u)))
            mid_c.append(np.zeros((kp, m_u)))
        rows_sound.append(mid_s)
        rows_compact.append(mid_c)
    if m_u:
        bot_s = [PD.T]
        bot_c = [PD.T]
        if kp:
            bot_s.append(np.zeros((m_u, kp)))
            bot_c.append(np.zeros((m_u, kp)))
        bot_s.append(-gam2 * np.eye(m_u))
        bot_c.append(-gam2 * np.eye(m_u))
        rows_sound.append(bot_s)
        rows_compact.append(bot_c)
    sound = blockmat(rows_sound)
    compact = blockmat(rows_compact)

    dim = ng + kp + m_u
    const_scale = 1.0 + math.sqrt(ng + 2 * m_u * gam2 ** 2 + float(np.sum(R ** 2)))
    eps = EPS_COEFF * const_scale
    constraints = [
        0.5 * (sound + sound.T) << -eps * np.eye(dim),
        0.5 * (compact + compact.T) << -eps * np.eye(dim),
    ]
    objective = cp.Minimize(cp.sum_squares(L.T @ ThetaT - W))
    prob = cp.Problem(objective, constraints)
    try:
        prob.solve(solver=cp.CLARABEL, max_iter=MAX_SOLVER_ITER,
                   tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    except cp.error.SolverError:
        try:
            prob.solve(solver=cp.SCS, eps=1e-9, max_iters=20000)
        except cp.error.SolverError:
            return None
    if ThetaT.value is None or not np.all(np.isfinite(ThetaT.value)):
        return None
    return np.asarray(ThetaT.value, dtype=float)


def _multipliers_from_certificate(cert) -> Tuple[np.ndarray, np.ndarray]:
    M_diag = np.asarray(cert.meta.get("multiplier_M_diag", []), dtype=float)
    return cert.P, np.diag(M_diag) if M_diag.size else np.zeros((0, 0))


def _fallback_multipliers(sys_l: PersidskiiSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Least-infeasible multipliers for an uncertifiable starting model.

    The minimizing point can have a degenerate P; entries are floored and, if
    the whole diagonal is junk, identity multipliers are used instead.
    """
    lmi, layout = _certification_lmi(sys_l, 1.0, 0.0, "zero")
    x, _ = least_infeasible_point(lmi)
    n, k = sys_l.n, sys_l.k
    if x is None:
        return np.eye(n), np.eye(k) if k else np.zeros((0, 0))
    P, _, _, M, _ = layout.unpack(x)
    pd = np.diag(P)
    if pd.max(initial=0.0) <= 0:
        return np.eye(n), np.eye(k) if k else np.zeros((0, 0))
    floor = 1e-6 * pd.max()
    P = np.diag(np.maximum(pd, floor))
    if k:
        md = np.diag(M)
        M = np.diag(np.maximum(md, 1e-6 * max(md.max(initial=0.0), 1.0)))
    return P, M


def identify_constrained(dictionary: Dictionary, data,
                         cfg: IdentifyConfig = IdentifyConfig()
                         ) -> Tuple[LiftedModel, IdentificationReport]:
    """Alternating stability-constrained EDMD.

    Starts from the unconstrained fit, freezes certification multipliers,
    re-solves the regression under the now-affine LMI, re-certifies, and
    repeats until the residual stops moving. The best certified iterate is
    returned; if no iterate certifies, the unconstrained model is returned
    with an infeasible report for diagnosis.
    """
    Z, Gp, C_K, phis, m_u = _design_matrices(dictionary, data)
    ng, kp = dictionary.n_g, dictionary.k_phi
    if Z.shape[0] < ng + kp + m_u:
        raise StructureError(f"need at least {ng + kp + m_u} samples, got {Z.shape[0]}")
    L, W, regularized = _gram_cholesky(Z, Gp, cfg.ridge)

    def to_model(ThetaT, meta=None):
        return LiftedModel(
            A_K=ThetaT[:ng].T, B_K=ThetaT[ng:ng + kp].T, C_K=C_K,
            D_K=ThetaT[ng + kp:].T, dt=cfg.dt, phis=phis,
            meta=meta or {"regularized": regularized},
        )

    ThetaT_u = scipy.linalg.solve_triangular(L.T, W, lower=False)
    model_u = to_model(ThetaT_u)
    rmse_u = prediction_rmse(model_u, dictionary, data)

    out_u = certify_iss(lifted_surrogate(model_u), cfg.gamma_id, 0.0)
    if out_u.feasible:
        P, M = _multipliers_from_certificate(out_u.certificate)
    else:
        P, M = _fallback_multipliers(lifted_surrogate(model_u))

    accepted: List[Tuple[LiftedModel, float, float]] = []
    converged = False
    iterations = 0
    prev_rmse = None
    for _ in range(cfg.max_alternations + 1):
        ThetaT = _constrained_regression(L, W, dictionary, P, M, cfg.gamma_id, cfg.dt, m_u)
        iterations += 1
        if ThetaT is None:
            break
        model_j = to_model(ThetaT)
        out_j = certify_iss(lifted_surrogate(model_j), cfg.gamma_id, 0.0)
        if not out_j.feasible:
            P, M = _fallback_multipliers(lifted_surrogate(model_j))
            continue
        rmse_j = prediction_rmse(model_j, dictionary, data)
        accepted.append((model_j, rmse_j, out_j.certificate.margin))
        P, M = _multipliers_from_certificate(out_j.certificate)
        if prev_rmse is not None and abs(prev_rmse - rmse_j) < cfg.conv_tol:
            converged = True
            break
        prev_rmse = rmse_j

    if not accepted:
        margin_u = out_u.certificate.margin if out_u.certificate else math.inf
        report = IdentificationReport(
            rmse_unconstrained=rmse_u, rmse_constrained=math.inf,
            lmi_margin=margin_u, iterations=iterations,
            converged=False, feasible=False,
        )
        return model_u, report
    best = min(accepted, key=lambda t: t[1])
    report = IdentificationReport(
        rmse_unconstrained=rmse_u, rmse_constrained=best[1],
        lmi_margin=best[2], iterations=iterations,
        converged=converged, feasible=True,
    )
    return best[0], report
