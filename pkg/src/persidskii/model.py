"""Generalized Persidskii systems with delayed sector nonlinearities.

The dynamics are

    xdot(t) = A x(t) - sum_i b_i phi_i(c_i^T x(t - tau)) + D w(t) [+ E u(t)]

where every phi_i lies in the one-sided sector [0, sigma_i]:
phi(s) * (s - phi(s)/sigma) >= 0 for all s. E is an optional known-input
matrix (it plays no role in certification; known inputs cancel in observer
error dynamics and are simply forwarded by the simulator).

Integration is fixed-step RK4 with the delayed argument reconstructed by
linear interpolation from a history buffer.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import (
    CoverageError,
    DimensionError,
    DivergenceError,
    NumericError,
    SectorError,
    StructureError,
)

BLOWUP_GUARD = 1e9
SECTOR_TOL = 1e-9


# ---------------------------------------------------------------------------
# Sector nonlinearities
# ---------------------------------------------------------------------------

class SectorNonlinearity:
    """A scalar nonlinearity declared to lie in the sector [0, sigma].

    kind is one of: linear, tanh, saturation, dead_zone, relay, custom,
    bounded_gain. relay needs sigma = inf (its slope at the origin is
    unbounded). bounded_gain is a state-scheduled linear channel
    phi(s) = sigma * s * (sat(a^T x_d, glim) + glim) / (2 glim), whose
    effective slope stays in [0, sigma] for every delayed state; it is how
    bilinear product terms are absorbed exactly on an operating box.
    """

    def __init__(self, kind: str, sigma: float, params: Optional[dict] = None,
                 func: Optional[Callable] = None):
        self.kind = kind
        self.sigma = float(sigma)
        self.params = dict(params or {})
        self._func = func
        if not (self.sigma > 0.0 or math.isinf(self.sigma)):
            raise SectorError(f"sigma must be positive (got {sigma})")
        if kind == "custom" and func is None:
            raise StructureError("custom nonlinearity needs a callable")
        if kind == "relay" and not math.isinf(self.sigma):
            raise SectorError("relay has unbounded slope at 0; declare sigma=inf")
        if kind == "bounded_gain":
            a = np.asarray(self.params.get("companion"), dtype=float)
            glim = float(self.params.get("gain_limit", 0.0))
            if a.ndim != 1 or not glim > 0.0:
                raise StructureError("bounded_gain needs companion vector and gain_limit > 0")
            self.params["companion"] = a
            self.params["gain_limit"] = glim

    # -- factories ---------------------------------------------------------
    @staticmethod
    def linear(slope: float) -> "SectorNonlinearity":
        return SectorNonlinearity("linear", slope, {"slope": float(slope)})

    @staticmethod
    def tanh(pre_gain: float = 1.0, post_gain: float = 1.0) -> "SectorNonlinearity":
        return SectorNonlinearity(
            "tanh", pre_gain * post_gain,
            {"pre_gain": float(pre_gain), "post_gain": float(post_gain)},
        )

    @staticmethod
    def saturation(limit: float, slope: float = 1.0) -> "SectorNonlinearity":
        return SectorNonlinearity(
            "saturation", slope, {"limit": float(limit), "slope": float(slope)}
        )

    @staticmethod
    def dead_zone(width: float, slope: float = 1.0) -> "SectorNonlinearity":
        return SectorNonlinearity(
            "dead_zone", slope, {"width": float(width), "slope": float(slope)}
        )

    @staticmethod
    def relay(level: float) -> "SectorNonlinearity":
        return SectorNonlinearity("relay", math.inf, {"level": float(level)})

    @staticmethod
    def custom(func: Callable, sigma: float) -> "SectorNonlinearity":
        return SectorNonlinearity("custom", sigma, {}, func=func)

    @staticmethod
    def bounded_gain(sigma: float, companion: np.ndarray, gain_limit: float) -> "SectorNonlinearity":
        return SectorNonlinearity(
            "bounded_gain", sigma,
            {"companion": np.asarray(companion, dtype=float), "gain_limit": float(gain_limit)},
        )

    # -- evaluation ---------------------------------------------------------
    def value(self, s, x_delayed=None):
        s = np.asarray(s, dtype=float)
        k = self.kind
        if k == "linear":
            return self.params["slope"] * s
        if k == "tanh":
            return self.params["post_gain"] * np.tanh(self.params["pre_gain"] * s)
        if k == "saturation":
            p = self.params
            return p["slope"] * np.clip(s, -p["limit"], p["limit"])
        if k == "dead_zone":
            p = self.params
            return p["slope"] * (s - np.clip(s, -p["width"], p["width"]))
        if k == "relay":
            return self.params["level"] * np.sign(s)
        if k == "custom":
            return np.asarray(self._func(s), dtype=float)
        if k == "bounded_gain":
            if x_delayed is None:
                raise StructureError("bounded_gain channel needs the delayed state")
            a = self.params["companion"]
            glim = self.params["gain_limit"]
            g = np.clip(np.asarray(x_delayed, dtype=float) @ a, -glim, glim)
            return self.sigma * s * (g + glim) / (2.0 * glim)
        raise StructureError(f"unknown nonlinearity kind '{k}'")

    def __call__(self, s):
        return self.value(s)

    def descriptor(self) -> dict:
        if self.kind == "custom":
            raise StructureError("custom nonlinearities are not serializable")
        d = {"kind": self.kind, "sigma": self.sigma}
        for key, val in self.params.items():
            d[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return d

    @staticmethod
    def from_descriptor(d: dict) -> "SectorNonlinearity":
        d = dict(d)
        kind = d.pop("kind")
        sigma = d.pop("sigma")
        if kind == "bounded_gain":
            d["companion"] = np.asarray(d["companion"], dtype=float)
        return SectorNonlinearity(kind, sigma, d)

    def __repr__(self):
        return f"SectorNonlinearity({self.kind}, sigma={self.sigma})"


@dataclass(frozen=True)
class SectorCheck:
    passed: bool
    worst_product: float
    worst_s: float


def verify_sector(nl: SectorNonlinearity, s_max: float, n_samples: int = 2001,
                  tol: float = SECTOR_TOL, rng: Optional[np.random.Generator] = None) -> SectorCheck:
    """Sample phi(s)*(s - phi(s)/sigma) >= -tol on [-s_max, s_max].

    For sigma = inf the check degenerates to phi(s)*s >= -tol. bounded_gain
    channels are additionally sampled over random delayed states, since their
    effective slope is state-scheduled.
    """
    s = np.linspace(-s_max, s_max, n_samples)
    if nl.kind == "bounded_gain":
        rng = rng or np.random.default_rng(0)
        n = nl.params["companion"].size
        worst = math.inf
        worst_s = 0.0
        for _ in range(16):
            xd = rng.normal(scale=max(1.0, 2.0 * nl.params["gain_limit"]), size=(n,))
            phi = nl.value(s, x_delayed=xd)
            prod = phi * (s - phi / nl.sigma)
            i = int(np.argmin(prod))
            if prod[i] < worst:
                worst, worst_s = float(prod[i]), float(s[i])
        return SectorCheck(worst >= -tol, worst, worst_s)
    phi = nl.value(s)
    if math.isinf(nl.sigma):
        prod = phi * s
    else:
        prod = phi * (s - phi / nl.sigma)
    i = int(np.argmin(prod))
    return SectorCheck(bool(prod[i] >= -tol), float(prod[i]), float(s[i]))


# ---------------------------------------------------------------------------
# System container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersidskiiSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    tau: float
    nonlinearities: tuple
    input_matrix: Optional[np.ndarray] = None  # known-input matrix E, optional

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        k = B.shape[1]
        C = np.asarray(self.C, dtype=float).reshape(-1, n)
        if C.shape[0] != k:
            raise DimensionError(f"C has {C.shape[0]} rows for {k} channels")
        D = np.asarray(self.D, dtype=float).reshape(n, -1)
        nls = tuple(self.nonlinearities)
        if len(nls) != k:
            raise DimensionError(f"{len(nls)} nonlinearities for {k} channels")
        for mat in (A, B, C, D):
            if not np.all(np.isfinite(mat)):
                raise NumericError("system matrices contain NaN or Inf")
        if not (np.isfinite(self.tau) and self.tau >= 0.0):
            raise StructureError(f"tau must be finite and >= 0, got {self.tau}")
        E = self.input_matrix
        if E is not None:
            E = np.asarray(E, dtype=float).reshape(n, -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "nonlinearities", nls)
        object.__setattr__(self, "input_matrix", E)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.D.shape[1]

    @property
    def m_u(self) -> int:
        return 0 if self.input_matrix is None else self.input_matrix.shape[1]

    def sector_sigmas(self) -> np.ndarray:
        return np.array([nl.sigma for nl in self.nonlinearities], dtype=float)

    def phi(self, x_delayed: np.ndarray) -> np.ndarray:
        """Channel vector phi(C x_d), handling state-scheduled channels."""
        x_delayed = np.asarray(x_delayed, dtype=float)
        s = self.C @ x_delayed
        out = np.empty(self.k)
        for i, nl in enumerate(self.nonlinearities):
            out[i] = nl.value(s[i], x_delayed=x_delayed)
        return out


def rhs(sys: PersidskiiSystem, x_now: np.ndarray, x_delayed: np.ndarray,
        w: Optional[np.ndarray] = None, u: Optional[np.ndarray] = None) -> np.ndarray:
    """Right-hand side A x - B phi(C x_d) + D w [+ E u]."""
    out = sys.A @ x_now
    if sys.k:
        out = out - sys.B @ sys.phi(x_delayed)
    if w is not None and sys.m:
        out = out + sys.D @ np.asarray(w, dtype=float)
    if u is not None:
        if sys.input_matrix is None:
            raise StructureError("system has no known-input matrix")
        out = out + sys.input_matrix @ np.asarray(u, dtype=float)
    return out


# ---------------------------------------------------------------------------
# History buffer
# ---------------------------------------------------------------------------

class HistoryBuffer:
    """Monotone (t, x) samples with linear interpolation for delayed lookups."""

    def __init__(self, n: int, capacity: int = 256):
        self._t = np.empty(capacity)
        self._x = np.empty((capacity, n))
        self._len = 0
        self.n = n

    def __len__(self):
        return self._len

    @property
    def t_first(self) -> float:
        if self._len == 0:
            raise CoverageError("history buffer is empty")
        return float(self._t[0])

    @property
    def t_last(self) -> float:
        if self._len == 0:
            raise CoverageError("history buffer is empty")
        return float(self._t[self._len - 1])

    def append(self, t: float, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"state shape {x.shape}, expected ({self.n},)")
        if self._len and t <= self._t[self._len - 1] - 1e-15:
            raise StructureError("history times must be non-decreasing")
        if self._len == self._t.shape[0]:
            self._t = np.concatenate([self._t, np.empty_like(self._t)])
            self._x = np.concatenate([self._x, np.empty_like(self._x)])
        self._t[self._len] = t
        self._x[self._len] = x
        self._len += 1

    def interp(self, t: float) -> np.ndarray:
        if self._len == 0:
            raise CoverageError("history buffer is empty")
        t0, t1 = self._t[0], self._t[self._len - 1]
        # tolerate roundoff at both ends
        slack = 1e-9 * (1.0 + abs(t1))
        if t < t0 - slack or t > t1 + slack:
            raise CoverageError(f"query t={t} outside buffered range [{t0}, {t1}]")
        t = min(max(t, t0), t1)
        idx = int(np.searchsorted(self._t[: self._len], t, side="right"))
        if idx <= 0:
            return self._x[0].copy()
        if idx >= self._len:
            return self._x[self._len - 1].copy()
        ta, tb = self._t[idx - 1], self._t[idx]
        if tb <= ta:
            return self._x[idx].copy()
        lam = (t - ta) / (tb - ta)
        return (1.0 - lam) * self._x[idx - 1] + lam * self._x[idx]


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    disturbances: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        x = np.asarray(self.states, dtype=float)
        if x.ndim != 2 or x.shape[0] != t.size:
            raise DimensionError("states must be (len(times), n)")
        if t.size >= 2 and np.any(np.diff(t) <= 0):
            raise StructureError("trajectory times must be strictly increasing")
        w = self.disturbances
        if w is not None:
            w = np.asarray(w, dtype=float)
            if w.shape[0] != t.size:
                raise DimensionError("disturbance rows must match times")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "disturbances", w)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    n = traj.n
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    cols = [traj.times] + [traj.states[:, i] for i in range(n)]
    if traj.disturbances is not None:
        m = traj.disturbances.shape[1]
        header += [f"w{i + 1}" for i in range(m)]
        cols += [traj.disturbances[:, i] for i in range(m)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*cols):
            writer.writerow([f"%.17g" % v for v in row])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if not header or header[0] != "t":
        raise StructureError("trajectory CSV must start with a 't' column")
    data = np.asarray(rows, dtype=float)
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("w"))
    if 1 + n + m != len(header):
        raise StructureError("trajectory CSV columns must be t,x1..xn[,w1..wm]")
    w = data[:, 1 + n:] if m else None
    return Trajectory(data[:, 0], data[:, 1:1 + n], w)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _as_history_fn(history, n: int) -> Callable[[float], np.ndarray]:
    if callable(history):
        return lambda t: np.asarray(history(t), dtype=float).reshape(n)
    x0 = np.asarray(history, dtype=float).reshape(n)
    return lambda t: x0


def _as_signal_fn(sig, m: int):
    if sig is None:
        return None
    if callable(sig):
        return lambda t: np.asarray(sig(t), dtype=float).reshape(m)
    const = np.asarray(sig, dtype=float).reshape(m)
    return lambda t: const


def simulate(
    sys: PersidskiiSystem,
    history,
    t_end: float,
    dt: float,
    w=None,
    u=None,
    blowup_guard: float = BLOWUP_GUARD,
) -> Trajectory:
    """Integrate the delayed dynamics with fixed-step RK4 from t=0 to t_end.

    history supplies x on [-tau, 0]: a constant vector or a callable of t.
    w and u may be None, constant vectors, or callables of t. With tau > 0
    the step must satisfy dt <= tau (the delayed argument of RK4 stages must
    stay inside the recorded history).
    """
    n = sys.n
    tau = sys.tau
    if dt <= 0:
        raise StructureError("dt must be positive")
    if 0.0 < tau < dt:
        raise StructureError(f"dt={dt} exceeds tau={tau}; delayed RK4 stages need dt <= tau")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise StructureError("t_end must be an integer multiple of dt")

    hist_fn = _as_history_fn(history, n)
    w_fn = _as_signal_fn(w, sys.m)
    u_fn = _as_signal_fn(u, sys.m_u) if sys.input_matrix is not None else None

    buf = None
    if tau > 0.0:
        buf = HistoryBuffer(n)
        n_hist = max(2, int(math.ceil(tau / dt)) + 1)
        for tq in np.linspace(-tau, 0.0, n_hist):
            buf.append(tq, hist_fn(tq))

    x = hist_fn(0.0).copy()
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, n))
    wlog = np.empty((n_steps + 1, sys.m)) if sys.m else None
    times[0] = 0.0
    states[0] = x

    def deriv(t, xval):
        xd = buf.interp(t - tau) if buf is not None else xval
        wv = w_fn(t) if w_fn is not None else None
        uv = u_fn(t) if u_fn is not None else None
        return rhs(sys, xval, xd, wv, uv)

    for step in range(n_steps):
        t = step * dt
        if wlog is not None:
            wlog[step] = w_fn(t) if w_fn is not None else 0.0
        k1 = deriv(t, x)
        k2 = deriv(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = deriv(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = deriv(t + dt, x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tn = (step + 1) * dt
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > blowup_guard:
            raise DivergenceError(f"state exceeded blow-up guard at t={tn:.6g}")
        if buf is not None:
            buf.append(tn, x)
        times[step + 1] = tn
        states[step + 1] = x
    if wlog is not None:
        wlog[n_steps] = w_fn(n_steps * dt) if w_fn is not None else 0.0
    return Trajectory(times, states, wlog)
