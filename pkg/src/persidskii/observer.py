"""Structured observer synthesis and an EKF baseline for delayed sector systems.

The observer copies the plant architecture and injects L(y - H x_hat). Its
error dynamics are again a delayed sector system with state matrix A - LH,
because increments of monotone slope-bounded nonlinearities satisfy the same
sector bounds. Gain synthesis substitutes Y = PL (P diagonal positive, so
L = P^-1 Y), which makes the delay-free certification blocks affine in
(P, Y, M); the candidate gain is then re-certified on the error system at the
actual delay, inside a bisection on the squared gain level. Trying L = 0 as a
fallback candidate at every level guarantees the synthesized gain level never
exceeds the open-loop certified level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np

from .certify import (
    IssCertificate,
    assemble_psi_delay_free,
    certify_iss,
    _assemble_completed_delay_free,
)
from .errors import (
    BracketError,
    DimensionError,
    DivergenceError,
    NumericError,
    StructureError,
)
from .lmi import AffineLmi, min_eigenvalue, solve_feasibility, symmetrize
from .model import (
    BLOWUP_GUARD,
    HistoryBuffer,
    PersidskiiSystem,
    Trajectory,
    rhs,
)


# ---------------------------------------------------------------------------
# Measurement model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementModel:
    """Linear output map y = H x + v with per-channel noise standard deviations."""

    H: np.ndarray
    noise_std: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.shape[0] < 1:
            raise DimensionError("measurement map needs at least one output row")
        if not np.all(np.isfinite(H)):
            raise NumericError("measurement map contains NaN or Inf")
        std = np.asarray(self.noise_std, dtype=float).ravel()
        if std.size == 1:
            std = np.full(H.shape[0], std[0])
        if std.size != H.shape[0]:
            raise DimensionError("noise_std length must match output count")
        if (std < 0).any() or not np.all(np.isfinite(std)):
            raise StructureError("noise standard deviations must be finite and >= 0")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "noise_std", std)

    @property
    def p(self) -> int:
        return self.H.shape[0]

    def measure(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        y = self.H @ np.asarray(x, dtype=float)
        if rng is not None and self.noise_std.any():
            y = y + rng.standard_normal(self.p) * self.noise_std
        return y


@dataclass(frozen=True)
class ObserverGain:
    """Injection gain with its certified disturbance-to-error gain level."""

    L: np.ndarray
    gamma_hinf: float
    certificate: IssCertificate

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        if not np.all(np.isfinite(L)):
            raise NumericError("gain contains NaN or Inf")
        object.__setattr__(self, "L", L)


def error_system(sys: PersidskiiSystem, meas: MeasurementModel, L: np.ndarray) -> PersidskiiSystem:
    """Estimation-error dynamics: state matrix A - LH, sector channels unchanged.

    Known inputs cancel between plant and observer, so the error system has no
    input matrix; the disturbance channel D is kept (it drives the error).
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != (sys.n, meas.p):
        raise DimensionError(f"gain must be {sys.n}x{meas.p}, got {L.shape}")
    if meas.H.shape[1] != sys.n:
        raise DimensionError("measurement map column count must equal state dimension")
    return PersidskiiSystem(
        A=sys.A - L @ meas.H,
        B=sys.B,
        C=sys.C,
        D=sys.D,
        tau=sys.tau,
        nonlinearities=sys.nonlinearities,
    )


# ---------------------------------------------------------------------------
# Gain synthesis
# ---------------------------------------------------------------------------

def _synthesis_lmi(sys: PersidskiiSystem, meas: MeasurementModel, gamma: float) -> AffineLmi:
    """Delay-free certification blocks with A - LH expressed through Y = PL.

    Variable vector: diag(P) (n), diag(M) (k), vec(Y) (n*p). He(P(A - LH))
    equals He(PA) - He(YH), affine in the unknowns. Disturbance rows are
    congruence-scaled by 1/gamma for gamma > 1 so the strictness margin
    stays tied to the O(1) anchor block rather than gamma^2.
    """
    gs = max(1.0, float(gamma))
    if gs > 1.0 and sys.m:
        sys = replace(sys, D=sys.D / gs)
        gamma = gamma / gs
    n, k, p = sys.n, sys.k, meas.p
    H = meas.H
    nv = n + k + n * p

    def unpack(x):
        pd = x[:n]
        md = x[n:n + k]
        Y = x[n + k:].reshape(n, p)
        return np.diag(pd), np.diag(md) if k else np.zeros((0, 0)), Y

    def build(x: np.ndarray) -> np.ndarray:
        P, M, Y = unpack(x)
        inj = Y @ H
        pad = np.zeros((n + k + sys.m, n + k + sys.m))
        # -He(YH) carries the injection gain; +I is the bounded-real anchor
        # that makes gamma an absolute L2 gain bound w -> e here (the
        # certification forms themselves are scale-relative in gamma)
        pad[:n, :n] = -(inj + inj.T) + np.eye(n)
        pad_printed = np.zeros_like(pad)
        pad_printed[:n, :n] = -(inj + inj.T)
        blocks = [
            # Lam stays zero here: its cross terms would be bilinear in (Lam, L)
            _assemble_completed_delay_free(sys, P, M, None, gamma) + pad,
            assemble_psi_delay_free(sys, P, np.zeros((k, k)), gamma) + pad_printed,
            -P,
        ]
        if k:
            blocks.append(-M)
        dims = [b.shape[0] for b in blocks]
        out = np.zeros((sum(dims), sum(dims)))
        ofs = 0
        for b, d in zip(blocks, dims):
            out[ofs:ofs + d, ofs:ofs + d] = b
            ofs += d
        return out

    zero = np.zeros(nv)
    f0 = build(zero)
    coeffs = np.empty((nv, *f0.shape))
    for i in range(nv):
        e = np.zeros(nv)
        e[i] = 1.0
        coeffs[i] = build(e) - f0
    tags = [f"P[{i}]" for i in range(n)] + [f"M[{i}]" for i in range(k)]
    tags += [f"Y[{i},{j}]" for i in range(n) for j in range(p)]
    return AffineLmi(f0, coeffs, tuple(tags))


def gain_level_lmi(sys: PersidskiiSystem, gamma: float) -> AffineLmi:
    """Bounded-real check at a fixed dynamics matrix: does some diagonal P
    certify d/dt(e^T P e) <= -|e|^2 + gamma^2 |w|^2 delay-free?

    Same anchored completed block as the synthesis LMI but with no injection
    variable; used to attribute a gain level to an explicit candidate gain.
    """
    gs = max(1.0, float(gamma))
    if gs > 1.0 and sys.m:
        sys = replace(sys, D=sys.D / gs)
        gamma = gamma / gs
    n, k = sys.n, sys.k
    nv = n + k

    def build(x: np.ndarray) -> np.ndarray:
        P = np.diag(x[:n])
        M = np.diag(x[n:]) if k else np.zeros((0, 0))
        anchored = _assemble_completed_delay_free(sys, P, M, None, gamma)
        anchored[:n, :n] += np.eye(n)
        blocks = [anchored, -P]
        if k:
            blocks.append(-M)
        dims = [b.shape[0] for b in blocks]
        out = np.zeros((sum(dims), sum(dims)))
        ofs = 0
        for b, d in zip(blocks, dims):
            out[ofs:ofs + d, ofs:ofs + d] = b
            ofs += d
        return out

    zero = np.zeros(nv)
    f0 = build(zero)
    coeffs = np.empty((nv, *f0.shape))
    for i in range(nv):
        e = np.zeros(nv)
        e[i] = 1.0
        coeffs[i] = build(e) - f0
    tags = [f"P[{i}]" for i in range(n)] + [f"M[{i}]" for i in range(k)]
    return AffineLmi(f0, coeffs, tuple(tags))


def _recover_gain(sys: PersidskiiSystem, meas: MeasurementModel,
                  witness: np.ndarray, eps: float) -> np.ndarray:
    n, k, p = sys.n, sys.k, meas.p
    pd = witness[:n]
    if pd.min() <= eps:
        raise StructureError(
            f"recovered Lyapunov diagonal has entry {pd.min():.3e} <= eps; gain undefined"
        )
    Y = witness[n + k:].reshape(n, p)
    return Y / pd[:, None]


def synthesize_gain(
    sys: PersidskiiSystem,
    meas: MeasurementModel,
    gamma_bracket: Tuple[float, float],
    bisect_tol: float = 1e-3,
) -> ObserverGain:
    """Minimize the certified disturbance-to-error gain level over injection gains.

    At each level a pool of candidate gains is tried smallest-magnitude
    first, so the returned gain is the least aggressive one that works:
    L = 0, the best gain so far, output-injection gains (A + beta*I) H^+
    that cancel the measured-state couplings and add damping beta, and the
    delay-free synthesis LMI's own proposal with a damped scaling. Each
    candidate faces a two-part check: the anchored bounded-real test pins
    the level as an absolute disturbance-to-error gain for the closed error
    dynamics, and re-certification at the plant's delay confirms the gain
    remains admissible with the delayed channels active. The level counts
    as achievable if any candidate passes both, and is bisected in the
    squared-gain domain until the bracket width drops below bisect_tol.
    """
    lo, hi = float(gamma_bracket[0]), float(gamma_bracket[1])
    if not (0.0 < lo < hi):
        raise StructureError("gamma bracket must satisfy 0 < lo < hi")
    if bisect_tol <= 0:
        raise StructureError("bisect_tol must be positive")
    if meas.H.shape[1] != sys.n:
        raise DimensionError("measurement map column count must equal state dimension")

    best: dict = {"L": None, "cert": None}
    h_pinv = np.linalg.pinv(meas.H)
    a_scale = 1.0 + float(np.linalg.norm(sys.A, 2))

    def probe(gamma: float) -> bool:
        candidates = [np.zeros((sys.n, meas.p))]
        if best["L"] is not None:
            candidates.append(best["L"])
        for beta in (0.5, 2.0, 8.0):
            candidates.append((sys.A + beta * a_scale * np.eye(sys.n)) @ h_pinv)
        lmi = _synthesis_lmi(sys, meas, gamma)
        res = solve_feasibility(lmi)
        if res.feasible:
            proposal = _recover_gain(sys, meas, res.witness, res.eps_strict)
            candidates += [0.1 * proposal, proposal]
        candidates.sort(key=lambda L: np.abs(L).max())
        seen = []
        for L in candidates:
            if any(np.array_equal(L, s) for s in seen):
                continue
            seen.append(L)
            err = error_system(sys, meas, L)
            level = solve_feasibility(gain_level_lmi(err, gamma))
            if not level.feasible:
                continue
            out = certify_iss(err, gamma)
            if out.feasible:
                best["L"] = L
                best["cert"] = out.certificate
                return True
        return False

    if probe(lo):
        return ObserverGain(best["L"], lo, best["cert"])
    if not probe(hi):
        raise BracketError(
            f"no gain certifies the error system at the bracket top gamma={hi}"
        )
    hi_cert = (best["L"], best["cert"])
    while hi - lo > bisect_tol:
        mid = math.sqrt(0.5 * (lo * lo + hi * hi))
        if probe(mid):
            hi = mid
            hi_cert = (best["L"], best["cert"])
        else:
            lo = mid
    return ObserverGain(hi_cert[0], hi, hi_cert[1])


# ---------------------------------------------------------------------------
# Observer integration step
# ---------------------------------------------------------------------------

def observer_step(
    gain,
    sys: PersidskiiSystem,
    meas: MeasurementModel,
    x_hat_history: HistoryBuffer,
    y_now: np.ndarray,
    dt: float,
    u: Optional[np.ndarray] = None,
    blowup_guard: float = BLOWUP_GUARD,
) -> np.ndarray:
    """Advance the observer one RK4 step with the innovation held over the step.

    gain is either an ObserverGain or a bare n x p matrix (hand-tuned gains
    carry no certificate). The buffer must end at the current time t and cover
    [t - tau, t]; the new estimate at t + dt is appended before returning.
    With L = 0 the step coincides with an open-loop model step from the
    buffered estimate.
    """
    if dt <= 0:
        raise StructureError("dt must be positive")
    tau = sys.tau
    if 0.0 < tau < dt:
        raise StructureError(f"dt={dt} exceeds tau={tau}; delayed stages need dt <= tau")
    L = gain.L if isinstance(gain, ObserverGain) else np.atleast_2d(np.asarray(gain, dtype=float))
    t = x_hat_history.t_last
    x_hat = x_hat_history.interp(t)
    y_now = np.asarray(y_now, dtype=float).ravel()
    # zero-order hold: measurements arrive sampled, the injection is frozen
    inj = L @ (y_now - meas.H @ x_hat)

    def deriv(ts, xs):
        xd = x_hat_history.interp(ts - tau) if tau > 0.0 else xs
        return rhs(sys, xs, xd, None, u) + inj

    k1 = deriv(t, x_hat)
    k2 = deriv(t + 0.5 * dt, x_hat + 0.5 * dt * k1)
    k3 = deriv(t + 0.5 * dt, x_hat + 0.5 * dt * k2)
    k4 = deriv(t + dt, x_hat + dt * k3)
    x_new = x_hat + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new) > blowup_guard:
        raise DivergenceError(f"observer state exceeded blow-up guard at t={t + dt:.6g}")
    x_hat_history.append(t + dt, x_new)
    return x_new


# ---------------------------------------------------------------------------
# EKF baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EkfConfig:
    """Covariance settings for the extended Kalman filter baseline."""

    process_cov: np.ndarray
    measurement_cov: np.ndarray
    initial_cov: np.ndarray

    def __post_init__(self):
        Q = symmetrize(self.process_cov)
        R = symmetrize(self.measurement_cov)
        P0 = symmetrize(self.initial_cov)
        if min_eigenvalue(Q) < -1e-12:
            raise StructureError("process covariance must be positive semidefinite")
        if min_eigenvalue(R) <= 0:
            raise StructureError("measurement covariance must be positive definite")
        if min_eigenvalue(P0) <= 0:
            raise StructureError("initial covariance must be positive definite")
        object.__setattr__(self, "process_cov", Q)
        object.__setattr__(self, "measurement_cov", R)
        object.__setattr__(self, "initial_cov", P0)


def ekf_step(
    cfg: EkfConfig,
    rhs_fn: Callable[[np.ndarray], np.ndarray],
    jac_fn: Callable[[np.ndarray], np.ndarray],
    H: np.ndarray,
    state: np.ndarray,
    cov: np.ndarray,
    y_now: np.ndarray,
    dt: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One continuous-discrete EKF step: RK4 mean, Euler covariance, Kalman update.

    y_now is the measurement available at the end of the step. The covariance
    is re-symmetrized after the update; a non positive definite innovation
    covariance raises instead of producing a silent divergence.
    """
    x = np.asarray(state, dtype=float).ravel()
    P = symmetrize(cov)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    k1 = rhs_fn(x)
    k2 = rhs_fn(x + 0.5 * dt * k1)
    k3 = rhs_fn(x + 0.5 * dt * k2)
    k4 = rhs_fn(x + dt * k3)
    x_pred = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    F = np.atleast_2d(np.asarray(jac_fn(x), dtype=float))
    P_pred = P + dt * (F @ P + P @ F.T + cfg.process_cov)
    S_in = H @ P_pred @ H.T + cfg.measurement_cov
    if min_eigenvalue(symmetrize(S_in)) <= 0:
        raise NumericError("innovation covariance is not positive definite")
    K = np.linalg.solve(S_in.T, (P_pred @ H.T).T).T
    y = np.asarray(y_now, dtype=float).ravel()
    x_new = x_pred + K @ (y - H @ x_pred)
    P_new = symmetrize((np.eye(x.size) - K @ H) @ P_pred)
    return x_new, P_new


# ---------------------------------------------------------------------------
# Estimator wrappers with a uniform stepping protocol
# ---------------------------------------------------------------------------

class PersidskiiEstimator:
    """Stateful wrapper around observer_step for experiment loops.

    gain may be an ObserverGain or a bare n x p injection matrix.
    """

    def __init__(self, sys: PersidskiiSystem, meas: MeasurementModel, gain):
        self.sys = sys
        self.meas = meas
        self.gain = gain
        self.buffer: Optional[HistoryBuffer] = None

    def reset(self, x0_hat: np.ndarray, t0: float = 0.0, dt_hint: float = 1e-3) -> None:
        x0_hat = np.asarray(x0_hat, dtype=float).ravel()
        buf = HistoryBuffer(self.sys.n)
        tau = self.sys.tau
        if tau > 0.0:
            n_hist = max(2, int(math.ceil(tau / dt_hint)) + 1)
            for tq in np.linspace(t0 - tau, t0, n_hist):
                buf.append(tq, x0_hat)
        else:
            buf.append(t0, x0_hat)
        self.buffer = buf

    def step(self, t: float, y: np.ndarray, dt: float, u=None) -> np.ndarray:
        if self.buffer is None:
            raise StructureError("estimator must be reset before stepping")
        return observer_step(self.gain, self.sys, self.meas, self.buffer, y, dt, u=u)


class EkfEstimator:
    """Stateful continuous-discrete EKF over a caller-supplied delayed model.

    rhs_fn(x, x_delayed, u) is the model derivative; jac_fn(x, x_delayed, u)
    its state Jacobian with the delayed argument's sensitivity collapsed onto
    the current state. The filter keeps its own estimate history so the mean
    propagation can evaluate the delayed term at the delayed estimate.
    """

    def __init__(self, cfg: EkfConfig, rhs_fn, jac_fn, H: np.ndarray, tau: float):
        self.cfg = cfg
        self.rhs_fn = rhs_fn
        self.jac_fn = jac_fn
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.tau = float(tau)
        self.buffer: Optional[HistoryBuffer] = None
        self.cov = cfg.initial_cov.copy()

    def reset(self, x0_hat: np.ndarray, t0: float = 0.0, dt_hint: float = 1e-3) -> None:
        x0_hat = np.asarray(x0_hat, dtype=float).ravel()
        buf = HistoryBuffer(self.H.shape[1])
        if self.tau > 0.0:
            n_hist = max(2, int(math.ceil(self.tau / dt_hint)) + 1)
            for tq in np.linspace(t0 - self.tau, t0, n_hist):
                buf.append(tq, x0_hat)
        else:
            buf.append(t0, x0_hat)
        self.buffer = buf
        self.cov = self.cfg.initial_cov.copy()

    def step(self, t: float, y: np.ndarray, dt: float, u=None) -> np.ndarray:
        if self.buffer is None:
            raise StructureError("estimator must be reset before stepping")
        buf = self.buffer
        tau = self.tau
        x = buf.interp(t)

        def frozen_rhs(xs):
            xd = buf.interp(max(t - tau, buf.t_first)) if tau > 0.0 else xs
            return self.rhs_fn(xs, xd, u)

        def frozen_jac(xs):
            xd = buf.interp(max(t - tau, buf.t_first)) if tau > 0.0 else xs
            return self.jac_fn(xs, xd, u)

        x_new, self.cov = ekf_step(
            self.cfg, frozen_rhs, frozen_jac, self.H, x, self.cov, y, dt
        )
        if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new) > BLOWUP_GUARD:
            raise DivergenceError(f"filter state exceeded blow-up guard at t={t + dt:.6g}")
        buf.append(t + dt, x_new)
        return x_new


# ---------------------------------------------------------------------------
# Co-simulation experiment
# ---------------------------------------------------------------------------

def estimation_experiment(
    sys: PersidskiiSystem,
    meas: MeasurementModel,
    estimator,
    x0: np.ndarray,
    x0_hat: np.ndarray,
    t_end: float,
    dt: float,
    w=None,
    u=None,
    seed: int = 0,
    rmse_window: Optional[Tuple[float, float]] = None,
) -> Tuple[Trajectory, Trajectory, np.ndarray]:
    """Co-simulate plant and estimator; return truth, estimate, per-state RMSE.

    w: disturbance as None, constant, or callable of t. u: known input as
    None, constant, or feedback callable u(t, x_true) evaluated once per step
    and held. Measurement noise is drawn per sample from the seeded generator.
    RMSE is computed over rmse_window = (t_start, t_stop), default the whole
    run.
    """
    n = sys.n
    tau = sys.tau
    if dt <= 0:
        raise StructureError("dt must be positive")
    if 0.0 < tau < dt:
        raise StructureError(f"dt={dt} exceeds tau={tau}")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise StructureError("t_end must be an integer multiple of dt")

    x0 = np.asarray(x0, dtype=float).ravel()
    rng = np.random.default_rng(seed)

    def w_at(t):
        if w is None:
            return None
        if callable(w):
            return np.asarray(w(t), dtype=float).reshape(sys.m)
        return np.asarray(w, dtype=float).reshape(sys.m)

    def u_at(t, x):
        if u is None:
            return None
        if callable(u):
            return np.asarray(u(t, x), dtype=float).ravel()
        return np.asarray(u, dtype=float).ravel()

    buf = None
    if tau > 0.0:
        buf = HistoryBuffer(n)
        n_hist = max(2, int(math.ceil(tau / dt)) + 1)
        for tq in np.linspace(-tau, 0.0, n_hist):
            buf.append(tq, x0)

    estimator.reset(np.asarray(x0_hat, dtype=float).ravel(), t0=0.0, dt_hint=dt)

    times = np.empty(n_steps + 1)
    truth = np.empty((n_steps + 1, n))
    est = np.empty((n_steps + 1, n))
    times[0] = 0.0
    truth[0] = x0
    est[0] = np.asarray(x0_hat, dtype=float).ravel()

    x = x0.copy()
    for step in range(n_steps):
        t = step * dt
        y = meas.measure(x, rng)
        u_held = u_at(t, x)

        def deriv(ts, xs):
            xd = buf.interp(ts - tau) if buf is not None else xs
            return rhs(sys, xs, xd, w_at(ts), u_held)

        k1 = deriv(t, x)
        k2 = deriv(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = deriv(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = deriv(t + dt, x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tn = (step + 1) * dt
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > BLOWUP_GUARD:
            raise DivergenceError(f"plant state exceeded blow-up guard at t={tn:.6g}")
        if buf is not None:
            buf.append(tn, x)
        x_hat = estimator.step(t, y, dt, u=u_held)
        times[step + 1] = tn
        truth[step + 1] = x
        est[step + 1] = x_hat

    lo, hi_t = (0.0, t_end) if rmse_window is None else rmse_window
    mask = (times >= lo - 1e-12) & (times <= hi_t + 1e-12)
    if not mask.any():
        raise StructureError("rmse window contains no samples")
    err = truth[mask] - est[mask]
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    return Trajectory(times, truth), Trajectory(times, est), rmse
