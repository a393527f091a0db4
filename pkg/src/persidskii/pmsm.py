"""Surface-mount PMSM benchmark: dq model, sector casts, and cascaded PI control.

The machine model is the amplitude-invariant dq frame:

    L_s di_d/dt = -R_s i_d + omega_e L_s i_q + u_d
    L_s di_q/dt = -R_s i_q - omega_e L_s i_d - omega_e psi_f + u_q
    J  dw_m/dt  = 1.5 p psi_f i_q - B_f w_m - T_L,   omega_e = p w_m

The speed-current products are absorbed into state-scheduled sector channels
(slope within [0, omega_e_max / L_s] on the declared operating box), which
turns the motor into a sector-feedback system the certification machinery
accepts. A conservative alternative treats the products as bounded
disturbances instead; both casts are provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, StructureError
from .model import PersidskiiSystem, SectorNonlinearity

RPM_TO_RAD = 2.0 * math.pi / 60.0

# phase (rad) of known command-path dead time the speed loop is allowed to
# carry at crossover; caps the realized speed-loop bandwidth when a delay
# is declared
DELAY_DETUNE_PHASE = 0.75


@dataclass(frozen=True)
class PmsmParams:
    """Electrical and mechanical constants plus drive ratings."""

    R_s: float = 0.82
    L_s: float = 5.2e-3
    psi_f: float = 0.175
    p_pairs: int = 3
    J: float = 3e-3
    B_f: float = 1e-3
    rated_speed_rpm: float = 1500.0
    rated_torque: float = 9.5
    rated_power: float = 1500.0
    u_max: float = 120.0
    i_max: float = 15.0

    def __post_init__(self):
        for name in ("R_s", "L_s", "psi_f", "J", "B_f", "rated_speed_rpm",
                     "rated_torque", "rated_power", "u_max", "i_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if int(self.p_pairs) != self.p_pairs or self.p_pairs < 1:
            raise ConfigError("p_pairs must be a positive integer")

    @property
    def torque_constant(self) -> float:
        return 1.5 * self.p_pairs * self.psi_f

    @property
    def omega_m_rated(self) -> float:
        return self.rated_speed_rpm * RPM_TO_RAD

    @property
    def omega_e_max_default(self) -> float:
        # electrical speed bound with 10% headroom over rating
        return 1.1 * self.p_pairs * self.omega_m_rated


def pmsm_rhs(params: PmsmParams, x: np.ndarray, u: np.ndarray,
             T_L: float = 0.0) -> np.ndarray:
    """Time derivative of (i_d, i_q, w_m)."""
    i_d, i_q, w_m = np.asarray(x, dtype=float).ravel()
    u_d, u_q = np.asarray(u, dtype=float).ravel()
    p = params
    w_e = p.p_pairs * w_m
    did = (-p.R_s * i_d + w_e * p.L_s * i_q + u_d) / p.L_s
    diq = (-p.R_s * i_q - w_e * p.L_s * i_d - w_e * p.psi_f + u_q) / p.L_s
    dw = (p.torque_constant * i_q - p.B_f * w_m - T_L) / p.J
    return np.array([did, diq, dw])


def pmsm_energy(params: PmsmParams, x: np.ndarray) -> float:
    """Dissipation storage function: 3/2-scaled magnetic energy plus kinetic.

    The 3/2 electrical factor matches the amplitude-invariant frame's power
    bookkeeping; with it dE/dt = -1.5 R_s |i|^2 - B_f w^2 + 1.5 u.i - w T_L,
    so E is non-increasing for u = 0, T_L = 0.
    """
    i_d, i_q, w_m = np.asarray(x, dtype=float).ravel()
    return float(0.75 * params.L_s * (i_d ** 2 + i_q ** 2) + 0.5 * params.J * w_m ** 2)


# ---------------------------------------------------------------------------
# Load profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadProfile:
    """Shaft load torque signal: step, sinusoid, or a sum of profiles."""

    kind: str
    params: dict

    @staticmethod
    def step(time: float, magnitude: float) -> "LoadProfile":
        return LoadProfile("step", {"time": float(time), "magnitude": float(magnitude)})

    @staticmethod
    def sinusoid(amplitude: float, freq_hz: float, phase: float = 0.0) -> "LoadProfile":
        return LoadProfile("sinusoid", {"amplitude": float(amplitude),
                                        "freq_hz": float(freq_hz),
                                        "phase": float(phase)})

    @staticmethod
    def composite(parts: Sequence["LoadProfile"]) -> "LoadProfile":
        return LoadProfile("composite", {"parts": tuple(parts)})

    @staticmethod
    def zero() -> "LoadProfile":
        return LoadProfile("step", {"time": 0.0, "magnitude": 0.0})

    def evaluate(self, t: float) -> float:
        if self.kind == "step":
            return self.params["magnitude"] if t >= self.params["time"] else 0.0
        if self.kind == "sinusoid":
            p = self.params
            return p["amplitude"] * math.sin(2.0 * math.pi * p["freq_hz"] * t + p["phase"])
        if self.kind == "composite":
            return sum(part.evaluate(t) for part in self.params["parts"])
        raise StructureError(f"unknown load profile kind '{self.kind}'")

    def peak(self) -> float:
        if self.kind == "step":
            return abs(self.params["magnitude"])
        if self.kind == "sinusoid":
            return abs(self.params["amplitude"])
        if self.kind == "composite":
            return sum(part.peak() for part in self.params["parts"])
        raise StructureError(f"unknown load profile kind '{self.kind}'")

    def validate_against(self, params: PmsmParams) -> None:
        if self.peak() > params.rated_torque:
            raise ConfigError("load profile exceeds the rated torque range")


# ---------------------------------------------------------------------------
# Sector casts
# ---------------------------------------------------------------------------

def _linear_part(params: PmsmParams) -> np.ndarray:
    p = params
    return np.array([
        [-p.R_s / p.L_s, 0.0, 0.0],
        [0.0, -p.R_s / p.L_s, -p.p_pairs * p.psi_f / p.L_s],
        [0.0, p.torque_constant / p.J, -p.B_f / p.J],
    ])


def _input_matrix(params: PmsmParams) -> np.ndarray:
    return np.array([[1.0 / params.L_s, 0.0],
                     [0.0, 1.0 / params.L_s],
                     [0.0, 0.0]])


def to_persidskii(params: PmsmParams, omega_e_max: Optional[float] = None,
                  tau: float = 0.0, mode: str = "sector") -> PersidskiiSystem:
    """Cast the motor into sector-feedback form.

    sector mode: the products w_e i_q and w_e i_d become state-scheduled
    channels with slope bound omega_e_max / L_s on |w_e| <= omega_e_max; the
    scheduling offset is compensated by +/- omega_e_max entries in A, so the
    cast reproduces pmsm_rhs exactly on the box at tau = 0.

    disturbance mode: the products are routed through two extra disturbance
    columns instead (no nonlinear channels); cross_coupling_disturbance
    assembles the matching disturbance vector.
    """
    if omega_e_max is None:
        omega_e_max = params.omega_e_max_default
    if not omega_e_max > 0:
        raise ConfigError("omega_e_max must be positive")
    p = params
    A = _linear_part(p)
    E = _input_matrix(p)
    if mode == "sector":
        A = A.copy()
        A[0, 1] = -omega_e_max
        A[1, 0] = omega_e_max
        sigma = omega_e_max / p.L_s
        companion = np.array([0.0, 0.0, float(p.p_pairs)])
        nl = SectorNonlinearity.bounded_gain(sigma, companion, omega_e_max)
        B = np.array([[-1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        C = np.array([[0.0, 2.0 * p.L_s, 0.0], [2.0 * p.L_s, 0.0, 0.0]])
        D = np.array([[0.0], [0.0], [-1.0 / p.J]])
        return PersidskiiSystem(A, B, C, D, tau, (nl, nl), input_matrix=E)
    if mode == "disturbance":
        D = np.array([[0.0, 1.0, 0.0],
                      [0.0, 0.0, -1.0],
                      [-1.0 / p.J, 0.0, 0.0]])
        return PersidskiiSystem(A, np.zeros((3, 0)), np.zeros((0, 3)), D, tau,
                                (), input_matrix=E)
    raise ConfigError(f"unknown cast mode '{mode}'")


def cross_coupling_disturbance(params: PmsmParams, x: np.ndarray,
                               T_L: float = 0.0) -> np.ndarray:
    """Disturbance vector (T_L, w_e i_q, w_e i_d) for the disturbance cast."""
    i_d, i_q, w_m = np.asarray(x, dtype=float).ravel()
    w_e = params.p_pairs * w_m
    return np.array([T_L, w_e * i_q, w_e * i_d])


def analytic_jacobian(sys: PersidskiiSystem) -> Callable[..., np.ndarray]:
    """d(rhs)/dx for a cast system, folding the delayed argument into x.

    Returns jac_fn(x, x_delayed, u) suitable for the continuous-discrete
    Kalman filter; the delayed argument is evaluated at the filter's own
    delayed estimate and treated as moving with the current state.
    """
    def jac(x, x_delayed, u=None):
        x_delayed = np.asarray(x_delayed, dtype=float).ravel()
        J = sys.A.copy()
        for i, nl in enumerate(sys.nonlinearities):
            c = sys.C[i]
            s = float(c @ x_delayed)
            if nl.kind == "linear":
                grad = nl.params["slope"] * c
            elif nl.kind == "tanh":
                pre, post = nl.params["pre_gain"], nl.params["post_gain"]
                grad = post * pre / np.cosh(pre * s) ** 2 * c
            elif nl.kind == "saturation":
                pl = nl.params
                grad = (pl["slope"] * c) if abs(s) < pl["limit"] else 0.0 * c
            elif nl.kind == "dead_zone":
                pl = nl.params
                grad = (pl["slope"] * c) if abs(s) > pl["width"] else 0.0 * c
            elif nl.kind == "bounded_gain":
                a = nl.params["companion"]
                glim = nl.params["gain_limit"]
                raw = float(a @ x_delayed)
                g = min(max(raw, -glim), glim)
                grad = nl.sigma * (g + glim) / (2.0 * glim) * c
                if abs(raw) < glim:
                    grad = grad + nl.sigma * s / (2.0 * glim) * a
            else:
                raise StructureError(
                    f"no analytic derivative for nonlinearity kind '{nl.kind}'")
            J -= np.outer(sys.B[:, i], grad)
        return J

    return jac


def observer_error_cast(params: PmsmParams, omega_e_max: Optional[float] = None,
                        tau: float = 0.0, i_box: Optional[float] = None) -> PersidskiiSystem:
    """Sector model of the estimation-error dynamics for gain synthesis.

    The increment of each scheduled channel between the true and estimated
    delayed states splits into three pieces: a term sector-bounded by twice
    the electrical speed box in the paired current error, a term
    sector-bounded by 2 * i_box * p_pairs in the mechanical speed error, and
    an exact linear delayed term the split leaves behind. Each original
    channel therefore expands into three channels with unit output rows
    (scale lives in the slope bounds, which keeps the LMI well conditioned);
    only the sector bounds matter for certification, so representative odd
    nonlinearities stand in for the first two.
    """
    if omega_e_max is None:
        omega_e_max = params.omega_e_max_default
    if i_box is None:
        i_box = params.i_max
    if not (omega_e_max > 0 and i_box > 0):
        raise ConfigError("omega_e_max and i_box must be positive")
    p = params
    kappa = float(i_box)
    speed_row = np.array([0.0, 0.0, 1.0])
    A = _linear_part(p).copy()
    A[0, 1] = -omega_e_max
    A[1, 0] = omega_e_max
    D = np.array([[0.0], [0.0], [-1.0 / p.J]])
    b_cols, c_rows, nls = [], [], []
    for b_i, c_i in (
        (np.array([-1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
        (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])),
    ):
        b_cols += [b_i, b_i, -kappa * b_i]
        c_rows += [c_i, speed_row, speed_row]
        nls += [SectorNonlinearity.tanh(1.0, 2.0 * omega_e_max),
                SectorNonlinearity.tanh(1.0, 2.0 * kappa * p.p_pairs),
                SectorNonlinearity.linear(float(p.p_pairs))]
    return PersidskiiSystem(A, np.column_stack(b_cols), np.vstack(c_rows), D,
                            tau, tuple(nls))


# ---------------------------------------------------------------------------
# Field-oriented control
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FocGains:
    """Cascaded PI gains with the bandwidth targets they were placed for."""

    kp_current: float
    ki_current: float
    kp_speed: float
    ki_speed: float
    f_current_hz: float
    f_speed_hz: float
    speed_crossover: float      # realized speed-loop crossover target, rad/s
    command_delay: float = 0.0

    def __post_init__(self):
        for name in ("kp_current", "kp_speed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("ki_current", "ki_speed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in (
            "kp_current", "ki_current", "kp_speed", "ki_speed",
            "f_current_hz", "f_speed_hz", "speed_crossover", "command_delay")}


def foc_gains(params: PmsmParams, f_current: float = 500.0, f_speed: float = 50.0,
              command_delay: float = 0.0) -> FocGains:
    """Pole-placement tuning of the cascade.

    Current PIs cancel the stator pole (kp = L_s w_ci, ki = R_s w_ci), giving
    a first-order loop at the current bandwidth. The speed PI is placed below
    the current loop; when a command-path dead time is declared, the speed
    crossover is additionally capped so the known delay contributes at most
    DELAY_DETUNE_PHASE radians of phase at crossover.
    """
    if not (f_current > 0 and f_speed > 0):
        raise ConfigError("bandwidth targets must be positive")
    if command_delay < 0:
        raise ConfigError("command_delay must be non-negative")
    w_ci = 2.0 * math.pi * f_current
    w_cs = 2.0 * math.pi * f_speed
    if command_delay > 0:
        w_cs = min(w_cs, DELAY_DETUNE_PHASE / command_delay)
    if w_cs >= w_ci:
        raise ConfigError("speed loop must be slower than the current loop")
    kp_i = params.L_s * w_ci
    ki_i = params.R_s * w_ci
    # back off for the inner-loop lag so the realized outer bandwidth stays
    # at or below the placement target
    kp_w = 0.85 * (1.0 - w_cs / w_ci) * params.J * w_cs / params.torque_constant
    ki_w = kp_w * max(params.B_f / params.J, w_cs / 12.0)
    return FocGains(kp_i, ki_i, kp_w, ki_w, f_current, f_speed, w_cs, command_delay)


class FocController:
    """Cascaded PI speed/current controller with decoupling feedforward.

    Outputs (u_d, u_q); integrators are clamped so their contribution can
    never exceed the corresponding actuator limit (anti-windup). With
    feedforward=False the decoupling terms are dropped (current-mode rigs
    certify against a cast without them, so the simulated law must match).
    """

    def __init__(self, params: PmsmParams, gains: FocGains, feedforward: bool = True):
        self.params = params
        self.gains = gains
        self.feedforward = feedforward
        self.reset()

    def reset(self) -> None:
        self.z_id = 0.0
        self.z_iq = 0.0
        self.z_w = 0.0

    def current_reference(self, omega_meas: float, omega_ref: float, dt: float) -> float:
        """Outer speed PI producing the q-axis current command."""
        g, p = self.gains, self.params
        e_w = omega_ref - omega_meas
        if g.ki_speed > 0:
            self.z_w = float(np.clip(self.z_w + e_w * dt,
                                     -p.i_max / g.ki_speed, p.i_max / g.ki_speed))
        return float(np.clip(g.kp_speed * e_w + g.ki_speed * self.z_w,
                             -p.i_max, p.i_max))

    def voltage_step(self, x_meas: np.ndarray, i_q_ref: float, dt: float) -> np.ndarray:
        """Inner current PIs plus decoupling feedforward."""
        g, p = self.gains, self.params
        i_d, i_q, w_m = np.asarray(x_meas, dtype=float).ravel()
        w_e = p.p_pairs * w_m
        e_d = -i_d
        e_q = i_q_ref - i_q
        if g.ki_current > 0:
            lim_z = p.u_max / g.ki_current
            self.z_id = float(np.clip(self.z_id + e_d * dt, -lim_z, lim_z))
            self.z_iq = float(np.clip(self.z_iq + e_q * dt, -lim_z, lim_z))
        u_d = g.kp_current * e_d + g.ki_current * self.z_id
        u_q = g.kp_current * e_q + g.ki_current * self.z_iq
        if self.feedforward:
            u_d -= w_e * p.L_s * i_q
            u_q += w_e * p.L_s * i_d + w_e * p.psi_f
        return np.clip(np.array([u_d, u_q]), -p.u_max, p.u_max)

    def step(self, x_meas: np.ndarray, omega_ref: float, dt: float) -> np.ndarray:
        i_q_ref = self.current_reference(float(x_meas[2]), omega_ref, dt)
        return self.voltage_step(x_meas, i_q_ref, dt)

    def step_current(self, x_meas: np.ndarray, i_q_ref: float, dt: float) -> np.ndarray:
        """Current-mode operation: the q-axis reference is supplied externally."""
        return self.voltage_step(x_meas, float(np.clip(i_q_ref, -self.params.i_max,
                                                       self.params.i_max)), dt)


def foc_closed_loop_matrices(params: PmsmParams, gains: FocGains,
                             x_op: Optional[np.ndarray] = None) -> dict:
    """Linearized cascade about an operating point, delayed path factored out.

    States: (i_d, i_q, w_m, z_id, z_iq, z_w). The q-current command travels
    the delayed command channel; it enters as the rank-one term
    b_cmd * k_cmd^T evaluated at the delayed state. Everything local to the
    drive (current PIs, feedforward) is undelayed and sits in A0.
    Returns A0, b_cmd, k_cmd, b_ref (speed reference input), d_load.
    """
    p, g = params, gains
    if x_op is None:
        x_op = np.zeros(3)
    i_d0, i_q0, w0 = np.asarray(x_op, dtype=float).ravel()
    w_e0 = p.p_pairs * w0
    L = p.L_s
    A0 = np.zeros((6, 6))
    # plant rows with the local voltage laws folded in
    A0[0, :3] = [-p.R_s / L, w_e0, p.p_pairs * i_q0]
    A0[1, :3] = [-w_e0, -p.R_s / L, -p.p_pairs * i_d0 - p.p_pairs * p.psi_f / L]
    A0[2, :3] = [0.0, p.torque_constant / p.J, -p.B_f / p.J]
    # u_d = -kp_i i_d + ki_i z_id - w_e L i_q   (feedforward linearized)
    A0[0, 0] += -g.kp_current / L
    A0[0, 1] += -w_e0
    A0[0, 2] += -p.p_pairs * i_q0
    A0[0, 3] = g.ki_current / L
    # u_q = kp_i (r_d - i_q) + ki_i z_iq + w_e L i_d + w_e psi  (r_d delayed)
    A0[1, 0] += w_e0
    A0[1, 1] += -g.kp_current / L
    A0[1, 2] += p.p_pairs * i_d0 + p.p_pairs * p.psi_f / L
    A0[1, 4] = g.ki_current / L
    # integrators
    A0[3, 0] = -1.0
    A0[4, 1] = -1.0
    A0[5, 2] = -1.0
    b_cmd = np.array([0.0, g.kp_current / L, 0.0, 0.0, 1.0, 0.0])
    k_cmd = np.array([0.0, 0.0, -g.kp_speed, 0.0, 0.0, g.ki_speed])
    b_ref = g.kp_speed * b_cmd
    b_ref[5] += 1.0
    d_load = np.array([0.0, 0.0, -1.0 / p.J, 0.0, 0.0, 0.0])
    return {"A0": A0, "b_cmd": b_cmd, "k_cmd": k_cmd, "b_ref": b_ref,
            "d_load": d_load}


def delay_rated_gains(params: PmsmParams, g_current: float = 300.0,
                      w_speed: float = 30.0) -> FocGains:
    """Proportional-only tuning for loops that must ride through dead time.

    Integral action would leave the loop marginally stable when the delayed
    feedback path is opened, which the sector casts (whose family includes
    the zero function) cannot certify; pure proportional loops keep the open
    loop self-damped. g_current is the current-loop gain kp/L_s in rad/s,
    w_speed the speed-loop crossover in rad/s.
    """
    if not (g_current > 0 and w_speed > 0):
        raise ConfigError("loop gains must be positive")
    if w_speed * 5.0 > g_current:
        raise ConfigError("speed loop must sit well below the current loop")
    kp_i = params.L_s * g_current
    kp_w = w_speed * params.J / params.torque_constant
    return FocGains(kp_i, 0.0, kp_w, 0.0,
                    g_current / (2.0 * math.pi), w_speed / (2.0 * math.pi),
                    w_speed)


def foc_delay_cast(params: PmsmParams, gains: FocGains, tau: float,
                   x_op: Optional[np.ndarray] = None,
                   include_speed_loop: bool = False,
                   feedforward: bool = False) -> PersidskiiSystem:
    """Closed loop with the voltage commands riding a delayed transport channel.

    States (i_d, i_q, w_m); the two controller outputs, linearized about the
    operating point, enter as linear slope-one channels evaluated at the
    delayed state, so the delayed term is + B_u K x(t - tau) written in
    sector-channel form. The disturbance input is the load torque. Requires
    proportional-only gains: integral states would make the open loop (the
    zero-function member of the sector family) non-Hurwitz and hence never
    certifiable.

    The default drops the speed loop and the decoupling feedforward from the
    delayed laws (current-mode drive). Those paths read the mechanical state
    into the electrical rows, and certification then has to budget the
    injection row against the weakly damped speed row at once; with diagonal
    Lyapunov weights that tax is infeasible at any useful bandwidth, so only
    the channel-aligned current loops are offered as the certified loop.
    """
    if gains.ki_current != 0.0 or gains.ki_speed != 0.0:
        raise StructureError("delay cast requires proportional-only gains")
    p, g = params, gains
    if x_op is None:
        x_op = np.zeros(3)
    i_d0, i_q0, w0 = np.asarray(x_op, dtype=float).ravel()
    w_e0 = p.p_pairs * w0
    L = p.L_s
    A0 = _linear_part(p).copy()
    A0[0, 1] += w_e0
    A0[0, 2] += p.p_pairs * i_q0
    A0[1, 0] += -w_e0
    A0[1, 2] += -p.p_pairs * i_d0
    # voltage laws about the operating point: rows of K give u = K x + const
    K = np.array([[-g.kp_current, 0.0, 0.0],
                  [0.0, -g.kp_current, 0.0]])
    if include_speed_loop:
        K[1, 2] -= g.kp_current * g.kp_speed
    if feedforward:
        K[0, 1] -= w_e0 * L
        K[0, 2] -= p.p_pairs * L * i_q0
        K[1, 0] += w_e0 * L
        K[1, 2] += p.p_pairs * (L * i_d0 + p.psi_f)
    B = np.column_stack([-np.array([1.0 / L, 0.0, 0.0]),
                         -np.array([0.0, 1.0 / L, 0.0])])
    D = np.array([[0.0], [0.0], [-1.0 / p.J]])
    nls = (SectorNonlinearity.linear(1.0), SectorNonlinearity.linear(1.0))
    return PersidskiiSystem(A0, B, K, D, tau, nls)


def _bandwidth_of(A: np.ndarray, b: np.ndarray, c: np.ndarray,
                  w_hi: float) -> float:
    """-3 dB frequency of c (sI - A)^-1 b relative to its DC gain."""
    n = A.shape[0]
    dc = abs(c @ np.linalg.solve(-A, b))
    if dc == 0:
        raise StructureError("transfer function has zero DC gain")
    target = dc / math.sqrt(2.0)

    def mag(w: float) -> float:
        return abs(c @ np.linalg.solve(1j * w * np.eye(n) - A, b))

    lo, hi = 1e-3, w_hi
    if mag(hi) > target:
        raise StructureError("bandwidth exceeds the search range")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if mag(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-12:
            break
    return math.sqrt(lo * hi)


def closed_loop_bandwidths(params: PmsmParams, gains: FocGains) -> Tuple[float, float]:
    """(current-loop, speed-loop) -3 dB bandwidths in rad/s, no delay.

    The current loop is measured on the q-axis subsystem alone (speed frozen);
    the speed loop on the full linearized cascade.
    """
    p, g = params, gains
    L = p.L_s
    A_i = np.array([[-(p.R_s + g.kp_current) / L, g.ki_current / L],
                    [-1.0, 0.0]])
    b_i = np.array([g.kp_current / L, 1.0])
    c_i = np.array([1.0, 0.0])
    bw_inner = _bandwidth_of(A_i, b_i, c_i, 1e6)
    m = foc_closed_loop_matrices(params, gains)
    A_cl = m["A0"] + np.outer(m["b_cmd"], m["k_cmd"])
    bw_outer = _bandwidth_of(A_cl, m["b_ref"], np.array([0, 0, 1.0, 0, 0, 0]), 1e6)
    return bw_inner, bw_outer
