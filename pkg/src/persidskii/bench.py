"""Simulated drive benchmark: co-simulation engine and experiment runners.

Three scenarios run on the dq motor model: an estimator comparison under a
load step, a speed-tracking comparison between the cascaded loop and two
sampling controllers built on identified lifted models, and a command-delay
sweep that locates each controller's instability onset and compares the
certified loop's onset against the delay bound computed from its sector cast.

Every runner writes CSV tables plus a summary.json whose numbers are
recomputable from the tables; CSV is the authoritative output. All randomness
is drawn from seeds carried in the scenario config, so identical configs
produce byte-identical tables. Wall-clock timings never enter these files
(the command-line layer keeps them in the run manifest).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.signal

from .certify import TauMaxResult, tau_max_bisection
from .errors import ConfigError, DivergenceError, NumericError, StructureError
from .koopman import (
    Dictionary,
    IdentificationReport,
    IdentifyConfig,
    LiftedModel,
    edmd_unconstrained,
    identify_constrained,
)
from .model import BLOWUP_GUARD, rhs
from .mppi import MppiConfig, MppiController
from .observer import (
    EkfConfig,
    EkfEstimator,
    MeasurementModel,
    PersidskiiEstimator,
    estimation_experiment,
)
from .pmsm import (
    FocController,
    PmsmParams,
    analytic_jacobian,
    delay_rated_gains,
    foc_delay_cast,
    pmsm_rhs,
    to_persidskii,
)

RAD_PER_RPM = 2.0 * math.pi / 60.0


# ---------------------------------------------------------------------------
# CSV and summary plumbing
# ---------------------------------------------------------------------------

def format_cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path, columns: Sequence[str], rows) -> None:
    """Plain comma-separated table; floats at 17 significant digits.

    17 digits round-trip IEEE doubles exactly, so any statistic recomputed
    from the file matches the in-memory value bit for bit.
    """
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(v) for v in row) + "\n")


def read_csv(path) -> Tuple[list, np.ndarray]:
    """Read a numeric table written by write_csv; returns (columns, array)."""
    with open(path) as fh:
        head = fh.readline().strip()
        if not head:
            raise ConfigError(f"{path}: empty table (no header row)")
        columns = head.split(",")
        data = []
        for line in fh:
            line = line.strip()
            if line:
                data.append([float(c) for c in line.split(",")])
    arr = np.asarray(data, dtype=float) if data else np.empty((0, len(columns)))
    return columns, arr


def json_safe(obj):
    """Recursively convert to plain JSON types; non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


@dataclass
class ExperimentReport:
    """Scenario outputs: header echo, scalar summary, and table file names."""

    scenario: str
    header: dict
    summary: dict
    tables: dict
    out_dir: str

    def summary_path(self) -> str:
        return os.path.join(self.out_dir, "summary.json")


def write_report(report: ExperimentReport) -> str:
    doc = {
        "scenario": report.scenario,
        "header": json_safe(report.header),
        "summary": json_safe(report.summary),
        "tables": json_safe(report.tables),
    }
    path = report.summary_path()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def params_header(params: PmsmParams, **extra) -> dict:
    """Report header: full machine parameters (J and B_f always declared)."""
    head = {"params": asdict(params)}
    head.update(extra)
    return head


def window_rmse(t: np.ndarray, err: np.ndarray, window: Tuple[float, float]) -> float:
    """Root-mean-square of err over samples with t inside [t0, t1].

    Non-finite samples inside the window give math.inf (diverged run).
    """
    t = np.asarray(t, dtype=float).ravel()
    err = np.asarray(err, dtype=float).ravel()
    mask = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if not mask.any():
        raise StructureError("RMSE window contains no samples")
    v = err[mask]
    if not np.all(np.isfinite(v)):
        return math.inf
    return float(np.sqrt(np.mean(v * v)))


def recovery_time(t: np.ndarray, truth: np.ndarray, est: np.ndarray,
                  t_event: float, band_frac: float) -> float:
    """Time after t_event at which the estimate settles into the relative band.

    Returns 0 when the estimate never leaves the band after the event, and
    math.inf when it is still outside at the final sample. Otherwise the
    first post-event time from which |est - truth| <= band_frac * |truth|
    holds through the end of the record.
    """
    t = np.asarray(t, dtype=float).ravel()
    mask = t >= t_event - 1e-12
    ts = t[mask]
    err = np.abs(np.asarray(est, dtype=float)[mask] - np.asarray(truth, dtype=float)[mask])
    band = band_frac * np.abs(np.asarray(truth, dtype=float)[mask])
    out = err > band
    if not out.any():
        return 0.0
    if out[-1]:
        return math.inf
    last_out = int(np.nonzero(out)[0][-1])
    return float(ts[last_out + 1] - t_event)


# ---------------------------------------------------------------------------
# Seeded test signals
# ---------------------------------------------------------------------------

def band_limited_signal(seed: int, band: Tuple[float, float], n_tones: int,
                        rms: float) -> Callable[[float], float]:
    """Sum of equal-amplitude sinusoids with seeded frequencies and phases.

    Frequencies are drawn uniformly over band (rad/s); the common amplitude
    is set so the long-run RMS equals rms.
    """
    if not (band[1] > band[0] > 0.0):
        raise ConfigError("signal band must satisfy 0 < lo < hi")
    if n_tones < 1:
        raise ConfigError("need at least one tone")
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(band[0], band[1], n_tones)
    phases = rng.uniform(0.0, 2.0 * math.pi, n_tones)
    amp = rms * math.sqrt(2.0 / n_tones)

    def value(t: float) -> float:
        return float(amp * np.sum(np.sin(freqs * t + phases)))

    return value


def prbs_signal(seed: int, amp: float, chip: float) -> Callable[[float], float]:
    """Pseudo-random binary sequence of +/-amp levels held for chip seconds."""
    if chip <= 0:
        raise ConfigError("chip duration must be positive")
    rng = np.random.default_rng(seed)
    levels = (2.0 * rng.integers(0, 2, size=65536) - 1.0) * amp

    def value(t: float) -> float:
        return float(levels[int(t / chip) % levels.size])

    return value


# ---------------------------------------------------------------------------
# Co-simulation engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriveResult:
    t: np.ndarray             # (N+1,)
    x: np.ndarray             # (N+1, 3), nan rows after divergence
    u_applied: np.ndarray     # (N+1, 2) voltage at the terminals during [t_k, t_k+dt)
    diverged: bool
    t_diverged: float         # nan when the run finished
    reason: str = ""


class _PadeChannel:
    """First-order all-pass delay model x' = -(2/tau) x + u, y = (4/tau) x - u."""

    def __init__(self, tau: float, m: int):
        self.a = 2.0 / tau
        self.state = np.zeros(m)

    def step(self, u: np.ndarray, h: float) -> np.ndarray:
        decay = math.exp(-self.a * h)
        self.state = decay * self.state + (1.0 - decay) / self.a * u
        return 2.0 * self.a * self.state - u


def simulate_drive(
    params: PmsmParams,
    controller: Callable[[int, float, np.ndarray], np.ndarray],
    t_end: float,
    dt_sim: float,
    dt_control: float,
    x0: np.ndarray,
    load_fn: Optional[Callable[[float], float]] = None,
    delay: float = 0.0,
    delay_mode: str = "transport",
) -> DriveResult:
    """Fixed-step closed-loop run with a delayed command channel.

    The plant integrates with classical fourth-order steps of dt_sim; the
    controller ticks every dt_control (an integer multiple of dt_sim) on the
    current state and issues a voltage command that reaches the terminals
    delay seconds later, zero-order-held in between. delay_mode "transport"
    realizes the dead time exactly through a command queue; "pade" routes
    commands through a first-order all-pass instead. Controller exceptions of
    the divergence kind and state blow-up both end the run early with the
    remaining samples marked nan.
    """
    if dt_sim <= 0 or dt_control <= 0:
        raise ConfigError("step sizes must be positive")
    ratio = dt_control / dt_sim
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError(
            f"dt_control must be an integer multiple of dt_sim "
            f"(dt_control={dt_control}, dt_sim={dt_sim})")
    if delay < 0 or not math.isfinite(delay):
        raise ConfigError("delay must be finite and non-negative")
    if delay_mode not in ("transport", "pade"):
        raise ConfigError(f"unknown delay_mode '{delay_mode}'")
    substeps = int(round(ratio))
    n_steps = int(round(t_end / dt_sim))
    if abs(n_steps * dt_sim - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigError("t_end must be an integer multiple of dt_sim")

    x = np.asarray(x0, dtype=float).ravel().copy()
    if x.size != 3:
        raise ConfigError("drive state is (i_d, i_q, omega_m)")
    load = load_fn if load_fn is not None else (lambda t: 0.0)

    t_grid = np.arange(n_steps + 1) * dt_sim
    xs = np.full((n_steps + 1, 3), np.nan)
    us = np.full((n_steps + 1, 2), np.nan)
    xs[0] = x

    pending: list = []           # (t_effective, command) in issue order
    applied = np.zeros(2)
    cmd_in = np.zeros(2)
    pade = None
    if delay_mode == "pade" and delay > 0.0:
        pade = _PadeChannel(delay, 2)

    diverged = False
    t_div = math.nan
    reason = ""
    tick = 0
    h = dt_sim
    for k in range(n_steps):
        t = t_grid[k]
        if k % substeps == 0:
            try:
                u_cmd = np.asarray(controller(tick, t, x), dtype=float).ravel()
            except (DivergenceError, NumericError) as exc:
                diverged, t_div, reason = True, float(t), f"controller: {exc}"
                break
            if u_cmd.size != 2:
                raise StructureError("controller must return a (u_d, u_q) pair")
            tick += 1
            if delay_mode == "transport" and delay > 0.0:
                pending.append((t + delay, u_cmd))
            else:
                cmd_in = u_cmd
        if delay_mode == "transport":
            if delay > 0.0:
                while pending and pending[0][0] <= t + 1e-12:
                    cmd_in = pending.pop(0)[1]
            applied = cmd_in
        else:
            applied = pade.step(cmd_in, h) if pade is not None else cmd_in
        us[k] = applied

        k1 = pmsm_rhs(params, x, applied, load(t))
        k2 = pmsm_rhs(params, x + 0.5 * h * k1, applied, load(t + 0.5 * h))
        k3 = pmsm_rhs(params, x + 0.5 * h * k2, applied, load(t + 0.5 * h))
        k4 = pmsm_rhs(params, x + h * k3, applied, load(t + h))
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > BLOWUP_GUARD:
            diverged, t_div, reason = True, float(t_grid[k + 1]), "state blow-up"
            break
        xs[k + 1] = x

    if not diverged:
        us[n_steps] = applied
    return DriveResult(t_grid, xs, us, diverged, t_div, reason)

# ---------------------------------------------------------------------------
# Excitation and identification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExcitationConfig:
    """Open-loop excitation run: voltage chirps plus a binary load sequence.

    The q-axis bias rides a piecewise-linear profile that walks the machine
    through its speed range without current spikes; both axes add
    logarithmic chirps, and the load input switches pseudo-randomly. Samples
    are taken every dt_sample; the plant integrates at dt_sim underneath.
    """

    duration: float = 50.0
    dt_sample: float = 1e-3
    dt_sim: float = 2.5e-4
    seed: int = 12345
    u_d_amp: float = 4.0
    u_q_amp: float = 6.0
    chirp_f0: float = 0.4
    chirp_f1: float = 110.0
    u_q_bias_times: tuple = (0.0, 5.0, 12.0, 20.0, 28.0, 35.0, 42.0, 50.0)
    u_q_bias_values: tuple = (0.0, 15.0, 60.0, 90.0, 30.0, 75.0, 50.0, 10.0)
    prbs_amp: float = 1.0
    prbs_chip: float = 0.04

    def __post_init__(self):
        if self.duration <= 0 or self.dt_sample <= 0 or self.dt_sim <= 0:
            raise ConfigError("excitation durations and steps must be positive")
        if len(self.u_q_bias_times) != len(self.u_q_bias_values):
            raise ConfigError("bias profile times and values must pair up")


def rig_excitation(seed: int = 12345) -> ExcitationConfig:
    """Excitation sized for a braked commissioning rig (small speed range)."""
    return ExcitationConfig(
        seed=seed,
        u_d_amp=4.0,
        u_q_amp=5.0,
        chirp_f1=110.0,
        u_q_bias_times=(0.0, 6.0, 14.0, 22.0, 30.0, 38.0, 44.0, 50.0),
        u_q_bias_values=(0.0, 6.0, -8.0, 8.0, -5.0, 9.0, -9.0, 2.0),
        prbs_amp=0.8,
    )


def excitation_data(params: PmsmParams, cfg: ExcitationConfig):
    """Simulate the excitation run; return (triples, t, x, u) at the sample rate.

    triples are (x_k, u_k, x_{k+1}) with u_k held over [t_k, t_{k+1});
    the load sequence is deliberately absent from the regressors, so the fit
    has to average over it like any other unmeasured disturbance.
    """
    rng = np.random.default_rng(cfg.seed)
    phi_d, phi_q = rng.uniform(0.0, 360.0, 2)
    load = prbs_signal(cfg.seed + 1, cfg.prbs_amp, cfg.prbs_chip)
    times = np.asarray(cfg.u_q_bias_times, dtype=float)
    values = np.asarray(cfg.u_q_bias_values, dtype=float)

    def u_wave(t: float) -> np.ndarray:
        u_d = cfg.u_d_amp * scipy.signal.chirp(
            t, cfg.chirp_f0, cfg.duration, cfg.chirp_f1, method="logarithmic", phi=phi_d)
        u_q = float(np.interp(t, times, values)) + cfg.u_q_amp * scipy.signal.chirp(
            t, 1.37 * cfg.chirp_f0, cfg.duration, 0.8 * cfg.chirp_f1,
            method="logarithmic", phi=phi_q)
        return np.array([u_d, u_q])

    res = simulate_drive(
        params,
        lambda tick, t, x: u_wave(t),
        t_end=cfg.duration,
        dt_sim=cfg.dt_sim,
        dt_control=cfg.dt_sample,
        x0=np.zeros(3),
        load_fn=load,
    )
    if res.diverged:
        raise DivergenceError(f"excitation run diverged: {res.reason}")
    stride = int(round(cfg.dt_sample / cfg.dt_sim))
    t_s = res.t[::stride]
    x_s = res.x[::stride]
    u_s = res.u_applied[::stride]
    triples = [(x_s[k], u_s[k], x_s[k + 1]) for k in range(len(t_s) - 1)]
    return triples, t_s, x_s, u_s


@dataclass(frozen=True)
class IdentificationConfig:
    """Dictionary and constraint settings for the lifted-model fits."""

    degree: int = 2
    gamma_id: float = 200.0
    max_alternations: int = 12
    conv_tol: float = 1e-6
    ridge: float = 1e-10

    def __post_init__(self):
        if self.degree < 1:
            raise ConfigError("dictionary degree must be >= 1")
        if self.gamma_id <= 0:
            raise ConfigError("gamma_id must be positive")


@dataclass(frozen=True)
class IdentifiedModels:
    dictionary: Dictionary
    unconstrained: LiftedModel
    constrained: LiftedModel
    report: IdentificationReport


def identify_models(params: PmsmParams, exc: ExcitationConfig,
                    idc: IdentificationConfig) -> IdentifiedModels:
    """Excite the plant, then fit the plain and the stability-constrained model."""
    triples, _, _, _ = excitation_data(params, exc)
    dictionary = Dictionary.monomials(3, idc.degree)
    model_u = edmd_unconstrained(dictionary, triples, dt=exc.dt_sample, ridge=idc.ridge)
    cfg = IdentifyConfig(
        max_alternations=idc.max_alternations,
        conv_tol=idc.conv_tol,
        gamma_id=idc.gamma_id,
        dt=exc.dt_sample,
        ridge=idc.ridge,
    )
    model_c, report = identify_constrained(dictionary, triples, cfg)
    return IdentifiedModels(dictionary, model_u, model_c, report)


# ---------------------------------------------------------------------------
# Controller adapters
# ---------------------------------------------------------------------------

class FocSpeedDrive:
    """Cascade loop tracking a speed reference; ticks at the sim rate."""

    def __init__(self, params: PmsmParams, gains, ref_fn: Callable[[float], float],
                 dt: float, feedforward: bool = True):
        self.ctl = FocController(params, gains, feedforward=feedforward)
        self.ref_fn = ref_fn
        self.dt = dt

    def __call__(self, tick: int, t: float, x: np.ndarray) -> np.ndarray:
        return self.ctl.step(x, self.ref_fn(t), self.dt)


class FocCurrentDrive:
    """Current-mode loop tracking a q-axis reference; no speed loop."""

    def __init__(self, params: PmsmParams, gains, iq_ref_fn: Callable[[float], float],
                 dt: float, feedforward: bool = False):
        self.ctl = FocController(params, gains, feedforward=feedforward)
        self.iq_ref_fn = iq_ref_fn
        self.dt = dt

    def __call__(self, tick: int, t: float, x: np.ndarray) -> np.ndarray:
        return self.ctl.step_current(x, self.iq_ref_fn(t), self.dt)


class MppiDrive:
    """Sampling controller fed a per-horizon reference window.

    step seeds advance with the tick index from a per-run base, so two runs
    with the same base draw the same exploration noise at the same ticks
    (common random numbers across sweep points).
    """

    def __init__(self, controller: MppiController,
                 ref_window_fn: Callable[[float], np.ndarray], seed_base: int):
        self.ctl = controller
        self.ref_window_fn = ref_window_fn
        self.seed_base = int(seed_base)
        self.last_diag: dict = {}

    def __call__(self, tick: int, t: float, x: np.ndarray) -> np.ndarray:
        u, diag = self.ctl.control_step(
            x, self.ref_window_fn(t), step_seed=self.seed_base + tick)
        self.last_diag = diag
        return u


def _mppi_controller(model: LiftedModel, dictionary: Dictionary, params: PmsmParams,
                     samples: int, horizon: float, dt: float, noise_std: float,
                     lambda_temp: float, q_diag: Sequence[float], r_u: float,
                     seed: int = 0) -> MppiController:
    cfg = MppiConfig(
        M=samples,
        horizon=horizon,
        dt=dt,
        lambda_temp=lambda_temp,
        noise_std=noise_std,
        seed=seed,
        u_min=-params.u_max * np.ones(2),
        u_max=params.u_max * np.ones(2),
    )
    Q = np.diag(np.asarray(q_diag, dtype=float))
    R = r_u * np.eye(2)
    return MppiController(model, dictionary, cfg, Q, R)


def _ref_window(ref_fn: Callable[[float], float], steps: int, dt: float
                ) -> Callable[[float], np.ndarray]:
    offsets = np.arange(steps) * dt

    def window(t: float) -> np.ndarray:
        out = np.zeros((steps, 3))
        out[:, 2] = [ref_fn(t + o) for o in offsets]
        return out

    return window


# ---------------------------------------------------------------------------
# Estimator comparison scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObserverScenario:
    """Load-step estimation run: tuned injection observer vs Kalman baseline.

    The plant holds a speed setpoint under the cascade loop; a constant load
    torque lands at load_step_time. Both estimators see the two phase
    currents plus seeded Gaussian noise and the commanded voltages, never the
    load. The injection gain is a commissioning tune: diagonal current
    damping, a speed row driven by the q-current innovation, and (when
    decouple is set) off-diagonal entries that rotate the injection against
    the electrical frame coupling at the setpoint.
    """

    speed_ref_rpm: float = 1000.0
    t_end: float = 3.0
    dt_sim: float = 1e-4
    load_step_time: float = 1.0
    load_torque: float = 2.0
    noise_var: float = 0.05
    init_speed_factor: float = 0.8
    seeds: tuple = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)
    band_frac: float = 0.02
    gain_current: float = 10.0
    gain_speed: float = -600.0
    decouple: bool = True
    ekf_process_var: tuple = (1e-2, 1e-2, 1e-1)
    ekf_init_var: tuple = (0.1, 0.1, 10.0)

    def __post_init__(self):
        if not (0.0 < self.load_step_time < self.t_end):
            raise ConfigError("load step must land strictly inside the run")
        if self.noise_var < 0:
            raise ConfigError("noise variance must be non-negative")
        if not self.seeds:
            raise ConfigError("need at least one seed")


def tuned_injection_gain(params: PmsmParams, sc: ObserverScenario) -> np.ndarray:
    """Hand-tuned 3x2 injection gain for the current-only measurement."""
    w_e0 = params.p_pairs * sc.speed_ref_rpm * RAD_PER_RPM
    L = np.array([
        [sc.gain_current, 0.0],
        [0.0, sc.gain_current],
        [0.0, sc.gain_speed],
    ])
    if sc.decouple:
        L[0, 1] += w_e0
        L[1, 0] -= w_e0
    return L


def run_observer_experiment(params: PmsmParams, sc: ObserverScenario,
                            out_dir: str) -> ExperimentReport:
    """Per-seed co-simulation of plant, loop, and both estimators.

    Emits one time-series CSV per seed (truth plus both estimates), a
    per-seed metric table, and a summary with speed-RMSE and recovery-time
    comparisons over the post-step window.
    """
    os.makedirs(out_dir, exist_ok=True)
    cast = to_persidskii(params, tau=0.0)
    H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    noise_std = math.sqrt(sc.noise_var)
    meas = MeasurementModel(H, np.array([noise_std, noise_std]))
    w_ref = sc.speed_ref_rpm * RAD_PER_RPM
    i_q_trim = params.B_f * w_ref / params.torque_constant
    x0 = np.array([0.0, i_q_trim, w_ref])
    x0_hat = np.array([0.0, i_q_trim, sc.init_speed_factor * w_ref])
    window = (sc.load_step_time, sc.t_end)

    L_gain = tuned_injection_gain(params, sc)
    jac = analytic_jacobian(cast)
    ekf_cfg = EkfConfig(
        process_cov=np.diag(sc.ekf_process_var),
        measurement_cov=max(sc.noise_var, 1e-12) * np.eye(2),
        initial_cov=np.diag(sc.ekf_init_var),
    )

    def load_fn(t: float) -> float:
        return sc.load_torque if t >= sc.load_step_time else 0.0

    gains = delay_rated_gains(params, 300.0, 60.0)
    table_rows = []
    per_seed = []
    tables = {}
    state_names = ("i_d", "i_q", "omega_m")
    for seed in sc.seeds:
        runs = {}
        for name in ("persidskii", "ekf"):
            foc = FocController(params, gains)
            if name == "persidskii":
                est = PersidskiiEstimator(cast, meas, L_gain)
            else:
                est = EkfEstimator(
                    ekf_cfg,
                    lambda xv, xd, u: rhs(cast, xv, xd, None, u),
                    jac, H, tau=0.0)
            truth, est_traj, _ = estimation_experiment(
                cast, meas, est, x0, x0_hat, sc.t_end, sc.dt_sim,
                w=load_fn,
                u=lambda t, xv: foc.step(xv, w_ref, sc.dt_sim),
                seed=seed,
                rmse_window=window,
            )
            runs[name] = (truth, est_traj)
        t = runs["persidskii"][0].t
        truth_x = runs["persidskii"][0].x
        if not np.array_equal(truth_x, runs["ekf"][0].x):
            raise NumericError("truth trajectories desynchronized between estimator runs")
        est_p = runs["persidskii"][1].x
        est_k = runs["ekf"][1].x

        csv_name = f"observer_seed{seed}.csv"
        cols = (["t"] + [f"true_{s}" for s in state_names]
                + [f"persidskii_{s}" for s in state_names]
                + [f"ekf_{s}" for s in state_names])
        write_csv(os.path.join(out_dir, csv_name), cols,
                  np.column_stack([t, truth_x, est_p, est_k]))
        tables[f"seed{seed}"] = csv_name

        row = {"seed": seed}
        for name, est_x in (("persidskii", est_p), ("ekf", est_k)):
            for j, s in enumerate(state_names):
                row[f"rmse_{name}_{s}"] = window_rmse(t, est_x[:, j] - truth_x[:, j], window)
            row[f"recovery_{name}"] = recovery_time(
                t, truth_x[:, 2], est_x[:, 2], sc.load_step_time, sc.band_frac)
        per_seed.append(row)
        table_rows.append([
            seed,
            row["rmse_persidskii_omega_m"], row["rmse_ekf_omega_m"],
            row["recovery_persidskii"], row["recovery_ekf"],
        ])

    write_csv(os.path.join(out_dir, "observer_metrics.csv"),
              ["seed", "rmse_speed_persidskii", "rmse_speed_ekf",
               "recovery_persidskii", "recovery_ekf"], table_rows)
    tables["metrics"] = "observer_metrics.csv"

    wins_rmse = sum(1 for r in per_seed
                    if r["rmse_persidskii_omega_m"] < r["rmse_ekf_omega_m"])
    wins_recovery = sum(1 for r in per_seed
                        if r["recovery_persidskii"] < r["recovery_ekf"])
    header = params_header(
        params,
        injection_gain=L_gain.tolist(),
        foc_gains=asdict(gains),
        scenario=asdict(sc),
    )
    summary = {
        "rmse_window": list(window),
        "band_frac": sc.band_frac,
        "per_seed": per_seed,
        "wins_rmse_speed": wins_rmse,
        "wins_recovery": wins_recovery,
        "n_seeds": len(sc.seeds),
        "mean_rmse_speed_persidskii": float(np.mean(
            [r["rmse_persidskii_omega_m"] for r in per_seed])),
        "mean_rmse_speed_ekf": float(np.mean(
            [r["rmse_ekf_omega_m"] for r in per_seed])),
    }
    report = ExperimentReport("observer", header, summary, tables, out_dir)
    write_report(report)
    return report

# ---------------------------------------------------------------------------
# Speed-tracking comparison scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackingScenario:
    """Speed tracking under a fixed command delay: cascade loop vs samplers.

    The reference is a sinusoid spanning [base - amp, base + amp] rpm with a
    step_frac * base rpm step added at step_time ("sweep"), or a constant
    base rpm setpoint ("constant"). The cascade loop ticks at the sim rate;
    the sampling controllers tick at dt_control and preview the reference
    over their horizon. Identified models come from one excitation run.
    """

    t_end: float = 3.0
    dt_sim: float = 1e-4
    dt_control: float = 1e-3
    tau: float = 5e-3
    reference: str = "sweep"
    base_rpm: float = 1000.0
    amp_rpm: float = 400.0
    freq_hz: float = 0.4
    step_frac: float = 0.2
    step_time: float = 1.5
    rmse_skip: float = 0.4
    seeds: tuple = (0, 1, 2, 3, 4)
    controllers: tuple = ("foc", "mppi_unconstrained", "mppi_icode")
    foc_g_current: float = 300.0
    foc_w_speed: float = 60.0
    mppi_samples: int = 256
    mppi_horizon: float = 0.02
    mppi_noise_std: float = 6.0
    mppi_lambda: float = 0.2
    mppi_q_diag: tuple = (0.2, 0.0, 1.0)
    mppi_r_u: float = 1e-5
    delay_mode: str = "transport"
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)

    def __post_init__(self):
        if self.reference not in ("sweep", "constant"):
            raise ConfigError(f"unknown reference profile '{self.reference}'")
        if self.tau < 0:
            raise ConfigError("command delay must be non-negative")
        if not (0.0 <= self.rmse_skip < self.t_end):
            raise ConfigError("rmse_skip must lie inside the run")
        unknown = set(self.controllers) - {"foc", "mppi_unconstrained", "mppi_icode"}
        if unknown:
            raise ConfigError(f"unknown controllers {sorted(unknown)}")


def speed_reference(sc: TrackingScenario) -> Callable[[float], float]:
    if sc.reference == "constant":
        return lambda t: sc.base_rpm * RAD_PER_RPM

    def ref(t: float) -> float:
        rpm = sc.base_rpm + sc.amp_rpm * math.sin(2.0 * math.pi * sc.freq_hz * t)
        if t >= sc.step_time:
            rpm += sc.step_frac * sc.base_rpm
        return rpm * RAD_PER_RPM

    return ref


def run_tracking_experiment(params: PmsmParams, sc: TrackingScenario,
                            out_dir: str) -> ExperimentReport:
    """Identify, then close each loop on the same reference and delay.

    The cascade loop is deterministic and runs once; each sampling
    controller runs once per seed (seeds only move the exploration noise).
    Emits a per-run metric table, a time series per controller, and the
    identification report.
    """
    os.makedirs(out_dir, exist_ok=True)
    ref_fn = speed_reference(sc)
    window = (sc.rmse_skip, sc.t_end)
    gains = delay_rated_gains(params, sc.foc_g_current, sc.foc_w_speed)
    models = None
    if any(c.startswith("mppi") for c in sc.controllers):
        models = identify_models(params, sc.excitation, sc.identification)

    if sc.reference == "constant":
        x0 = np.zeros(3)
    else:
        w0 = ref_fn(0.0)
        x0 = np.array([0.0, params.B_f * w0 / params.torque_constant, w0])

    steps = int(round(sc.mppi_horizon / sc.dt_control))
    ref_window = _ref_window(ref_fn, steps, sc.dt_control)

    def run_one(controller_name: str, seed: int) -> Tuple[DriveResult, dict]:
        if controller_name == "foc":
            drive = FocSpeedDrive(params, gains, ref_fn, sc.dt_sim)
            dt_ctl = sc.dt_sim
        else:
            model = (models.unconstrained if controller_name == "mppi_unconstrained"
                     else models.constrained)
            ctl = _mppi_controller(
                model, models.dictionary, params, sc.mppi_samples,
                sc.mppi_horizon, sc.dt_control, sc.mppi_noise_std,
                sc.mppi_lambda, sc.mppi_q_diag, sc.mppi_r_u)
            drive = MppiDrive(ctl, ref_window, seed_base=seed * (1 << 20))
            dt_ctl = sc.dt_control
        res = simulate_drive(
            params, drive, sc.t_end, sc.dt_sim, dt_ctl, x0,
            load_fn=None, delay=sc.tau, delay_mode=sc.delay_mode)
        refs = np.array([ref_fn(tv) for tv in res.t])
        metrics = {
            "rmse_speed": window_rmse(res.t, res.x[:, 2] - refs, window),
            "rmse_i_d": window_rmse(res.t, res.x[:, 0], window),
            "diverged": res.diverged,
        }
        tail = res.t >= sc.t_end - 0.3
        with np.errstate(invalid="ignore"):
            rel = np.abs(res.x[tail, 2] - refs[tail]) / np.maximum(np.abs(refs[tail]), 1e-9)
        metrics["final_band"] = float(np.max(rel)) if np.all(np.isfinite(rel)) else math.inf
        return res, metrics

    rows = []
    per_controller: dict = {}
    tables = {}
    for name in sc.controllers:
        seeds = [sc.seeds[0]] if name == "foc" else list(sc.seeds)
        vals = []
        for seed in seeds:
            res, metrics = run_one(name, seed)
            rows.append([name, seed, metrics["rmse_speed"], metrics["rmse_i_d"],
                         metrics["final_band"], metrics["diverged"]])
            vals.append(metrics)
            if seed == seeds[0]:
                refs = np.array([ref_fn(tv) for tv in res.t])
                ts_name = f"tracking_ts_{name}.csv"
                write_csv(os.path.join(out_dir, ts_name),
                          ["t", "omega_ref", "i_d", "i_q", "omega_m", "u_d", "u_q"],
                          np.column_stack([res.t, refs, res.x, res.u_applied]))
                tables[f"timeseries_{name}"] = ts_name
        per_controller[name] = {
            "rmse_speed": [m["rmse_speed"] for m in vals],
            "mean_rmse_speed": float(np.mean([m["rmse_speed"] for m in vals])),
            "mean_rmse_i_d": float(np.mean([m["rmse_i_d"] for m in vals])),
            "max_final_band": float(np.max([m["final_band"] for m in vals])),
            "any_diverged": any(m["diverged"] for m in vals),
        }

    write_csv(os.path.join(out_dir, "tracking_metrics.csv"),
              ["controller", "seed", "rmse_speed", "rmse_i_d", "final_band",
               "diverged"], rows)
    tables["metrics"] = "tracking_metrics.csv"

    summary = {
        "rmse_window": list(window),
        "tau": sc.tau,
        "reference": sc.reference,
        "per_controller": per_controller,
    }
    if models is not None:
        summary["identification"] = {
            "rmse_unconstrained": models.report.rmse_unconstrained,
            "rmse_constrained": models.report.rmse_constrained,
            "lmi_margin": models.report.lmi_margin,
            "iterations": models.report.iterations,
            "converged": models.report.converged,
            "feasible": models.report.feasible,
        }
    if "foc" in per_controller and "mppi_icode" in per_controller:
        foc_rmse = per_controller["foc"]["mean_rmse_speed"]
        icode = per_controller["mppi_icode"]["rmse_speed"]
        summary["icode_beats_foc_per_seed"] = [v < foc_rmse for v in icode]
    header = params_header(params, foc_gains=asdict(gains), scenario=_scenario_dict(sc))
    report = ExperimentReport("tracking", header, summary, tables, out_dir)
    write_report(report)
    return report


def _scenario_dict(sc) -> dict:
    d = asdict(sc)
    return d


# ---------------------------------------------------------------------------
# Delay sweep scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DelaySweepScenario:
    """Command-delay sweep on a braked commissioning rig.

    The certified loop is the proportional current-mode cascade member; its
    task is a band-limited q-current dither whose band covers the loop's
    near-boundary ring frequency, so the speed ripple amplifies as the delay
    approaches the true onset. The sampling controllers regulate speed
    against a band-limited load disturbance (their natural task on the same
    rig). Every controller's RMSE curve is swept over its own delay grid
    with common random numbers; instability is flagged when the RMSE exceeds
    divergence_factor times the value at the first grid point, or on state
    blow-up. The LMI delay bound for the certified loop is computed from its
    sector cast and compared with the detected onset.
    """

    t_end: float = 2.5
    dt_sim: float = 1e-4
    dt_control: float = 1e-3
    window_start: float = 0.5
    foc_tau_grid_ms: tuple = (
        5.0, 5.5, 6.0, 6.5, 6.8, 7.0, 7.2, 7.4, 7.6, 7.8, 8.0, 8.2, 8.4,
        8.6, 8.8, 9.0, 9.5, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0,
        18.0, 19.0, 20.0)
    mppi_tau_grid_ms: tuple = (5.0, 10.0, 15.0, 20.0)
    controllers: tuple = ("foc", "mppi_unconstrained", "mppi_icode")
    foc_g_current: float = 300.0
    foc_w_speed: float = 30.0
    divergence_factor: float = 10.0
    gamma_cert: float = 20.0
    bisect_tau_hi: float = 0.04
    bisect_tol: float = 2e-5
    delay_mode: str = "transport"
    dither_seed: int = 2026
    dither_rms: float = 2.0
    dither_band: tuple = (100.0, 500.0)
    dither_tones: int = 24
    load_seed: int = 77
    load_rms: float = 1.0
    load_band: tuple = (5.0, 60.0)
    load_tones: int = 16
    mppi_samples: int = 192
    mppi_horizon: float = 0.02
    mppi_noise_std: float = 4.0
    mppi_lambda: float = 0.2
    mppi_q_diag: tuple = (0.2, 0.0, 1.0)
    mppi_r_u: float = 1e-5
    mppi_seed: int = 0
    excitation: ExcitationConfig = field(default_factory=rig_excitation)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)

    def __post_init__(self):
        if not (0.0 < self.window_start < self.t_end):
            raise ConfigError("RMSE window must start inside the run")
        for name, grid in (("foc_tau_grid_ms", self.foc_tau_grid_ms),
                           ("mppi_tau_grid_ms", self.mppi_tau_grid_ms)):
            if not grid:
                raise ConfigError(f"{name} must not be empty")
            taus = np.asarray(grid, dtype=float)
            if (np.diff(taus) <= 0).any():
                raise ConfigError(f"{name} must be strictly increasing")
            steps = taus * 1e-3 / self.dt_sim
            if np.max(np.abs(steps - np.round(steps))) > 1e-6:
                raise ConfigError(
                    f"{name} entries must be integer multiples of dt_sim")
        if self.divergence_factor <= 1.0:
            raise ConfigError("divergence_factor must exceed 1")


def _grid_onset(taus_ms: Sequence[float], rmses: Sequence[float],
                factor: float) -> Optional[float]:
    """First grid delay whose RMSE exceeds factor times the first point."""
    nominal = rmses[0]
    if not math.isfinite(nominal):
        return float(taus_ms[0])
    for tau_ms, v in zip(taus_ms, rmses):
        if not math.isfinite(v) or v > factor * nominal:
            return float(tau_ms)
    return None


def run_delay_sweep(params: PmsmParams, sc: DelaySweepScenario,
                    out_dir: str) -> ExperimentReport:
    """Sweep command delay per controller; locate onsets; compare with the bound."""
    os.makedirs(out_dir, exist_ok=True)
    window = (sc.window_start, sc.t_end)
    gains = delay_rated_gains(params, sc.foc_g_current, sc.foc_w_speed)
    dither = band_limited_signal(sc.dither_seed, sc.dither_band, sc.dither_tones,
                                 sc.dither_rms)
    load = band_limited_signal(sc.load_seed, sc.load_band, sc.load_tones, sc.load_rms)

    cast = foc_delay_cast(params, gains, tau=1e-3)
    pred: TauMaxResult = tau_max_bisection(
        cast, sc.gamma_cert, tau_lo=1e-4, tau_hi=sc.bisect_tau_hi, tol=sc.bisect_tol)
    tau_lmi = pred.tau_max

    models = None
    steps = int(round(sc.mppi_horizon / sc.dt_control))
    zero_window = lambda t: np.zeros((steps, 3))
    if any(c.startswith("mppi") for c in sc.controllers):
        models = identify_models(params, sc.excitation, sc.identification)

    def sweep_one(name: str, tau_ms: float) -> Tuple[float, bool]:
        tau = tau_ms * 1e-3
        if name == "foc":
            drive = FocCurrentDrive(params, gains, dither, sc.dt_sim)
            res = simulate_drive(params, drive, sc.t_end, sc.dt_sim, sc.dt_sim,
                                 np.zeros(3), load_fn=None, delay=tau,
                                 delay_mode=sc.delay_mode)
        else:
            model = (models.unconstrained if name == "mppi_unconstrained"
                     else models.constrained)
            ctl = _mppi_controller(
                model, models.dictionary, params, sc.mppi_samples,
                sc.mppi_horizon, sc.dt_control, sc.mppi_noise_std,
                sc.mppi_lambda, sc.mppi_q_diag, sc.mppi_r_u)
            drive = MppiDrive(ctl, zero_window, seed_base=sc.mppi_seed * (1 << 20))
            res = simulate_drive(params, drive, sc.t_end, sc.dt_sim, sc.dt_control,
                                 np.zeros(3), load_fn=load, delay=tau,
                                 delay_mode=sc.delay_mode)
        rmse = window_rmse(res.t, res.x[:, 2], window)
        return rmse, res.diverged

    rows = []
    curves: dict = {}
    for name in sc.controllers:
        grid = sc.foc_tau_grid_ms if name == "foc" else sc.mppi_tau_grid_ms
        rmses = []
        for tau_ms in grid:
            rmse, div = sweep_one(name, tau_ms)
            rmses.append(rmse)
            rows.append([name, tau_ms, rmse, div])
        finite = [v for v in rmses if math.isfinite(v)]
        monotone = all(
            b >= a - 1e-12 for a, b in zip(finite, finite[1:]))
        onset = _grid_onset(grid, rmses, sc.divergence_factor)
        curves[name] = {
            "tau_grid_ms": list(grid),
            "rmse": rmses,
            "monotone_nondecreasing": monotone,
            "onset_ms": onset if onset is not None else math.inf,
            "nominal_rmse": rmses[0],
        }

    write_csv(os.path.join(out_dir, "delay_sweep.csv"),
              ["controller", "tau_ms", "speed_rmse", "diverged"], rows)
    tables = {"sweep": "delay_sweep.csv"}

    summary = {
        "window": list(window),
        "divergence_factor": sc.divergence_factor,
        "tau_max_lmi_ms": tau_lmi * 1e3,
        "gamma_cert": sc.gamma_cert,
        "curves": curves,
    }
    if "foc" in curves:
        onset = curves["foc"]["onset_ms"]
        summary["onset_foc_ms"] = onset
        if math.isfinite(onset):
            summary["onset_vs_lmi_relerr"] = abs(onset - tau_lmi * 1e3) / (tau_lmi * 1e3)
    if models is not None:
        summary["identification"] = {
            "feasible": models.report.feasible,
            "rmse_unconstrained": models.report.rmse_unconstrained,
            "rmse_constrained": models.report.rmse_constrained,
        }
    header = params_header(params, foc_gains=asdict(gains), scenario=_scenario_dict(sc))
    report = ExperimentReport("delay_sweep", header, summary, tables, out_dir)
    write_report(report)
    return report
