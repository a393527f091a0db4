"""Sampling-based receding-horizon control over an identified lifted model.

Each control step draws M perturbed control sequences, propagates them through
the lifted model, scores them with a quadratic running cost on the projected
raw state, and blends them with exponentiated-cost weights (softmin). Noise is
generated per rollout from a counter-based generator keyed on (seed, rollout
index), so the batch is reproducible independent of any parallel execution
order. Rollouts that blow up are assigned an infinite-cost sentinel and drop
out of the weighted average instead of poisoning it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, DivergenceError, NumericError, StructureError
from .koopman import Dictionary, LiftedModel
from .lmi import min_eigenvalue, symmetrize
from .model import BLOWUP_GUARD

COST_SENTINEL = math.inf


@dataclass(frozen=True)
class MppiConfig:
    """Sampling controller settings; horizon must be a whole number of steps."""

    M: int = 2000
    horizon: float = 0.1
    dt: float = 1e-3
    lambda_temp: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    u_min: Optional[np.ndarray] = None
    u_max: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.M < 1:
            raise StructureError("M must be >= 1")
        if self.lambda_temp <= 0:
            raise StructureError("lambda_temp must be positive")
        if not np.all(np.asarray(self.noise_std, dtype=float) > 0):
            raise StructureError("noise_std must be positive")
        if self.dt <= 0:
            raise StructureError("dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise StructureError("horizon must be an integer number of control steps")
        for name in ("u_min", "u_max"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).ravel())

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class CostWeights:
    """Quadratic running cost: (x - x_ref)' Q (x - x_ref) + u' R u.

    x_ref is either a single point or a per-step reference over the horizon
    (rows = steps).
    """

    Q_cost: np.ndarray
    R_cost: np.ndarray
    x_ref: np.ndarray

    def __post_init__(self):
        Q = symmetrize(self.Q_cost)
        R = symmetrize(self.R_cost)
        if min_eigenvalue(Q) < -1e-12:
            raise StructureError("Q_cost must be positive semidefinite")
        if min_eigenvalue(R) <= 0:
            raise StructureError("R_cost must be positive definite")
        ref = np.asarray(self.x_ref, dtype=float)
        if ref.ndim == 1 and ref.size != Q.shape[0]:
            raise DimensionError("x_ref dimension does not match Q_cost")
        if ref.ndim == 2 and ref.shape[1] != Q.shape[0]:
            raise DimensionError("x_ref rows must have the state dimension")
        object.__setattr__(self, "Q_cost", Q)
        object.__setattr__(self, "R_cost", R)
        object.__setattr__(self, "x_ref", ref)

    def ref_at(self, step: int) -> np.ndarray:
        if self.x_ref.ndim == 1:
            return self.x_ref
        return self.x_ref[min(step, self.x_ref.shape[0] - 1)]


def running_cost(x: np.ndarray, u: np.ndarray, weights: CostWeights,
                 x_ref: Optional[np.ndarray] = None) -> float:
    """Quadratic stage cost at one point."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    ref = weights.ref_at(0) if x_ref is None else np.asarray(x_ref, dtype=float).ravel()
    e = x - ref
    return float(e @ weights.Q_cost @ e + u @ weights.R_cost @ u)


@dataclass(frozen=True)
class RolloutBatch:
    controls: np.ndarray        # (M, steps, m_u)
    costs: np.ndarray           # (M,), +inf sentinel for diverged rollouts
    n_divergent: int
    states: Optional[np.ndarray] = None  # (M, steps + 1, n) when retained


def _rollout_noise(cfg: MppiConfig, steps: int, m_u: int, step_seed: int) -> np.ndarray:
    """(M, steps, m_u) Gaussian draws; each rollout owns a counter-based stream."""
    out = np.empty((cfg.M, steps, m_u))
    for m in range(cfg.M):
        gen = np.random.Generator(np.random.Philox(key=(int(step_seed) & (2**64 - 1), m)))
        out[m] = gen.standard_normal((steps, m_u))
    return out * np.asarray(cfg.noise_std, dtype=float)


def rollout_batch(
    model: LiftedModel,
    dictionary: Dictionary,
    x0: np.ndarray,
    nominal_u: np.ndarray,
    cfg: MppiConfig,
    weights: CostWeights,
    step_seed: Optional[int] = None,
    retain_states: bool = False,
) -> RolloutBatch:
    """Propagate M perturbed control sequences through the lifted model.

    Costs integrate the running cost at the pre-step state times dt. A rollout
    whose lifted state leaves the finite/blow-up envelope gets the infinite
    sentinel and stops accumulating.
    """
    if not dictionary.includes_state:
        raise StructureError("cost projection needs a dictionary with leading state coordinates")
    x0 = np.asarray(x0, dtype=float).ravel()
    steps = cfg.steps
    m_u = model.m_u
    nominal = np.asarray(nominal_u, dtype=float).reshape(steps, m_u)
    if step_seed is None:
        step_seed = cfg.seed

    U = nominal[None, :, :] + _rollout_noise(cfg, steps, m_u, step_seed)
    if cfg.u_min is not None or cfg.u_max is not None:
        lo = -np.inf if cfg.u_min is None else cfg.u_min
        hi = np.inf if cfg.u_max is None else cfg.u_max
        U = np.clip(U, lo, hi)

    n = dictionary.n
    g0 = dictionary.lift(x0)
    G = np.tile(g0, (cfg.M, 1))
    costs = np.zeros(cfg.M)
    alive = np.ones(cfg.M, dtype=bool)
    states = np.empty((cfg.M, steps + 1, n)) if retain_states else None
    if retain_states:
        states[:, 0, :] = x0

    A_T = model.A_K.T
    B_T = model.B_K.T
    D_T = model.D_K.T
    C_K = model.C_K
    for t in range(steps):
        x_proj = G[:, :n]
        ref = weights.ref_at(t)
        e = x_proj - ref
        u_t = U[:, t, :]
        stage = np.einsum("ij,jk,ik->i", e, weights.Q_cost, e)
        stage = stage + np.einsum("ij,jk,ik->i", u_t, weights.R_cost, u_t)
        costs[alive] += stage[alive] * cfg.dt

        G_new = G @ A_T
        if model.k_phi:
            S = G @ C_K.T
            Phi = np.column_stack(
                [model.phis[i].value(S[:, i]) for i in range(model.k_phi)]
            )
            G_new = G_new + Phi @ B_T
        if m_u:
            G_new = G_new + u_t @ D_T
        bad = ~np.isfinite(G_new).all(axis=1) | (np.linalg.norm(G_new, axis=1) > BLOWUP_GUARD)
        newly_dead = alive & bad
        if newly_dead.any():
            costs[newly_dead] = COST_SENTINEL
            alive = alive & ~bad
            G_new[bad] = 0.0
        G = G_new
        if retain_states:
            states[:, t + 1, :] = G[:, :n]

    return RolloutBatch(
        controls=U, costs=costs, n_divergent=int((~alive).sum()), states=states
    )


def softmin_weights(costs: np.ndarray, lambda_temp: float) -> np.ndarray:
    """Exponentiated-cost weights, normalized; infinite costs get weight zero.

    The minimum finite cost is subtracted before exponentiating, which is
    exactly the normalization-invariant form of the weighted average.
    """
    costs = np.asarray(costs, dtype=float).ravel()
    finite = np.isfinite(costs)
    if not finite.any():
        raise DivergenceError("every rollout diverged; no finite-cost sample to average")
    w = np.zeros_like(costs)
    shifted = costs[finite] - costs[finite].min()
    w[finite] = np.exp(-shifted / lambda_temp)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        raise NumericError("softmin normalization failed")
    return w / total


def mppi_update(batch: RolloutBatch, lambda_temp: float) -> np.ndarray:
    """Weighted average of the batch control sequences under softmin weights."""
    w = softmin_weights(batch.costs, lambda_temp)
    return np.einsum("m,mtj->tj", w, batch.controls)


class MppiController:
    """Receding-horizon sampler with shift-and-hold warm starting.

    control_step is deterministic given (state, reference window, nominal
    sequence, step_seed); the experiment loop passes a fresh step_seed per
    tick to decorrelate exploration across steps.
    """

    def __init__(self, model: LiftedModel, dictionary: Dictionary, cfg: MppiConfig,
                 Q_cost: np.ndarray, R_cost: np.ndarray):
        self.model = model
        self.dictionary = dictionary
        self.cfg = cfg
        self.Q_cost = np.asarray(Q_cost, dtype=float)
        self.R_cost = np.asarray(R_cost, dtype=float)
        self.nominal = np.zeros((cfg.steps, model.m_u))

    def reset(self) -> None:
        self.nominal = np.zeros((self.cfg.steps, self.model.m_u))

    def control_step(self, x: np.ndarray, reference_window: np.ndarray,
                     step_seed: Optional[int] = None) -> Tuple[np.ndarray, dict]:
        weights = CostWeights(self.Q_cost, self.R_cost, reference_window)
        batch = rollout_batch(
            self.model, self.dictionary, x, self.nominal, self.cfg, weights,
            step_seed=step_seed,
        )
        w = softmin_weights(batch.costs, self.cfg.lambda_temp)
        u_star = np.einsum("m,mtj->tj", w, batch.controls)
        applied = u_star[0].copy()
        # warm start: shift one step, repeat the final entry
        self.nominal = np.vstack([u_star[1:], u_star[-1:]])
        finite = np.isfinite(batch.costs)
        diag = {
            "ess": float(w.sum() / w.max()),
            "min_cost": float(batch.costs[finite].min()),
            "divergent_rollouts": batch.n_divergent,
        }
        return applied, diag


def replay_predict(model: LiftedModel, dictionary: Dictionary, x: np.ndarray,
                   controls: Sequence[np.ndarray]) -> np.ndarray:
    """Predict the raw state after applying queued in-flight controls.

    Used for actuation-delay compensation: plan from the model-predicted state
    at the instant the new control will actually take effect.
    """
    if not dictionary.includes_state:
        raise StructureError("state projection needs leading state coordinates")
    g = dictionary.lift(x)
    for u in controls:
        g = model.step(g, u)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("replay prediction diverged")
    return g[: dictionary.n]
