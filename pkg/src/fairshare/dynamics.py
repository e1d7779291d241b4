"""Measurement-driven update recursions and the stepping engine.

Each step measures every task's utility once (with bounded noise), moves the
shares along the observed fairness index, and nudges each operation level in
the direction indicated by a filtered difference quotient of the same
measurement. Shares move with step ``epsilon``; levels move with the larger
step ``epsilon * mu(epsilon)``, so levels settle quickly relative to shares.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .core import (
    ConfigError,
    EngineConfig,
    FeasibilityBreach,
    MeasurementError,
    NoiseSource,
    TaskSpec,
    TaskState,
    uniform_allocation,
    validate_config,
)
from .utility import ModelBank

__all__ = [
    "Engine",
    "EngineSnapshot",
    "RunLedger",
    "RunTrace",
    "StepRecord",
    "engine_step",
    "fairness_from_utilities",
    "fairness_measure",
    "observed_fairness",
    "run",
    "step_operation_level",
    "step_resources",
]

# Initial gap between a level and its filter; avoids a degenerate zero
# denominator on the very first direction estimate.
FILTER_INIT_OFFSET = 1e-3
# Below this magnitude the level has not moved, so no direction estimate
# exists and the drift term is zeroed (dither keeps exploring).
RATIO_GUARD = 1e-12


def _weights_of(specs_or_weights) -> np.ndarray:
    first = specs_or_weights[0] if len(specs_or_weights) else None
    if hasattr(first, "weight"):
        return np.array([t.weight for t in specs_or_weights], dtype=float)
    return np.asarray(specs_or_weights, dtype=float)


def fairness_from_utilities(weights, utilities, v) -> np.ndarray:
    """Fairness index from known utility values.

    Component i is (1 - v_i) * w_i - v_i * sum_{j != i} w_j with
    w = weights / utilities, which simplifies to w_i - v_i * sum(w). Positive
    values flag resource deficiency, negative values a surplus; the vector
    sums to zero whenever v sums to one.
    """
    w = np.asarray(weights, dtype=float) / np.asarray(utilities, dtype=float)
    return w - np.asarray(v, dtype=float) * w.sum()


def fairness_measure(specs: Sequence[TaskSpec], s, v, d) -> np.ndarray:
    """Exact (noise-free) fairness vector for levels s, shares v, demands d."""
    u = ModelBank([t.utility for t in specs]).eval(
        np.asarray(s, dtype=float), np.asarray(v, dtype=float), np.asarray(d, dtype=float)
    )
    return fairness_from_utilities(_weights_of(specs), u, v)


def observed_fairness(specs_or_weights, u_meas, v) -> np.ndarray:
    """Fairness vector from noisy measurements; the drift of the share update."""
    u = np.asarray(u_meas, dtype=float)
    if np.any(u <= 0.0):
        raise MeasurementError(
            f"non-positive utility measurement: min={u.min()!r}"
        )
    return fairness_from_utilities(_weights_of(specs_or_weights), u, v)


def step_resources(v, f_obs, epsilon: float) -> np.ndarray:
    """One share update v + epsilon * f_obs; preserves the coordinate sum.

    Raises FeasibilityBreach if any share leaves [0, 1], which signals a step
    size above the feasibility threshold for this task set.
    """
    v_new = np.asarray(v, dtype=float) + epsilon * np.asarray(f_obs, dtype=float)
    if bool((v_new < 0.0).any() or (v_new > 1.0).any()):
        bad = int(np.argmax((v_new < 0.0) | (v_new > 1.0)))
        raise FeasibilityBreach(
            f"share of task {bad} left [0, 1]: {v_new[bad]!r} "
            "(epsilon too large for this task set)",
            values=v_new,
        )
    return v_new


def step_operation_level(
    state: TaskState, u_meas: float, zeta: float, cfg: EngineConfig
) -> TaskState:
    """One level update for a single task, including both filters.

    The drift is tanh of the ratio of filtered increments (utility change
    over level change), a bounded gradient-direction estimate built purely
    from measurements.
    """
    du = cfg.gamma * (u_meas - state.u_lp)
    ds = cfg.gamma * (state.s - state.s_lp)
    drift = np.tanh(du / ds) if abs(ds) >= RATIO_GUARD else 0.0
    em = cfg.eps_mu
    s_new = min(max(state.s + em * drift + em * zeta, 0.0), 1.0)
    return TaskState(
        v=state.v,
        s=float(s_new),
        u_lp=state.u_lp + em * du,
        s_lp=state.s_lp + em * ds,
    )


@dataclass(frozen=True)
class EngineSnapshot:
    """Full engine state after ``step`` updates, plus that step's measurements.

    ``u_meas`` and ``f_obs`` are the measurement and fairness index that
    produced this state; ``phi`` and ``phi_sq_sum`` are noise-free
    diagnostics evaluated at the new state.
    """

    step: int
    v: np.ndarray
    s: np.ndarray
    u_lp: np.ndarray
    s_lp: np.ndarray
    u_meas: np.ndarray
    f_obs: np.ndarray
    phi: np.ndarray
    phi_sq_sum: float

    def task_state(self, i: int) -> TaskState:
        return TaskState(
            v=float(self.v[i]), s=float(self.s[i]),
            u_lp=float(self.u_lp[i]), s_lp=float(self.s_lp[i]),
        )


class StepRecord(NamedTuple):
    step: int
    v: np.ndarray
    s: np.ndarray
    u_meas: np.ndarray
    f_obs: np.ndarray
    phi: np.ndarray
    phi_sq_sum: float


@dataclass
class RunLedger:
    """Extrema of the per-step invariants, tracked online over a whole run.

    The fairness-increment gaps compare each step's index against the
    analytic envelope lam_min/c_bar - v*n <= F <= 1 - v*n*lam_min/c_bar
    using the share the index was evaluated at.
    """

    max_simplex_dev: float = 0.0
    v_min: float = np.inf
    v_max: float = -np.inf
    max_abs_f_sum: float = 0.0
    f_low_gap: float = -np.inf
    f_high_gap: float = -np.inf
    phi_sq_min: float = np.inf
    phi_sq_min_step: int = -1


@dataclass
class RunTrace:
    """Recorded trajectory of one run (thinned by ``stride``), plus ledger."""

    steps: np.ndarray
    v: np.ndarray
    s: np.ndarray
    u_meas: np.ndarray
    f_obs: np.ndarray
    phi: np.ndarray
    phi_sq: np.ndarray
    ledger: RunLedger
    stride: int
    complete: bool
    breach_step: int | None = None

    def __len__(self) -> int:
        return int(self.steps.shape[0])

    def records(self) -> Iterator[StepRecord]:
        for r in range(len(self)):
            yield StepRecord(
                int(self.steps[r]), self.v[r], self.s[r], self.u_meas[r],
                self.f_obs[r], self.phi[r], float(self.phi_sq[r]),
            )


class Engine:
    """Simulation engine for one task set and configuration.

    Construction validates the configuration (unstable-filter and noise
    conditions are rejected before any simulation). A single engine instance
    is single-writer: share it across threads only for read-only use.
    """

    def __init__(self, specs: Sequence[TaskSpec], cfg: EngineConfig,
                 noise: NoiseSource | None = None):
        if not specs:
            raise ConfigError("need at least one task")
        self.specs = tuple(specs)
        self.cfg = cfg
        self.n = len(specs)
        report = validate_config(cfg, self.n, specs)
        if not report.ok:
            raise ConfigError("; ".join(report.errors))
        self.weights = np.array([t.weight for t in specs], dtype=float)
        self.bank = ModelBank([t.utility for t in specs])
        self.noise = noise if noise is not None else NoiseSource(
            cfg.seed, cfg.eta_bar, cfg.zeta_bar
        )
        self.lam_min = float(self.weights.min())
        self.c_bar = float(max(t.utility.bound_c for t in specs))
        # Merged per-task demand table: row per distinct zone boundary.
        starts = sorted({s0 for t in specs for s0 in t.demand.starts()})
        self._demand_breaks = np.array(starts, dtype=np.int64)
        self._demand_values = np.array(
            [[t.demand.at(k0) for t in specs] for k0 in starts], dtype=float
        )

    def demand_at(self, k: int) -> np.ndarray:
        """Demand vector in effect at step k."""
        row = int(np.searchsorted(self._demand_breaks, k, side="right")) - 1
        return self._demand_values[row]

    def initial_snapshot(self) -> EngineSnapshot:
        cfg = self.cfg
        if cfg.v_init is not None:
            if len(cfg.v_init) != self.n:
                raise ConfigError(
                    f"v_init has {len(cfg.v_init)} entries for {self.n} tasks"
                )
            v0 = np.asarray(cfg.v_init, dtype=float)
        else:
            v0 = uniform_allocation(self.n)
        s0 = np.full(self.n, float(cfg.s_init))
        d0 = self.demand_at(0)
        u0 = self.bank.eval(s0, v0, d0)
        f0 = fairness_from_utilities(self.weights, u0, v0)
        return EngineSnapshot(
            step=0, v=v0, s=s0,
            u_lp=u0, s_lp=s0 - FILTER_INIT_OFFSET,
            u_meas=u0, f_obs=f0, phi=f0.copy(),
            phi_sq_sum=float((f0 * f0).sum()),
        )

    def step(
        self,
        snap: EngineSnapshot,
        freeze_levels: bool = False,
        _eta: np.ndarray | None = None,
        _zeta: np.ndarray | None = None,
    ) -> EngineSnapshot:
        """Advance one step: measure, update shares, update levels, diagnose."""
        cfg = self.cfg
        k = snap.step
        d_k = self.demand_at(k)
        u_true = self.bank.eval(snap.s, snap.v, d_k)
        eta = _eta if _eta is not None else self.noise.measurement_row(k, self.n)
        u_meas = u_true + eta
        f = observed_fairness(self.weights, u_meas, snap.v)
        try:
            v_new = step_resources(snap.v, f, cfg.epsilon)
        except FeasibilityBreach as breach:
            breach.step = k
            raise

        if freeze_levels:
            s_new, u_lp_new, s_lp_new = snap.s, snap.u_lp, snap.s_lp
        else:
            du = cfg.gamma * (u_meas - snap.u_lp)
            ds = cfg.gamma * (snap.s - snap.s_lp)
            mask = np.abs(ds) >= RATIO_GUARD
            ratio = np.divide(du, ds, out=np.zeros_like(du), where=mask)
            drift = np.tanh(ratio)
            zeta = _zeta if _zeta is not None else self.noise.dither_row(k, self.n)
            em = cfg.eps_mu
            s_new = np.clip(snap.s + em * drift + em * zeta, 0.0, 1.0)
            u_lp_new = snap.u_lp + em * du
            s_lp_new = snap.s_lp + em * ds

        d_next = self.demand_at(k + 1)
        u_next = self.bank.eval(s_new, v_new, d_next)
        phi = fairness_from_utilities(self.weights, u_next, v_new)
        return EngineSnapshot(
            step=k + 1, v=v_new, s=s_new, u_lp=u_lp_new, s_lp=s_lp_new,
            u_meas=u_meas, f_obs=f, phi=phi,
            phi_sq_sum=float((phi * phi).sum()),
        )

    def _demand_rows(self, steps: np.ndarray) -> np.ndarray:
        rows = np.searchsorted(self._demand_breaks, steps, side="right") - 1
        return self._demand_values[rows]

    def run(self, stride: int = 1, freeze_levels: bool = False) -> RunTrace:
        """Iterate the horizon, recording every ``stride``-th snapshot.

        Produces exactly the states that iterating :meth:`step` would; only
        the diagnostics (exact fairness, invariant ledger) are evaluated in
        bulk afterwards. On a feasibility breach the partial trace is
        attached to the raised exception. The ledger always covers every
        step, recorded or not.
        """
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        cfg = self.cfg
        horizon = cfg.horizon
        n = self.n
        v_all = np.zeros((horizon, n))
        s_all = np.zeros((horizon, n))
        u_all = np.zeros((horizon, n))
        f_all = np.zeros((horizon, n))

        eta_blk = self.noise.measurement_block(0, horizon, n)
        zeta_blk = None if freeze_levels else self.noise.dither_block(0, horizon, n)

        snap0 = self.initial_snapshot()
        v, s = snap0.v, snap0.s
        u_lp, s_lp = snap0.u_lp, snap0.s_lp
        weights = self.weights
        eps = cfg.epsilon
        em = cfg.eps_mu
        gamma = cfg.gamma
        bank_eval = self.bank.eval
        breaks = self._demand_breaks
        d_values = self._demand_values
        zone = 0
        next_break = int(breaks[1]) if len(breaks) > 1 else None
        d_k = d_values[0]

        done = 0
        breach: FeasibilityBreach | None = None
        for k in range(horizon):
            if next_break is not None and k >= next_break:
                zone += 1
                d_k = d_values[zone]
                next_break = int(breaks[zone + 1]) if zone + 1 < len(breaks) else None
            u_true = bank_eval(s, v, d_k)
            u_meas = u_true + eta_blk[k]
            w = weights / u_meas
            f = w - v * w.sum()
            v_new = v + eps * f
            if bool((v_new < 0.0).any() or (v_new > 1.0).any()):
                bad = int(np.argmax((v_new < 0.0) | (v_new > 1.0)))
                breach = FeasibilityBreach(
                    f"share of task {bad} left [0, 1]: {v_new[bad]!r} "
                    "(epsilon too large for this task set)",
                    step=k, values=v_new,
                )
                break
            if not freeze_levels:
                du = gamma * (u_meas - u_lp)
                ds = gamma * (s - s_lp)
                mask = np.abs(ds) >= RATIO_GUARD
                ratio = np.divide(du, ds, out=np.zeros_like(du), where=mask)
                s = np.clip(s + em * np.tanh(ratio) + em * zeta_blk[k], 0.0, 1.0)
                u_lp = u_lp + em * du
                s_lp = s_lp + em * ds
            v = v_new
            v_all[k] = v
            s_all[k] = s
            u_all[k] = u_meas
            f_all[k] = f
            done = k + 1

        # Bulk diagnostics over the completed prefix.
        v_all, s_all, u_all, f_all = (
            a[:done] for a in (v_all, s_all, u_all, f_all)
        )
        steps_all = np.arange(1, done + 1, dtype=np.int64)
        ledger = RunLedger()
        if done:
            d_rows = self._demand_rows(steps_all)
            u_exact = bank_eval(s_all, v_all, d_rows)
            w_rows = weights / u_exact
            phi_all = w_rows - v_all * w_rows.sum(axis=1, keepdims=True)
            phi_sq_all = (phi_all * phi_all).sum(axis=1)
            v_pre = np.vstack([snap0.v, v_all[:-1]])
            lam_ratio = self.lam_min / self.c_bar
            ledger.max_simplex_dev = float(np.abs(v_all.sum(axis=1) - 1.0).max())
            ledger.v_min = float(v_all.min())
            ledger.v_max = float(v_all.max())
            ledger.max_abs_f_sum = float(np.abs(f_all.sum(axis=1)).max())
            ledger.f_low_gap = float(((lam_ratio - v_pre * n) - f_all).max())
            ledger.f_high_gap = float((f_all - (1.0 - v_pre * n * lam_ratio)).max())
            arg = int(np.argmin(phi_sq_all))
            ledger.phi_sq_min = float(phi_sq_all[arg])
            ledger.phi_sq_min_step = int(steps_all[arg])
        else:
            phi_all = np.zeros((0, n))
            phi_sq_all = np.zeros(0)

        keep = slice(stride - 1, done - (done % stride), stride)
        trace = RunTrace(
            steps=steps_all[keep], v=v_all[keep], s=s_all[keep],
            u_meas=u_all[keep], f_obs=f_all[keep], phi=phi_all[keep],
            phi_sq=phi_sq_all[keep], ledger=ledger, stride=stride,
            complete=breach is None,
            breach_step=breach.step if breach is not None else None,
        )
        if breach is not None:
            breach.trace = trace
            raise breach
        return trace


def engine_step(
    snapshot: EngineSnapshot,
    specs: Sequence[TaskSpec],
    cfg: EngineConfig,
    noise: NoiseSource | None = None,
) -> EngineSnapshot:
    """One synchronous update of all tasks (convenience wrapper)."""
    return Engine(specs, cfg, noise=noise).step(snapshot)


def run(
    specs: Sequence[TaskSpec],
    cfg: EngineConfig,
    stride: int = 1,
    freeze_levels: bool = False,
) -> RunTrace:
    """Simulate ``cfg.horizon`` steps from the initial state."""
    return Engine(specs, cfg).run(stride=stride, freeze_levels=freeze_levels)
