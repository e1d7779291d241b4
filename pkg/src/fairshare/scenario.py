"""Scenario construction and summary statistics.

Both builders follow the same demand protocol: three time-zones where half
the tasks double their demand in the middle zone and revert afterwards,
which exercises the engine's adaptation to changing requests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ConfigError, DemandSchedule, EngineConfig, TaskSpec
from .dynamics import RunTrace
from .utility import (
    AffineNormalizer,
    CpuBandwidthModel,
    HomeEnergyModel,
    ModelBank,
    validate_assumptions,
)

__all__ = [
    "DEFAULT_ZONE_STEPS",
    "ScenarioResult",
    "ZoneSummary",
    "build_identical_four",
    "build_random",
    "demand_matrix",
    "recurrence_window",
    "summarize",
    "zone_starts",
]

DEFAULT_ZONE_STEPS = 40_000

_ENGINE_FIELDS = (
    "epsilon", "mu_exponent", "gamma", "eta_bar", "zeta_bar",
    "horizon", "seed", "s_init", "v_init",
)


def _make_config(defaults: dict, overrides: dict | None) -> EngineConfig:
    merged = dict(defaults)
    if overrides:
        unknown = set(overrides) - set(_ENGINE_FIELDS)
        if unknown:
            raise ConfigError(f"unknown engine override(s): {sorted(unknown)}")
        merged.update(overrides)
    return EngineConfig(**merged)


def build_identical_four(
    cfg_overrides: dict | None = None,
) -> tuple[list[TaskSpec], EngineConfig]:
    """Four identical comfort/energy tasks under the three-zone protocol.

    Tasks 0 and 1 double their demand in the middle zone. All weights are 1,
    so the symmetric allocation 1/4 is the unique fair point in the first
    and last zones.
    """
    overrides = dict(cfg_overrides) if cfg_overrides else {}
    zone_steps = int(overrides.pop("zone_steps", DEFAULT_ZONE_STEPS))
    if zone_steps < 1:
        raise ConfigError("zone_steps must be >= 1")
    d_base = 0.4
    inner = HomeEnergyModel(a=2.0, b=1.0, c=2.0, kappa=1.0, h=1.0)
    model = AffineNormalizer.fit(
        inner, demand_range=(d_base, 2.0 * d_base), c_target=4.0
    )
    switching = DemandSchedule((
        (0, d_base), (zone_steps, 2.0 * d_base), (2 * zone_steps, d_base),
    ))
    constant = DemandSchedule.constant(d_base)
    specs = [
        TaskSpec(id=i, weight=1.0, utility=model,
                 demand=switching if i < 2 else constant)
        for i in range(4)
    ]
    cfg = _make_config(
        {
            "epsilon": 5e-4,
            "mu_exponent": 1.0 / 20.0,
            "gamma": 100.0,
            "eta_bar": 1e-3,
            "zeta_bar": 1e-3,
            "horizon": 3 * zone_steps,
            "seed": 7,
            "s_init": 0.5,
        },
        overrides,
    )
    return specs, cfg


def build_random(
    n: int,
    seed: int,
    model_mix: Sequence[str] = ("home_energy",),
    cfg_overrides: dict | None = None,
) -> tuple[list[TaskSpec], EngineConfig]:
    """``n`` randomly parametrized tasks under the three-zone protocol.

    Weights are drawn from [0.2, 1], demands from [0.2, 0.8]; every model is
    normalized into [1, 2) over its own demand span and must pass the
    assumption checks (redrawn up to 100 times, then the build fails).
    """
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    unknown = set(model_mix) - {"home_energy", "cpu_bandwidth"}
    if unknown or not model_mix:
        raise ConfigError(f"unsupported model kind(s): {sorted(unknown)}")
    overrides = dict(cfg_overrides) if cfg_overrides else {}
    zone_steps = int(overrides.pop("zone_steps", DEFAULT_ZONE_STEPS))
    rng = np.random.default_rng(seed)

    def draw_model(kind: str):
        if kind == "home_energy":
            return HomeEnergyModel(
                a=float(rng.uniform(0.5, 3.0)),
                b=float(rng.uniform(0.2, 1.5)),
                c=float(rng.uniform(0.5, 2.0)),
                kappa=float(rng.uniform(0.5, 1.5)),
                h=float(rng.uniform(0.2, 0.8)),
            )
        return CpuBandwidthModel(
            a=float(rng.uniform(0.5, 2.0)),
            b=float(rng.uniform(1.0, 3.0)),
            h=float(rng.uniform(0.5, 1.5)),
            theta=float(rng.uniform(0.5, 1.5)),
            v_floor=0.05,
        )

    specs = []
    for i in range(n):
        weight = float(rng.uniform(0.2, 1.0))
        d_base = float(rng.uniform(0.2, 0.8))
        if i < n // 2:
            demand = DemandSchedule((
                (0, d_base), (zone_steps, 2.0 * d_base), (2 * zone_steps, d_base),
            ))
        else:
            demand = DemandSchedule.constant(d_base)
        d_lo, d_hi = demand.span()
        kind = str(rng.choice(list(model_mix)))
        model = None
        for _ in range(100):
            try:
                candidate = AffineNormalizer.fit(
                    draw_model(kind), demand_range=(d_lo, d_hi), c_target=2.0
                )
            except ConfigError:
                continue
            if validate_assumptions(candidate, (d_lo, d_hi)).passed:
                model = candidate
                break
        if model is None:
            raise ConfigError(
                f"task {i}: no valid {kind} model after 100 attempts"
            )
        specs.append(TaskSpec(id=i, weight=weight, utility=model, demand=demand))
    cfg = _make_config(
        {
            "epsilon": 5e-4,
            "mu_exponent": 1.0 / 20.0,
            "gamma": 100.0,
            "eta_bar": 1e-3,
            "zeta_bar": 1e-3,
            "horizon": 3 * zone_steps,
            "seed": seed,
            "s_init": 0.5,
        },
        overrides,
    )
    return specs, cfg


def zone_starts(specs: Sequence[TaskSpec]) -> list[int]:
    """Merged, sorted zone boundaries across all task schedules."""
    return sorted({s0 for t in specs for s0 in t.demand.starts()})


def demand_matrix(specs: Sequence[TaskSpec], steps: np.ndarray) -> np.ndarray:
    """Demand values per (recorded step, task)."""
    out = np.empty((len(steps), len(specs)))
    for j, t in enumerate(specs):
        starts = np.array(t.demand.starts(), dtype=np.int64)
        values = np.array(t.demand.values())
        out[:, j] = values[np.searchsorted(starts, steps, side="right") - 1]
    return out


def recurrence_window(epsilon: float, lam_min: float, c_bar: float) -> int:
    """Window length over which the recurrence properties are checked."""
    return int(math.ceil(5.0 / (epsilon * lam_min / c_bar)))


@dataclass
class ZoneSummary:
    """Tail statistics (final 25%) for one demand zone."""

    start: int
    end: int
    complete: bool
    n_records: int
    insufficient: bool
    v_mean: np.ndarray | None = None
    v_std: np.ndarray | None = None
    s_mean: np.ndarray | None = None
    f_abs_mean: np.ndarray | None = None
    phi_sq_mean: float | None = None
    adapt_steps: int | None = None
    s_opt_fraction: float | None = None


@dataclass
class ScenarioResult:
    """Per-zone summaries plus whole-run property verdicts."""

    zones: list[ZoneSummary]
    verdicts: dict[str, dict]

    @property
    def all_pass(self) -> bool:
        return all(v["pass"] is not False for v in self.verdicts.values())


def _window_verdict(
    v: np.ndarray, steps: np.ndarray, burn_in: int, window: int,
    threshold: float, mode: str,
) -> dict:
    """Recurrence check: each task crosses the threshold in every window."""
    idx0 = int(np.searchsorted(steps, burn_in, side="left"))
    usable = len(steps) - idx0
    n_windows = usable // window
    if n_windows == 0:
        return {"pass": None, "detail": "insufficient horizon for one window",
                "windows": 0}
    failures = 0
    for w in range(n_windows):
        chunk = v[idx0 + w * window: idx0 + (w + 1) * window]
        if mode == "exceeds":
            ok = (chunk.max(axis=0) > threshold).all()
        else:
            ok = (chunk.min(axis=0) < threshold).all()
        failures += 0 if ok else 1
    return {
        "pass": failures == 0,
        "detail": f"{n_windows} window(s) of {window} steps, {failures} failed, "
                  f"threshold {threshold:.6g}",
        "windows": n_windows,
    }


def summarize(
    trace: RunTrace,
    zones: Sequence[int],
    specs: Sequence[TaskSpec],
    cfg: EngineConfig,
) -> ScenarioResult:
    """Tail statistics per zone and property verdicts over the whole trace.

    Window-based verdicts need an unthinned trace; at stride > 1 they are
    reported as skipped. Zones with fewer than 40 records are marked
    insufficient and carry no statistics.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    steps = trace.steps
    horizon = cfg.horizon
    boundaries = list(zones) + [horizon]
    lam_min = min(t.weight for t in specs)
    c_bar = max(t.utility.bound_c for t in specs)
    bank = ModelBank([t.utility for t in specs])

    zone_summaries: list[ZoneSummary] = []
    for z in range(len(boundaries) - 1):
        start, end = boundaries[z], boundaries[z + 1]
        mask = (steps > start) & (steps <= end)
        n_rec = int(mask.sum())
        complete = trace.complete or (len(steps) > 0 and steps[-1] >= end)
        if n_rec < 40:
            zone_summaries.append(ZoneSummary(
                start=start, end=end, complete=complete,
                n_records=n_rec, insufficient=True,
            ))
            continue
        zsteps = steps[mask]
        zv = trace.v[mask]
        zs = trace.s[mask]
        zf = trace.f_obs[mask]
        zphi_sq = trace.phi_sq[mask]
        tail_from = end - (end - start) // 4
        tail = zsteps > tail_from
        v_tail_mean = zv[tail].mean(axis=0)

        dev_ok = np.abs(zv - v_tail_mean).max(axis=1) <= 0.02
        bad = np.flatnonzero(~dev_ok)
        adapt = int(zsteps[bad[-1] + 1] - start) if bad.size and bad[-1] + 1 < len(zsteps) \
            else (None if bad.size else 0)

        opt_from = end - (end - start) // 5
        opt_mask = zsteps > opt_from
        d_opt = demand_matrix(specs, zsteps[opt_mask])
        s_star = bank.argmax(zv[opt_mask], d_opt, tol=1e-6)
        frac = float(
            (np.abs(zs[opt_mask] - s_star) < 0.05).mean(axis=0).min()
        )

        zone_summaries.append(ZoneSummary(
            start=start, end=end, complete=complete, n_records=n_rec,
            insufficient=False,
            v_mean=v_tail_mean,
            v_std=zv[tail].std(axis=0),
            s_mean=zs[tail].mean(axis=0),
            f_abs_mean=np.abs(zf[tail]).mean(axis=0),
            phi_sq_mean=float(zphi_sq[tail].mean()),
            adapt_steps=adapt,
            s_opt_fraction=frac,
        ))

    led = trace.ledger
    eta = cfg.eta_bar
    verdicts: dict[str, dict] = {}
    verdicts["feasibility"] = {
        "pass": bool(
            led.max_simplex_dev <= 1e-9 and led.v_min >= 0.0 and led.v_max <= 1.0
            and trace.complete
        ),
        "detail": f"max |sum(v)-1| = {led.max_simplex_dev:.3e}, "
                  f"v range [{led.v_min:.6g}, {led.v_max:.6g}]"
                  + ("" if trace.complete else
                     f", aborted at step {trace.breach_step}"),
    }
    verdicts["fairness_zero_sum"] = {
        "pass": bool(led.max_abs_f_sum <= 1e-12),
        "detail": f"max |sum(F)| = {led.max_abs_f_sum:.3e}",
    }
    slack = 2.0 * eta * eta + 1e-12
    verdicts["fairness_increment_bounds"] = {
        "pass": bool(led.f_low_gap <= slack and led.f_high_gap <= slack),
        "detail": f"low gap {led.f_low_gap:.3e}, high gap {led.f_high_gap:.3e}, "
                  f"slack {slack:.3e}",
    }
    if trace.stride == 1 and trace.complete:
        window = recurrence_window(cfg.epsilon, lam_min, c_bar)
        burn_in = horizon // 10
        alpha_star = lam_min / (len(specs) * c_bar)
        beta = c_bar / (len(specs) * lam_min) + 0.05
        verdicts["starvation"] = _window_verdict(
            trace.v, steps, burn_in, window, alpha_star, "exceeds"
        )
        if beta >= 1.0:
            verdicts["balance"] = {
                "pass": None,
                "detail": f"vacuous: threshold {beta:.6g} >= 1",
                "windows": 0,
            }
        else:
            verdicts["balance"] = _window_verdict(
                trace.v, steps, burn_in, window, beta, "below"
            )
    else:
        detail = "requires stride 1" if trace.stride != 1 else "run incomplete"
        verdicts["starvation"] = {"pass": None, "detail": detail, "windows": 0}
        verdicts["balance"] = {"pass": None, "detail": detail, "windows": 0}
    tol_f = 10.0 * (cfg.epsilon + eta * eta)
    verdicts["fairness_residual"] = {
        "pass": bool(led.phi_sq_min <= tol_f),
        "detail": f"min sum(phi^2) = {led.phi_sq_min:.3e} at step "
                  f"{led.phi_sq_min_step} (tolerance {tol_f:.3e})",
    }
    tail_n = max(1, int(round(len(trace) * 0.2)))
    d_tail = demand_matrix(specs, steps[-tail_n:])
    s_star = bank.argmax(trace.v[-tail_n:], d_tail, tol=1e-6)
    frac_all = (np.abs(trace.s[-tail_n:] - s_star) < 0.05).mean(axis=0)
    verdicts["s_optimality"] = {
        "pass": bool(frac_all.min() > 0.9),
        "detail": f"min per-task near-optimal fraction {frac_all.min():.3f} "
                  "over final 20% of the run",
    }
    return ScenarioResult(zones=zone_summaries, verdicts=verdicts)
