"""Shared domain types: task descriptions, engine configuration, seeded noise.

Everything here is immutable after construction. ``NoiseSource`` is a pure
function of its key, so values can be drawn in any order (or in bulk) and
replayed exactly from the same seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .utility import UtilityModel

__all__ = [
    "ConfigError",
    "DemandSchedule",
    "EngineConfig",
    "FairshareError",
    "FeasibilityBreach",
    "MeasurementError",
    "NoiseSource",
    "TaskSpec",
    "TaskState",
    "ValidationReport",
    "draw_measurement_noise",
    "uniform_allocation",
    "validate_config",
]


class FairshareError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FairshareError):
    """Configuration or scenario input is invalid."""


class MeasurementError(FairshareError):
    """A utility measurement was out of its sane range (non-positive)."""


class FeasibilityBreach(FairshareError):
    """A share update left the unit box; the step size is too large.

    The engine aborts instead of projecting, so a misconfigured step size is
    loud rather than silently masked. When raised from a run, ``trace`` holds
    the records collected up to the failing step.
    """

    def __init__(self, message: str, step: int | None = None, values=None):
        super().__init__(message)
        self.step = step
        self.values = values
        self.trace = None


@dataclass(frozen=True)
class DemandSchedule:
    """Piecewise-constant demand indexed by engine step.

    ``zones`` is an ordered tuple of ``(start_step, value)`` pairs; the first
    zone must start at step 0 and the last zone extends forever.
    """

    zones: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.zones:
            raise ConfigError("demand schedule needs at least one zone")
        starts = [z[0] for z in self.zones]
        if starts[0] != 0:
            raise ConfigError("first demand zone must start at step 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("demand zone starts must be strictly increasing")
        if any(not np.isfinite(z[1]) for z in self.zones):
            raise ConfigError("demand values must be finite")

    @classmethod
    def constant(cls, value: float) -> "DemandSchedule":
        return cls(((0, float(value)),))

    def at(self, k: int) -> float:
        """Demand value at step ``k`` (defined for every k >= 0)."""
        if k < 0:
            raise ValueError(f"step index must be >= 0, got {k}")
        value = self.zones[0][1]
        for start, zone_value in self.zones:
            if k < start:
                break
            value = zone_value
        return value

    def starts(self) -> tuple[int, ...]:
        return tuple(z[0] for z in self.zones)

    def values(self) -> tuple[float, ...]:
        return tuple(z[1] for z in self.zones)

    def span(self) -> tuple[float, float]:
        """(min, max) over all zone values; used to size validation grids."""
        vals = self.values()
        return min(vals), max(vals)


@dataclass(frozen=True)
class TaskSpec:
    """Immutable description of one task: weight, utility model, demand."""

    id: int
    weight: float
    utility: "UtilityModel"
    demand: DemandSchedule

    def __post_init__(self):
        if not (0.0 < self.weight <= 1.0):
            raise ConfigError(
                f"task {self.id}: weight must be in (0, 1], got {self.weight}"
            )


@dataclass(frozen=True)
class TaskState:
    """Per-task state: share v, level s, and the two low-pass filter states.

    ``u_lp`` tracks the measured utility and ``s_lp`` tracks the level; their
    increments provide the gradient-direction estimate for the level update.
    """

    v: float
    s: float
    u_lp: float
    s_lp: float

    def __post_init__(self):
        if not (0.0 <= self.v <= 1.0):
            raise ConfigError(f"share must be in [0, 1], got {self.v}")
        if not (0.0 <= self.s <= 1.0):
            raise ConfigError(f"level must be in [0, 1], got {self.s}")
        if not (np.isfinite(self.u_lp) and np.isfinite(self.s_lp)):
            raise ConfigError("filter states must be finite")


@dataclass(frozen=True)
class EngineConfig:
    """Step sizes, filter gain, noise bounds, horizon and seed for one run.

    The level update uses the effective step ``epsilon * mu`` with
    ``mu = epsilon ** -mu_exponent``, so it dominates the share step as
    epsilon shrinks (any exponent in (0, 1) preserves that separation).
    """

    epsilon: float
    mu_exponent: float = 0.05
    gamma: float = 100.0
    eta_bar: float = 0.0
    zeta_bar: float = 0.0
    horizon: int = 10_000
    seed: int = 0
    s_init: float = 0.5
    v_init: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0.0 < self.mu_exponent < 1.0):
            raise ConfigError(
                f"mu_exponent must lie in (0, 1), got {self.mu_exponent}"
            )
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.eta_bar < 0.0 or self.zeta_bar < 0.0:
            raise ConfigError("noise bounds must be >= 0")
        if not isinstance(self.horizon, int) or isinstance(self.horizon, bool):
            raise ConfigError(f"horizon must be an integer, got {self.horizon!r}")
        if self.horizon < 0:
            raise ConfigError(f"horizon must be >= 0, got {self.horizon}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not (0.0 <= self.s_init <= 1.0):
            raise ConfigError(f"s_init must be in [0, 1], got {self.s_init}")
        if self.v_init is not None:
            object.__setattr__(self, "v_init", tuple(float(x) for x in self.v_init))
            arr = np.asarray(self.v_init, dtype=float)
            if arr.size == 0:
                raise ConfigError("v_init cannot be empty")
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ConfigError("v_init entries must lie in [0, 1]")
            if abs(float(arr.sum()) - 1.0) > 1e-12:
                raise ConfigError(
                    f"v_init must lie on the unit simplex, sum={arr.sum()!r}"
                )

    @property
    def mu(self) -> float:
        return self.epsilon ** (-self.mu_exponent)

    @property
    def eps_mu(self) -> float:
        """Effective step of the level recursion, epsilon ** (1 - exponent)."""
        return self.epsilon * self.mu

    @property
    def eps_mu_gamma(self) -> float:
        """Filter contraction product; must stay below 1 for stable filters."""
        return self.eps_mu * self.gamma


@dataclass
class ValidationReport:
    """Outcome of configuration checks; callers decide severity."""

    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_config(
    cfg: EngineConfig, n: int, specs: Sequence[TaskSpec] | None = None
) -> ValidationReport:
    """Check a configuration against the stability and noise conditions.

    Errors: the step condition ``epsilon * mu * gamma < 1`` (unstable filters
    otherwise) and ``eta_bar >= 1`` (inverse-measurement bounds break down).
    Warning: epsilon above the conservative feasibility threshold computed
    from the task set (requires ``specs``).
    """
    if n < 1:
        raise ValueError(f"task count must be >= 1, got {n}")
    report = ValidationReport()
    if cfg.eps_mu_gamma >= 1.0:
        report.errors.append(
            "step condition violated: epsilon*mu(epsilon)*gamma = "
            f"{cfg.eps_mu_gamma:.6g} >= 1 (need epsilon*mu < 1/gamma)"
        )
    if cfg.eta_bar >= 1.0:
        report.errors.append(
            f"eta_bar = {cfg.eta_bar:.6g} >= 1 makes measured utilities "
            "non-invertible (utilities are only guaranteed >= 1)"
        )
    if cfg.v_init is not None and specs is not None and len(cfg.v_init) != len(specs):
        report.errors.append(
            f"v_init has {len(cfg.v_init)} entries for {len(specs)} tasks"
        )
    if specs is not None and not report.errors:
        from .oracle import safe_epsilon

        lam_min = min(t.weight for t in specs)
        c_bar = max(t.utility.bound_c for t in specs)
        eps_safe = safe_epsilon(lam_min, c_bar, n, cfg.eta_bar)
        if cfg.epsilon > eps_safe:
            report.warnings.append(
                f"epsilon = {cfg.epsilon:.6g} exceeds the conservative "
                f"feasibility threshold {eps_safe:.6g}; shares may leave the "
                "unit box and abort the run"
            )
    return report


def uniform_allocation(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"task count must be >= 1, got {n}")
    return np.full(n, 1.0 / n)


# SplitMix64 finalizer constants (Steele et al. mixing function).
_U64 = np.uint64
_MASK = 0xFFFFFFFFFFFFFFFF
_GOLD = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_SH30 = _U64(30)
_SH27 = _U64(27)
_SH31 = _U64(31)
_SH11 = _U64(11)
_INV53 = 1.0 / float(1 << 53)

CHANNEL_MEASUREMENT = 0
CHANNEL_DITHER = 1


def _mix(z):
    # uint64 arithmetic wraps modulo 2**64 by design.
    with np.errstate(over="ignore"):
        z = z + _GOLD
        z = (z ^ (z >> _SH30)) * _MIX1
        z = (z ^ (z >> _SH27)) * _MIX2
        return z ^ (z >> _SH31)


def _keyed_unit(seed, task, channel, step):
    """Uniform [0, 1) as a pure function of (seed, task, channel, step)."""
    h = _mix(_U64(seed & _MASK))
    with np.errstate(over="ignore"):
        h = _mix(h ^ task)
        h = _mix(h ^ channel)
        h = _mix(h ^ step)
    # The top 53 bits convert to float64 exactly.
    return (h >> _SH11) * _INV53


@dataclass(frozen=True)
class NoiseSource:
    """Counter-based noise streams, one per (task, channel), keyed by seed.

    Measurement noise and dither are i.i.d. uniform on [-bound, +bound].
    Identical seeds reproduce bit-identical sequences regardless of the
    order draws are made in.
    """

    seed: int
    eta_bar: float = 0.0
    zeta_bar: float = 0.0

    def _draw(self, k: int, i: int, channel: int, bound: float) -> float:
        if bound == 0.0:
            return 0.0
        u = _keyed_unit(self.seed, _U64(i), _U64(channel), _U64(k))
        return bound * (2.0 * u - 1.0)

    def _draw_row(self, k: int, n: int, channel: int, bound: float) -> np.ndarray:
        if bound == 0.0:
            return np.zeros(n)
        tasks = np.arange(n, dtype=np.uint64)
        u = _keyed_unit(self.seed, tasks, _U64(channel), _U64(k))
        return bound * (2.0 * u - 1.0)

    def _draw_block(self, k0: int, k1: int, n: int, channel: int, bound: float) -> np.ndarray:
        if bound == 0.0:
            return np.zeros((k1 - k0, n))
        steps = np.arange(k0, k1, dtype=np.uint64)[:, None]
        tasks = np.arange(n, dtype=np.uint64)[None, :]
        u = _keyed_unit(self.seed, tasks, _U64(channel), steps)
        return bound * (2.0 * u - 1.0)

    def measurement(self, k: int, i: int) -> float:
        return self._draw(k, i, CHANNEL_MEASUREMENT, self.eta_bar)

    def dither(self, k: int, i: int) -> float:
        return self._draw(k, i, CHANNEL_DITHER, self.zeta_bar)

    def measurement_row(self, k: int, n: int) -> np.ndarray:
        return self._draw_row(k, n, CHANNEL_MEASUREMENT, self.eta_bar)

    def dither_row(self, k: int, n: int) -> np.ndarray:
        return self._draw_row(k, n, CHANNEL_DITHER, self.zeta_bar)

    def measurement_block(self, k0: int, k1: int, n: int) -> np.ndarray:
        return self._draw_block(k0, k1, n, CHANNEL_MEASUREMENT, self.eta_bar)

    def dither_block(self, k0: int, k1: int, n: int) -> np.ndarray:
        return self._draw_block(k0, k1, n, CHANNEL_DITHER, self.zeta_bar)


def draw_measurement_noise(src: NoiseSource, k: int, i: int) -> float:
    """Measurement-noise draw for task ``i`` at step ``k``; in [-eta_bar, eta_bar]."""
    return src.measurement(k, i)
