"""Analytic bounds, reference integrators, and the fair fixed-point solver."""
from __future__ import annotations

import numpy as np
import pytest

import fairshare as fs
from fairshare.core import DemandSchedule, EngineConfig, TaskSpec, uniform_allocation
from fairshare.oracle import (
    bounds,
    fair_fixed_point,
    integrate_full_ode,
    integrate_limiting_ode,
    probe_limit_points,
    safe_epsilon,
)
from fairshare.utility import (
    AffineNormalizer,
    CpuBandwidthModel,
    HomeEnergyModel,
    ModelBank,
    UtilityModel,
)

HOME = HomeEnergyModel(a=2.0, b=1.0, c=2.0, kappa=1.0, h=0.5)


class BumpModel(UtilityModel):
    """Concave in the level and independent of the share; keeps the level
    subsystem at an exact equilibrium, giving a clean share-only field."""

    def __init__(self, a: float, c: float, kappa: float = 1.0):
        self.a, self.c, self.kappa = a, c, kappa
        self.bound_c = a * kappa + c + 1e-6

    def eval(self, s, v, d):
        return self.a * (self.kappa - (s - d) ** 2) + self.c

    def grad_s(self, s, v, d):
        return -2.0 * self.a * (s - d)


def make_cfg(**kw):
    base = dict(epsilon=5e-4, mu_exponent=0.05, gamma=100.0, horizon=100, seed=1)
    base.update(kw)
    return EngineConfig(**base)


def identical_specs(n, bound_c=2.0, d=0.4):
    model = AffineNormalizer.fit(HOME, (d, d), c_target=bound_c)
    return [
        TaskSpec(id=i, weight=1.0, utility=model,
                 demand=DemandSchedule.constant(d))
        for i in range(n)
    ]


def random_specs(n, seed, with_cpu=True):
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        d = float(rng.uniform(0.2, 0.8))
        if with_cpu and rng.random() < 0.4:
            inner = CpuBandwidthModel(
                a=float(rng.uniform(0.5, 2.0)), b=float(rng.uniform(1.0, 3.0)),
                h=float(rng.uniform(0.5, 1.5)), theta=float(rng.uniform(0.5, 1.5)),
                v_floor=0.05,
            )
        else:
            inner = HomeEnergyModel(
                a=float(rng.uniform(0.5, 3.0)), b=float(rng.uniform(0.2, 1.5)),
                c=float(rng.uniform(0.5, 2.0)), kappa=float(rng.uniform(0.5, 1.5)),
                h=float(rng.uniform(0.2, 0.8)),
            )
        model = AffineNormalizer.fit(inner, (d, d), c_target=2.0)
        specs.append(TaskSpec(
            id=i, weight=float(rng.uniform(0.2, 1.0)), utility=model,
            demand=DemandSchedule.constant(d),
        ))
    return specs


class TestBounds:
    def test_four_identical_tasks(self):
        b = bounds(identical_specs(4, bound_c=2.0), make_cfg())
        assert b.starvation_threshold == pytest.approx(1.0 / 8.0, abs=1e-15)
        assert b.balance_threshold == pytest.approx(0.5, abs=1e-15)
        assert b.ordered

    def test_single_task_is_degenerate(self):
        b = bounds(identical_specs(1, bound_c=2.0), make_cfg())
        assert b.starvation_threshold == pytest.approx(0.5)
        assert b.balance_threshold == pytest.approx(2.0)
        assert b.balance_threshold >= 1.0

    def test_balance_threshold_scales_inversely_with_task_count(self):
        n = 1000
        b = bounds(identical_specs(n, bound_c=2.0), make_cfg())
        assert b.balance_threshold * n == pytest.approx(2.0, abs=1e-9)

    def test_thresholds_bracket_uniform_share(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 12))
            specs = random_specs(n, int(rng.integers(0, 10**6)))
            b = bounds(specs, make_cfg())
            assert b.starvation_threshold <= 1.0 / n <= b.balance_threshold

    def test_empty_task_set_rejected(self):
        with pytest.raises(ValueError):
            bounds([], make_cfg())

    def test_safe_epsilon_shrinks_with_task_count(self):
        values = [safe_epsilon(0.2, 2.0, n, 1e-3) for n in (2, 5, 20, 100)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert safe_epsilon(1.0, 2.0, 1, 0.0) == pytest.approx(0.5)


class TestFullOde:
    def test_equilibrium_initialization_is_stationary(self):
        specs = identical_specs(4)
        cfg = make_cfg(eta_bar=0.0, zeta_bar=0.0)
        bank = ModelBank([t.utility for t in specs])
        s_star = float(bank.argmax(np.full(4, 0.25), np.full(4, 0.4))[0])
        v0 = uniform_allocation(4)
        s0 = np.full(4, s_star)
        u0 = bank.eval(s0, v0, np.full(4, 0.4))
        traj = integrate_full_ode(
            specs, cfg, init=(v0, s0, u0, s0.copy()), t_end=1.0, dt=1e-3,
        )
        assert np.abs(traj.v - 0.25).max() <= 1e-12
        assert np.abs(traj.s - s_star).max() <= 1e-12

    def test_halving_dt_barely_moves_endpoint(self):
        specs = [
            TaskSpec(id=i, weight=w, utility=BumpModel(a, 1.2),
                     demand=DemandSchedule.constant(d))
            for i, (w, a, d) in enumerate(
                [(1.0, 1.5, 0.3), (0.8, 2.0, 0.5), (0.6, 1.0, 0.6)])
        ]
        cfg = make_cfg(eta_bar=0.0, zeta_bar=0.0,
                       v_init=(0.5, 0.3, 0.2))
        coarse = integrate_full_ode(specs, cfg, t_end=0.25, dt=5e-5)
        fine = integrate_full_ode(specs, cfg, t_end=0.25, dt=2.5e-5)
        assert np.abs(coarse.v[-1] - fine.v[-1]).max() <= 1e-8
        assert np.abs(coarse.s[-1] - fine.s[-1]).max() <= 1e-8

    def test_share_sum_preserved_along_trajectory(self):
        specs = random_specs(5, seed=2, with_cpu=False)
        cfg = make_cfg(v_init=(0.4, 0.25, 0.2, 0.1, 0.05))
        traj = integrate_full_ode(specs, cfg, t_end=2.0, dt=1e-3)
        assert np.abs(traj.v.sum(axis=1) - 1.0).max() <= 1e-12

    def test_discrete_path_tracks_integrator(self):
        specs = [
            TaskSpec(id=i, weight=w, utility=BumpModel(a, 1.2),
                     demand=DemandSchedule.constant(d))
            for i, (w, a, d) in enumerate(
                [(1.0, 1.5, 0.3), (0.8, 2.0, 0.5), (0.6, 1.0, 0.6),
                 (0.9, 1.2, 0.4)])
        ]
        eps = 1e-3
        cfg = make_cfg(epsilon=eps, eta_bar=0.0, zeta_bar=0.0,
                       horizon=int(round(2.0 / eps)),
                       v_init=(0.4, 0.3, 0.2, 0.1))
        trace = fs.run(specs, cfg)
        traj = integrate_full_ode(specs, cfg, t_end=2.0, dt=1e-3)
        t_disc = trace.steps * eps
        gap = max(
            float(np.abs(trace.v[:, i]
                         - np.interp(t_disc, traj.times, traj.v[:, i])).max())
            for i in range(4)
        )
        assert gap <= 0.05

    def test_invalid_grid_rejected(self):
        with pytest.raises(ValueError):
            integrate_full_ode(identical_specs(2), make_cfg(), t_end=1.0, dt=0.0)


class TestLimitingOde:
    def test_identical_tasks_converge_to_uniform(self):
        specs = identical_specs(5)
        v0 = np.array([0.5, 0.2, 0.15, 0.1, 0.05])
        traj = integrate_limiting_ode(specs, make_cfg(), v0, t_end=60.0,
                                      dt=0.02, stop_residual=1e-5)
        assert np.abs(traj.terminal() - 0.2).max() <= 1e-3

    def test_heterogeneous_pair_reaches_zero_residual(self):
        specs = random_specs(2, seed=5)
        traj = integrate_limiting_ode(
            specs, make_cfg(), uniform_allocation(2),
            t_end=120.0, dt=0.02, stop_residual=1e-8,
        )
        v_hat = traj.terminal()
        bank = ModelBank([t.utility for t in specs])
        d = np.array([t.demand.at(0) for t in specs])
        s_star = bank.argmax(v_hat, d, tol=1e-8)
        phi = fs.fairness_measure(specs, s_star, v_hat, d)
        assert np.abs(phi).max() <= 1e-6

    def test_fair_start_stays_put(self):
        specs = identical_specs(4)
        traj = integrate_limiting_ode(
            specs, make_cfg(), uniform_allocation(4), t_end=5.0, dt=0.05,
        )
        assert np.abs(traj.v - 0.25).max() <= 1e-9


class TestFairFixedPoint:
    def test_identical_tasks_need_one_sweep(self):
        specs = identical_specs(6)
        res = fair_fixed_point(specs, np.full(6, 0.5), tol=1e-10)
        assert res.converged
        assert res.iterations == 1
        assert np.abs(res.v - 1.0 / 6.0).max() <= 1e-12

    def test_share_independent_pair_matches_closed_form(self):
        # With no share term the fair split is w_i / sum(w).
        models = [BumpModel(1.5, 1.2), BumpModel(0.7, 2.0)]
        specs = [
            TaskSpec(id=i, weight=w, utility=models[i],
                     demand=DemandSchedule.constant(d))
            for i, (w, d) in enumerate([(0.9, 0.3), (0.5, 0.7)])
        ]
        s = np.array([0.4, 0.6])
        d = np.array([0.3, 0.7])
        u = np.array([models[i].eval(s[i], 0.0, d[i]) for i in range(2)])
        w = np.array([0.9, 0.5]) / u
        expected = w / w.sum()
        res = fair_fixed_point(specs, s, d, tol=1e-10)
        assert res.converged
        assert np.abs(res.v - expected).max() <= 1e-9

    def test_residual_meets_contract(self):
        for seed in range(5):
            specs = random_specs(5, seed=seed)
            res = fair_fixed_point(specs, np.full(5, 0.5), tol=1e-9)
            assert res.converged
            assert res.residual <= 1e-8

    def test_nonconvergence_is_reported_not_raised(self):
        specs = random_specs(3, seed=1)
        res = fair_fixed_point(specs, np.full(3, 0.5), tol=1e-12, max_iter=2)
        assert not res.converged

    def test_agrees_with_limiting_ode_on_random_instances(self):
        for seed in (11, 12, 13):
            specs = random_specs(5, seed=seed, with_cpu=False)
            bank = ModelBank([t.utility for t in specs])
            d = np.array([t.demand.at(0) for t in specs])
            traj = integrate_limiting_ode(
                specs, make_cfg(), uniform_allocation(5),
                t_end=150.0, dt=0.02, stop_residual=1e-9,
            )
            res = fair_fixed_point(
                specs, lambda v: bank.argmax(v, d, tol=1e-7), d, tol=1e-9,
            )
            assert res.converged
            assert np.abs(traj.terminal() - res.v).max() <= 1e-5


class TestProbeLimitPoints:
    def test_single_cluster_for_identical_tasks(self):
        specs = identical_specs(4)
        reps = probe_limit_points(specs, make_cfg(), n_starts=4, seed=0,
                                  t_end=80.0)
        assert len(reps) == 1
        assert np.abs(reps[0] - 0.25).max() <= 1e-3
