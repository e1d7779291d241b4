"""Configuration validation, demand schedules, and the seeded noise source."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairshare.core import (
    ConfigError,
    DemandSchedule,
    EngineConfig,
    NoiseSource,
    TaskSpec,
    draw_measurement_noise,
    uniform_allocation,
    validate_config,
)
from fairshare.utility import HomeEnergyModel


def make_config(**kw) -> EngineConfig:
    base = dict(epsilon=5e-4, mu_exponent=0.05, gamma=100.0, horizon=100, seed=1)
    base.update(kw)
    return EngineConfig(**base)


class TestEngineConfig:
    def test_reference_parameters_satisfy_step_condition(self):
        cfg = make_config()
        assert cfg.eps_mu == pytest.approx(0.0005**0.95)
        assert cfg.eps_mu == pytest.approx(7.3e-4, rel=2e-2)
        assert cfg.eps_mu < 1.0 / cfg.gamma
        assert validate_config(cfg, 4).ok

    def test_large_epsilon_violates_step_condition(self):
        cfg = make_config(epsilon=0.1)
        assert cfg.eps_mu == pytest.approx(0.1**0.95)
        report = validate_config(cfg, 4)
        assert not report.ok
        assert any("step condition" in e for e in report.errors)

    def test_zero_noise_has_no_noise_violations(self):
        report = validate_config(make_config(eta_bar=0.0), 4)
        assert not any("eta" in e for e in report.errors)

    def test_unit_noise_bound_is_an_error(self):
        report = validate_config(make_config(eta_bar=1.0), 4)
        assert any("eta_bar" in e for e in report.errors)

    def test_oversized_epsilon_warns_against_task_set(self):
        model = HomeEnergyModel(a=2.0, b=1.0, c=2.0, kappa=1.0, h=0.5)
        specs = [
            TaskSpec(id=i, weight=1.0, utility=model,
                     demand=DemandSchedule.constant(0.4))
            for i in range(4)
        ]
        report = validate_config(make_config(epsilon=0.05, gamma=5.0), 4, specs)
        assert report.ok
        assert any("feasibility threshold" in w for w in report.warnings)

    @pytest.mark.parametrize("bad", [
        dict(epsilon=0.0),
        dict(epsilon=-1e-3),
        dict(mu_exponent=0.0),
        dict(mu_exponent=1.0),
        dict(gamma=0.0),
        dict(eta_bar=-0.1),
        dict(horizon=-1),
        dict(s_init=1.5),
        dict(v_init=(0.6, 0.6)),
        dict(v_init=(0.5, 0.5 + 1e-6)),
        dict(v_init=(1.2, -0.2)),
    ])
    def test_constructor_rejects_structural_violations(self, bad):
        with pytest.raises(ConfigError):
            make_config(**bad)

    def test_v_init_on_simplex_accepted(self):
        cfg = make_config(v_init=(0.25, 0.25, 0.25, 0.25))
        assert cfg.v_init == (0.25, 0.25, 0.25, 0.25)

    def test_task_count_must_be_positive(self):
        with pytest.raises(ValueError):
            validate_config(make_config(), 0)


class TestDemandSchedule:
    def test_lookup_respects_zone_boundaries(self):
        sched = DemandSchedule(((0, 0.4), (10, 0.8), (20, 0.4)))
        assert sched.at(0) == 0.4
        assert sched.at(9) == 0.4
        assert sched.at(10) == 0.8
        assert sched.at(19) == 0.8
        assert sched.at(20) == 0.4
        assert sched.at(10**9) == 0.4

    def test_first_zone_must_start_at_zero(self):
        with pytest.raises(ConfigError):
            DemandSchedule(((5, 0.4),))

    def test_starts_must_increase(self):
        with pytest.raises(ConfigError):
            DemandSchedule(((0, 0.4), (10, 0.8), (10, 0.4)))

    def test_span_covers_all_zone_values(self):
        sched = DemandSchedule(((0, 0.4), (10, 0.8), (20, 0.4)))
        assert sched.span() == (0.4, 0.8)


class TestTaskSpec:
    @pytest.mark.parametrize("weight", [0.0, -0.5, 1.0 + 1e-9])
    def test_weight_outside_unit_interval_rejected(self, weight):
        model = HomeEnergyModel(a=2.0, b=1.0, c=2.0, kappa=1.0, h=0.5)
        with pytest.raises(ConfigError):
            TaskSpec(id=0, weight=weight, utility=model,
                     demand=DemandSchedule.constant(0.4))


class TestNoiseSource:
    def test_zero_bound_always_draws_zero(self):
        src = NoiseSource(seed=1, eta_bar=0.0, zeta_bar=0.0)
        assert draw_measurement_noise(src, 0, 0) == 0.0
        assert np.all(src.measurement_block(0, 100, 5) == 0.0)

    def test_draws_respect_reference_bound(self):
        src = NoiseSource(seed=9, eta_bar=0.001, zeta_bar=0.001)
        block = src.measurement_block(0, 1000, 8)
        assert np.all(np.abs(block) <= 0.001)
        assert np.all(np.abs(src.dither_block(0, 1000, 8)) <= 0.001)

    def test_replay_same_key_gives_identical_value(self):
        a = NoiseSource(seed=42, eta_bar=0.5)
        b = NoiseSource(seed=42, eta_bar=0.5)
        assert a.measurement(7, 3) == b.measurement(7, 3)

    def test_scalar_row_and_block_paths_agree_bitwise(self):
        src = NoiseSource(seed=5, eta_bar=0.2, zeta_bar=0.1)
        block = src.measurement_block(0, 20, 6)
        for k in (0, 7, 19):
            row = src.measurement_row(k, 6)
            assert np.array_equal(row, block[k])
            for i in (0, 3, 5):
                assert src.measurement(k, i) == block[k, i]

    def test_channels_are_distinct_streams(self):
        src = NoiseSource(seed=5, eta_bar=0.2, zeta_bar=0.2)
        assert src.measurement(3, 1) != src.dither(3, 1)

    def test_empirical_mean_is_near_zero(self):
        eta_bar = 0.001
        src = NoiseSource(seed=11, eta_bar=eta_bar)
        draws = src.measurement_block(0, 250_000, 4)
        assert draws.size == 10**6
        assert abs(draws.mean()) <= 3.0 * eta_bar / 1000.0

    @given(seed=st.integers(min_value=0, max_value=2**63 - 1),
           k=st.integers(min_value=0, max_value=2**31),
           i=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=200, deadline=None)
    def test_every_draw_inside_bound_and_deterministic(self, seed, k, i):
        src = NoiseSource(seed=seed, eta_bar=0.3, zeta_bar=0.7)
        x = src.measurement(k, i)
        assert abs(x) <= 0.3
        assert abs(src.dither(k, i)) <= 0.7
        assert x == NoiseSource(seed=seed, eta_bar=0.3).measurement(k, i)


def test_uniform_allocation_lies_on_simplex():
    v = uniform_allocation(7)
    assert v.shape == (7,)
    assert v.sum() == pytest.approx(1.0, abs=1e-15)
