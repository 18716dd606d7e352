import numpy as np
import pytest

from layoutctl.errors import ConfigError
from layoutctl.schedule import (
    BETA_END,
    BETA_START,
    TRAIN_TIMESTEPS,
    DiffusionSchedule,
    _alpha_bars,
    ddim_step,
)


class TestNoiseTable:
    def test_train_grid_constants(self):
        assert TRAIN_TIMESTEPS == 1000
        assert BETA_START == 0.00085
        assert BETA_END == 0.012

    def test_beta_endpoints_linear_in_sqrt(self):
        bars = _alpha_bars()
        assert bars.shape == (TRAIN_TIMESTEPS,)
        # recover beta_0 and beta_999 from the cumulative products
        beta0 = 1.0 - bars[0]
        assert beta0 == pytest.approx(BETA_START, rel=1e-12)
        beta_last = 1.0 - bars[-1] / bars[-2]
        assert beta_last == pytest.approx(BETA_END, rel=1e-9)

    def test_alpha_bar_monotone_decreasing(self):
        bars = _alpha_bars()
        assert np.all(np.diff(bars) < 0)
        assert 0.0 < bars[-1] < bars[0] < 1.0


class TestScheduleIndexing:
    def test_timesteps_descend_with_uniform_stride(self):
        s = DiffusionSchedule.create(30)
        assert len(s.timesteps) == 30
        stride = TRAIN_TIMESTEPS // 30
        assert list(s.timesteps) == [stride * i for i in range(29, -1, -1)]
        assert s.timestep(0) == stride * 29  # noisiest first
        assert s.timestep(29) == 0

    def test_alpha_bar_after_final_step_is_one(self):
        s = DiffusionSchedule.create(10)
        assert s.alpha_bar_after(9) == 1.0
        assert s.alpha_bar_after(0) == s.alpha_bar(1)

    def test_index_bounds(self):
        s = DiffusionSchedule.create(10)
        with pytest.raises(ConfigError):
            s.timestep(10)
        with pytest.raises(ConfigError):
            s.alpha_bar(-1)

    def test_bad_step_counts(self):
        with pytest.raises(ConfigError):
            DiffusionSchedule.create(0)
        with pytest.raises(ConfigError):
            DiffusionSchedule.create(1001)


class TestDdimStep:
    def test_zero_epsilon_closed_form(self, rng):
        # with eps == 0 the update must be exactly
        # z' = sqrt(abar_next / abar_t) * z, relative tolerance 1e-6
        s = DiffusionSchedule.create(30)
        z = rng.standard_normal((12, 8, 8)).astype(np.float32)
        eps = np.zeros_like(z)
        for i in range(30):
            expected = z * np.float32(np.sqrt(s.alpha_bar_after(i) / s.alpha_bar(i)))
            got = ddim_step(z, eps, i, s)
            np.testing.assert_allclose(got, expected, rtol=1e-6, atol=0)
            z = got

    def test_final_step_returns_x0_exactly(self, rng):
        s = DiffusionSchedule.create(30)
        z = rng.standard_normal((12, 8, 8)).astype(np.float32)
        eps = rng.standard_normal((12, 8, 8)).astype(np.float32)
        i = 29
        abar = np.float32(s.alpha_bar(i))
        x0 = (z - np.float32(np.sqrt(1 - abar)) * eps) / np.float32(np.sqrt(abar))
        got = ddim_step(z, eps, i, s)
        # alpha_bar_after(29) == 1.0 so the update collapses to x0
        np.testing.assert_allclose(got, x0, rtol=1e-6, atol=0)

    def test_deterministic_and_dtype_stable(self, rng):
        s = DiffusionSchedule.create(12)
        z = rng.standard_normal((12, 8, 8)).astype(np.float32)
        eps = rng.standard_normal((12, 8, 8)).astype(np.float32)
        a = ddim_step(z, eps, 3, s)
        b = ddim_step(z, eps, 3, s)
        assert a.dtype == np.float32
        assert np.array_equal(a, b)

    def test_two_trajectories_same_inputs_identical(self, rng):
        s = DiffusionSchedule.create(8)
        z1 = rng.standard_normal((12, 8, 8)).astype(np.float32)
        z2 = z1.copy()
        eps = rng.standard_normal((12, 8, 8)).astype(np.float32)
        for i in range(8):
            z1 = ddim_step(z1, eps, i, s)
            z2 = ddim_step(z2, eps, i, s)
        assert np.array_equal(z1, z2)
