"""
Simulator tests: GP paths, intermittent gaps and follow-up generators
"""

import math

import numpy as np
import pytest

from lib.errors import SimulationError
from lib.glucose_simulator import (
    BaselineHazard, KernelSpec, MeanFunction, MissingnessSpec, cox_followup_days, inject_intermittent,
    intermittent_gaps, kernel_cholesky, mask_gaps, sample_C_cox, sample_C_noninformative,
    sample_C_transformation, sample_gp_paths, sample_gp_trajectory,
)
from lib.trajectory import TimeGrid, Trajectory

DAY_GRID = TimeGrid(60.0, 2.0)


# ==================== Gaussian process ====================

def test_vanishing_variance_returns_the_mean():
    grid = TimeGrid(30.0, 2.0)
    mean = MeanFunction()
    traj = sample_gp_trajectory(mean, KernelSpec(sigma=1e-9), grid, np.random.default_rng(0))
    assert traj.is_complete
    assert np.allclose(traj.glucose, mean.values(grid), atol=1e-6)


def test_kernel_is_daily_periodic():
    kernel = KernelSpec()
    assert kernel.covariance([0.0], [1440.0])[0, 0] == pytest.approx(kernel.sigma ** 2)
    assert kernel.covariance([0.0], [720.0])[0, 0] == pytest.approx(kernel.sigma ** 2 * math.exp(-2.0))


def test_mean_function_shape():
    grid = TimeGrid(60.0, 1.0)
    values = MeanFunction(baseline=150.0, decay=0.0, amplitude=10.0, phase=0.0).values(grid)
    assert values[0] == pytest.approx(150.0)
    assert values[6] == pytest.approx(160.0)
    tabulated = MeanFunction(table_minutes=(0.0, 1440.0), table_values=(100.0, 200.0)).values(grid)
    assert tabulated[12] == pytest.approx(150.0)


def test_default_mean_starts_at_the_trough_and_settles():
    grid = TimeGrid(60.0, 7.0)
    values = MeanFunction().values(grid)
    assert values[0] == pytest.approx(90.0)
    assert values[0] == values[:24].min()
    assert np.mean(values[:24]) > np.mean(values[144:168])
    assert np.mean(values[144:168]) == pytest.approx(160.0, abs=0.05)


def test_multi_day_kernel_factorizes():
    factor = kernel_cholesky(KernelSpec(), TimeGrid(30.0, 3.0))
    assert np.all(np.isfinite(factor))


def test_jitter_beyond_the_limit_is_an_error():
    with pytest.raises(SimulationError):
        kernel_cholesky(KernelSpec(jitter=1e-3), TimeGrid(60.0, 1.0))


# ==================== Intermittent gaps ====================

def test_huge_start_scale_means_no_gaps():
    spec = MissingnessSpec(intermittent_start_scale=1e12)
    assert intermittent_gaps(spec, 7 * 1440.0, np.random.default_rng(1)) == []


def test_gap_masks_every_touched_interval():
    grid = TimeGrid(5.0, 1.0)
    mask = mask_gaps(grid, [(100.0, 130.0)])
    assert np.sum(~mask) == 6
    assert not mask[20:26].any()
    assert mask[19] and mask[26]


def test_long_run_gap_fraction():
    spec = MissingnessSpec()
    gaps = intermittent_gaps(spec, 1e7, np.random.default_rng(2))
    covered = sum(end - start for start, end in gaps)
    expected = 40.0 / (3424.0 + 40.0)
    assert covered / 1e7 == pytest.approx(expected, rel=0.1)


def test_inject_keeps_glucose_and_followup():
    grid = TimeGrid(5.0, 1.0)
    traj = Trajectory("s", grid, np.full(grid.size, 120.0), np.ones(grid.size, dtype=bool), 0.8)
    gapped = inject_intermittent(traj, MissingnessSpec(intermittent_start_scale=200.0),
                                 np.random.default_rng(3))
    assert gapped.followup_days == 0.8
    assert np.array_equal(gapped.glucose, traj.glucose)
    assert gapped.intermittent_mask.sum() < grid.size


# ==================== Follow-up generators ====================

def test_mixture_followup_distribution():
    rng = np.random.default_rng(4)
    draws = np.array([sample_C_noninformative(rng) for _ in range(100_000)])
    assert np.mean(draws <= 2.0) == pytest.approx(0.8, abs=0.01)
    assert np.mean(draws) == pytest.approx(1.9, abs=0.03)
    assert draws.min() > 0.0 and draws.max() <= 9.0


def test_empirical_followup_resamples_the_table():
    rng = np.random.default_rng(5)
    table = (0.5, 3.0, 8.0)
    draws = {sample_C_noninformative(rng, "empirical", table) for _ in range(200)}
    assert draws == set(table)
    with pytest.raises(ValueError):
        sample_C_noninformative(rng, "empirical", ())


def test_transformation_median_is_the_scale():
    rng = np.random.default_rng(6)
    draws = [sample_C_transformation(0.0, 1.0, 1.0, rng) for _ in range(20_000)]
    assert np.median(draws) == pytest.approx(1.0, rel=0.05)


def test_transformation_shift_scales_the_duration():
    for p in (0.0, 0.5, 1.0):
        shifted = sample_C_transformation(1.0, 8.0, p, np.random.default_rng(7))
        plain = sample_C_transformation(0.0, 8.0, p, np.random.default_rng(7))
        assert shifted / plain == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_null_cox_survival_at_one_day():
    n = 20_000
    rng = np.random.default_rng(8)
    history = np.zeros((n, DAY_GRID.size))
    followups = cox_followup_days(history, np.zeros(n), DAY_GRID, BaselineHazard(0.5, 0.5), (2.0, 2.0),
                                  rng.exponential(size=n))
    assert np.mean(followups > 1.0) == pytest.approx(math.exp(-1.0), abs=0.015)


def test_cox_inversion_is_exact_inside_an_interval():
    followups = cox_followup_days(np.zeros((1, DAY_GRID.size)), np.zeros(1), DAY_GRID,
                                  BaselineHazard(0.5, 0.5), (2.0, 2.0), np.array([0.5]))
    assert followups[0] == pytest.approx(0.25, rel=1e-12)


def test_no_crossing_is_capped_past_the_horizon():
    followups = cox_followup_days(np.zeros((1, DAY_GRID.size)), np.zeros(1), DAY_GRID,
                                  BaselineHazard(0.5, 0.5), (0.0, 0.0), np.array([50.0]))
    assert followups[0] == pytest.approx(2.0 + 1.0 / 24.0)


def test_minimum_followup_is_respected():
    n = 2000
    rng = np.random.default_rng(9)
    followups = cox_followup_days(np.zeros((n, DAY_GRID.size)), rng.uniform(-0.5, 0.5, n), DAY_GRID,
                                  BaselineHazard(0.5, 0.5), (2.0, 2.0), rng.exponential(size=n),
                                  min_followup_days=0.5)
    assert followups.min() >= 0.5 - 1e-12


def test_higher_history_lasts_longer_with_negative_beta():
    n = 500
    exposures = np.random.default_rng(10).exponential(size=n)
    low = cox_followup_days(np.full((n, DAY_GRID.size), 1.2), np.zeros(n), DAY_GRID,
                            BaselineHazard(), (-2.0, 0.0), exposures)
    high = cox_followup_days(np.full((n, DAY_GRID.size), 2.0), np.zeros(n), DAY_GRID,
                             BaselineHazard(), (-2.0, 0.0), exposures)
    assert np.all(high >= low)
    assert np.any(high > low)


def test_single_trajectory_cox_followup():
    grid = TimeGrid(60.0, 2.0)
    traj = Trajectory.complete("s", grid, np.full(grid.size, 150.0))
    value = sample_C_cox(traj, BaselineHazard(), (2.0, 2.0), np.random.default_rng(11), z2=0.0)
    assert 0.0 < value <= 2.0 + 1.0 / 24.0
    gapped = Trajectory("s", grid, traj.glucose, np.zeros(grid.size, dtype=bool), 3.0)
    with pytest.raises(ValueError):
        sample_C_cox(gapped, BaselineHazard(), (2.0, 2.0), np.random.default_rng(11))


def test_baseline_hazard_inverse():
    baseline = BaselineHazard(0.25, 0.75)
    days = np.array([0.1, 1.0, 4.5])
    assert np.allclose(baseline.inverse(baseline.cumulative(days)), days)
    with pytest.raises(ValueError):
        BaselineHazard(0.25, 1.0)


def test_gp_marginal_variance():
    grid = TimeGrid(60.0, 1.0)
    normals = np.random.default_rng(13).standard_normal((20_000, grid.size))
    paths = sample_gp_paths(np.zeros(grid.size), KernelSpec(), grid, normals)
    assert np.mean(np.var(paths, axis=0, ddof=1)) == pytest.approx(62.0 ** 2, rel=0.05)


def test_null_cox_followup_matches_the_baseline_law():
    n = 100_000
    grid = TimeGrid(240.0, 2.0)
    baseline = BaselineHazard(0.25, 0.75)
    draws = cox_followup_days(np.zeros((n, grid.size)), np.zeros(n), grid, baseline, (2.0, 2.0),
                              np.random.default_rng(14).exponential(size=n))
    observed = np.sort(draws[draws <= grid.tau_days])
    empirical = np.arange(1, observed.size + 1) / n
    expected = 1.0 - np.exp(-baseline.cumulative(observed))
    assert np.max(np.abs(empirical - expected)) < 0.01
