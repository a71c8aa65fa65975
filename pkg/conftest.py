"""Shared fixtures: small hand-built cohorts on coarse grids"""

import numpy as np
import pytest

from lib.trajectory import Cohort, TimeGrid, Trajectory, build_covariates


def make_cohort(glucose, masks=None, followups=None, grid=None, label="cohort", covariates=None):
    """Cohort from rows of glucose values; masks default to all True"""
    glucose = np.atleast_2d(np.asarray(glucose, dtype=float))
    n, k = glucose.shape
    grid = grid or TimeGrid(1440.0 / (k - 1), 1.0)
    masks = np.ones((n, k), dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    followups = [grid.tau_days + 1.0] * n if followups is None else followups
    trajectories = tuple(
        Trajectory(f"{label}-{i}", grid, glucose[i], masks[i], followups[i]) for i in range(n))
    cohort = Cohort(trajectories, None, label)
    if covariates is not None:
        external = {t.subject_id: (("z",), np.full(grid.size, covariates[i]))
                    for i, t in enumerate(trajectories)}
        cohort = build_covariates(cohort, external, history=False)
    return cohort


@pytest.fixture
def hourly_grid():
    """One day at 60-minute spacing: 25 points"""
    return TimeGrid(60.0, 1.0)


@pytest.fixture
def random_cohort():
    """Forty subjects on a 3-day, 2-hour grid with gaps and Cox-like dropout"""
    rng = np.random.default_rng(7)
    grid = TimeGrid(120.0, 3.0)
    n = 40
    glucose = rng.normal(150.0, 50.0, size=(n, grid.size))
    masks = rng.random((n, grid.size)) > 0.1
    z = rng.uniform(-0.5, 0.5, size=n)
    followups = np.where(rng.random(n) < 0.5, rng.uniform(0.5, 2.9, size=n), 4.0)
    return make_cohort(glucose, masks, followups, grid, label="random", covariates=z)
