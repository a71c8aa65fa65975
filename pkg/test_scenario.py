"""
Scenario generation tests: streams, cohorts per group and the ground truth
"""

import numpy as np
import pytest

from lib.errors import SimulationError
from lib.estimators import naive_mean_tir, oracle_mean_tir
from lib.glucose_simulator import BaselineHazard, FollowupMode, MeanFunction, MissingnessSpec
from lib.scenario import GroupSpec, ScenarioConfig, generate_group, generate_scenario, ground_truth_mu
from lib.trajectory import RANGE_PRESETS, TimeGrid

GRID = TimeGrid(60.0, 2.0)


def small_scenario(n=30, seed=17, **overrides):
    gentle = MissingnessSpec(baseline_hazard=BaselineHazard(0.4, 0.5), beta=(0.5, 0.5),
                             history_reference_mgdl=180.0)
    groups = (
        GroupSpec("g1", n, MeanFunction(), gentle),
        GroupSpec("g2", n, MeanFunction(160.0, 40.0, 0.8, 15.0, 0.0),
                  MissingnessSpec(monotone_mode=FollowupMode.NONINFORMATIVE_MIXTURE)),
        GroupSpec("g3", n, MeanFunction(), MissingnessSpec(
            monotone_mode=FollowupMode.TRANSFORMATION_SENSITIVITY, transformation_scale=3.0),
            zeta_shift=-3.0),
    )
    return ScenarioConfig(groups, grid=GRID, seed=seed, ground_truth_n=400, **overrides)


def test_generation_is_deterministic():
    config = small_scenario()
    first = generate_scenario(config, ground_truth=False)
    second = generate_scenario(config, ground_truth=False)
    for label in config.labels:
        a, b = first.groups[label].masked.panel, second.groups[label].masked.panel
        assert np.array_equal(a.glucose, b.glucose, equal_nan=True)
        assert np.array_equal(a.followup_days, b.followup_days)
        assert np.array_equal(a.covariates, b.covariates)


def test_group_sizes_and_ids():
    draw = generate_scenario(small_scenario(n=12), ground_truth=False)
    for label, group in draw.groups.items():
        assert group.masked.n == 12 and group.complete.n == 12
        assert group.masked.subject_ids[0] == f"{label}-0000"
        assert group.masked.subject_ids == group.complete.subject_ids


def test_group_draw_does_not_depend_on_other_groups():
    config = small_scenario()
    alone = generate_group(config, 1)
    together = generate_scenario(config, ground_truth=False).groups["g2"]
    assert np.array_equal(alone.masked.panel.followup_days, together.masked.panel.followup_days)


def test_complete_cohort_agrees_where_observed():
    draw = generate_scenario(small_scenario(), ground_truth=False)
    for group in draw.groups.values():
        masked, complete = group.masked.panel, group.complete.panel
        assert complete.availability.all()
        available = masked.availability
        assert np.array_equal(masked.glucose[available], complete.glucose[available])
        assert np.all(masked.followup_days >= GRID.step_minutes / 1440.0)


def _heavy_gaps(start_scale):
    """Long gaps that start early, with follow-up under a tenth of a day"""
    return MissingnessSpec(intermittent_start_scale=start_scale, gap_low=600.0, gap_high=700.0,
                           monotone_mode=FollowupMode.NONINFORMATIVE_MIXTURE, mixture_weight=1.0,
                           mixture_first=(0.0, 0.1))


def test_every_subject_keeps_a_reading_inside_followup():
    config = ScenarioConfig((GroupSpec("g", 50, missing=_heavy_gaps(30.0)),),
                            grid=TimeGrid(60.0, 1.0), seed=8)
    panel = generate_group(config, 0).masked.panel
    assert np.all(panel.availability[:, :-1].any(axis=1))
    assert 0.0 <= naive_mean_tir(panel, RANGE_PRESETS['partition3'][1]).mu_hat <= 1.0


def test_gaps_that_always_cover_followup_are_an_error():
    config = ScenarioConfig((GroupSpec("g", 1, missing=_heavy_gaps(1e-3)),),
                            grid=TimeGrid(60.0, 1.0), seed=8)
    with pytest.raises(SimulationError):
        generate_group(config, 0)


def test_replicates_use_fresh_streams():
    config = small_scenario()
    first = generate_group(config, 0, replicate=0).masked.panel
    second = generate_group(config, 0, replicate=1).masked.panel
    assert not np.array_equal(first.glucose, second.glucose, equal_nan=True)


def test_covariate_names_follow_the_followup_model():
    draw = generate_scenario(small_scenario(), ground_truth=False)
    assert draw.groups["g1"].masked.covariates[0].names == ("prev_day_mean", "z2")
    assert draw.groups["g2"].masked.covariates[0].names == ("prev_day_mean", "z2")
    assert draw.groups["g3"].masked.covariates[0].names == ("zeta",)
    assert draw.groups["g3"].external_names == ("zeta",)


def test_time_constant_covariates_in_range():
    group = generate_scenario(small_scenario(n=60), ground_truth=False).groups["g3"]
    assert set(np.unique(group.zeta)) <= {0.0, 1.0}
    assert np.all((group.z2 >= -0.5) & (group.z2 <= 0.5))


def test_ground_truth_partition_and_agreement():
    config = small_scenario(n=200)
    ranges = RANGE_PRESETS['partition3']
    truth = ground_truth_mu(config, ranges)
    draw = generate_scenario(config, ground_truth=False)
    for label in config.labels:
        assert sum(truth[label][r.label]['mu'] for r in ranges) == pytest.approx(1.0, abs=1e-12)
        for r in ranges:
            entry = truth[label][r.label]
            subject_sd = entry['mc_se'] * np.sqrt(entry['n'])
            oracle = oracle_mean_tir(draw.groups[label].complete, r).mu_hat
            bound = 4.0 * np.sqrt(subject_sd ** 2 / 200 + entry['mc_se'] ** 2)
            assert abs(oracle - entry['mu']) <= bound + 1e-12


def test_supplied_ground_truth_is_used():
    config = small_scenario(ground_truth_mu={"g1": {"70-180": 0.6}})
    draw = generate_scenario(config)
    assert draw.ground_truth == {"g1": {"70-180": {'mu': 0.6, 'mc_se': 0.0, 'n': 0}}}


def test_overrides():
    config = small_scenario().with_overrides(seed=5, n=7, ground_truth_n=50)
    assert config.seed == 5 and config.ground_truth_n == 50
    assert all(g.n == 7 for g in config.groups)


def test_duplicate_group_labels():
    with pytest.raises(ValueError):
        ScenarioConfig((GroupSpec("g", 5), GroupSpec("g", 5)), grid=GRID)
