"""
Monte Carlo harness tests: small fast scenarios, then the shipped profiles (slow)
"""

import numpy as np
import pytest

from lib.config import ScenarioProfile
from lib.errors import ReplicationError
from lib.glucose_simulator import BaselineHazard, FollowupMode, MeanFunction, MissingnessSpec
from lib.montecarlo import default_pairs, run_replications
from lib.scenario import GroupSpec, ScenarioConfig
from lib.trajectory import RANGE_PRESETS, TimeGrid

PARTITION = RANGE_PRESETS['partition3']


def gentle_scenario(n=60):
    cox = MissingnessSpec(baseline_hazard=BaselineHazard(0.4, 0.5), beta=(0.5, 0.5),
                          history_reference_mgdl=180.0)
    mixture = MissingnessSpec(monotone_mode=FollowupMode.NONINFORMATIVE_MIXTURE)
    groups = (
        GroupSpec("g1", n, MeanFunction(), cox),
        GroupSpec("g2", n, MeanFunction(baseline=150.0), mixture),
        GroupSpec("g3", n, MeanFunction(), mixture),
    )
    return ScenarioConfig(groups, grid=TimeGrid(120.0, 2.0), seed=23, name="gentle")


def test_default_pairs():
    assert default_pairs(["a", "b", "c"]) == {'size': ("a", "c"), 'power': ("a", "b")}
    assert default_pairs(["a", "b"]) == {'power': ("a", "b")}
    assert default_pairs(["a"]) == {}


def test_point_estimates_without_bootstrap():
    report = run_replications(gentle_scenario(), reps=3, ranges=PARTITION, B=0, progress=False)
    assert report.failed == 0
    assert report.tests.empty
    summary = report.summary
    assert len(summary) == 3 * 3 * 3
    assert set(summary['method']) == {"oracle", "naive", "proposed"}
    assert summary['bse'].isna().all()
    assert summary.loc[summary['method'] == "oracle", 'rel_bias'].isna().all()
    assert (summary['reps_ok'] == 3).all()
    for (group, method), rows in summary.groupby(['group', 'method']):
        assert rows['avg_est'].sum() == pytest.approx(1.0, abs=1e-9)


def test_replications_are_reproducible():
    first = run_replications(gentle_scenario(n=30), reps=2, ranges=PARTITION, B=0, progress=False)
    second = run_replications(gentle_scenario(n=30), reps=2, ranges=PARTITION, B=0, progress=False)
    assert np.array_equal(first.summary['avg_est'].to_numpy(), second.summary['avg_est'].to_numpy())


def test_bootstrap_and_tests():
    report = run_replications(gentle_scenario(), reps=2, ranges=PARTITION, B=10, mode="km",
                              progress=False)
    summary = report.summary
    inferred = summary[summary['method'] != "oracle"]
    assert (inferred['bse'] >= 0).all()
    tests = report.tests
    assert set(tests['comparison']) == {"size", "power"}
    assert len(tests) == 2 * 3 * 2
    assert tests['rejection_rate'].between(0.0, 1.0).all()
    frame = report.to_frame()
    assert set(frame['kind']) == {"estimate", "test"}


def test_too_many_failures_abort():
    vanishing = MissingnessSpec(monotone_mode=FollowupMode.NONINFORMATIVE_MIXTURE, mixture_weight=1.0,
                                mixture_first=(0.0, 0.1))
    config = ScenarioConfig((GroupSpec("a", 10, missing=vanishing), GroupSpec("b", 10, missing=vanishing)),
                            grid=TimeGrid(120.0, 2.0), seed=1)
    with pytest.raises(ReplicationError):
        run_replications(config, reps=3, ranges=PARTITION, B=0, progress=False)


def test_reps_must_be_positive():
    with pytest.raises(ValueError):
        run_replications(gentle_scenario(), reps=0, ranges=PARTITION, progress=False)


# ==================== shipped profiles (slow) ====================

def _rows(summary, group, method):
    rows = summary[(summary['group'] == group) & (summary['method'] == method)]
    return rows.set_index('range')


def _naive_shift(summary, group):
    """Naive minus oracle average, per range"""
    return _rows(summary, group, "naive")['avg_est'] - _rows(summary, group, "oracle")['avg_est']


@pytest.fixture(scope="module")
def informative_point_estimates():
    config = ScenarioProfile("informative").to_scenario_config()
    return run_replications(config, reps=200, ranges=PARTITION, B=0, progress=False)


@pytest.fixture(scope="module")
def informative_inference():
    config = ScenarioProfile("informative").to_scenario_config()
    return run_replications(config, reps=200, ranges=PARTITION, B=100, progress=False)


@pytest.mark.slow
def test_informative_bias_pattern(informative_point_estimates):
    summary = informative_point_estimates.summary
    assert informative_point_estimates.failed <= 2
    for group, limit in (("group1", 0.08), ("group2", 0.08), ("group3", 0.15)):
        proposed = _rows(summary, group, "proposed")
        assert (proposed['rel_bias'] <= limit).all(), proposed
        naive = _rows(summary, group, "naive")
        assert naive.loc["<70", 'rel_bias'] >= 0.15
        assert naive.loc["70-180", 'rel_bias'] >= 0.05

    # short stays see the admission trough in groups 1 and 3, the early peak in group 2
    for group in ("group1", "group3"):
        shift = _naive_shift(summary, group)
        assert shift["<70"] > 0 and shift["70-180"] > 0 and shift[">180"] < 0
    shift = _naive_shift(summary, "group2")
    assert shift["<70"] < 0 and shift["70-180"] < 0 and shift[">180"] > 0


@pytest.mark.slow
def test_informative_standard_errors_and_tests(informative_inference):
    summary, tests = informative_inference.summary, informative_inference.tests
    proposed = summary[summary['method'] == "proposed"]
    ratio = proposed['esd'] / proposed['bse']
    assert ratio.between(0.8, 1.2).all(), proposed

    size = tests[(tests['comparison'] == "size") & (tests['method'] == "proposed")]
    assert size['rejection_rate'].between(0.02, 0.10).all(), size

    power = tests[(tests['comparison'] == "power") & (tests['range'] == "70-180")].set_index('method')
    assert power.loc["proposed", 'rejection_rate'] >= 2.0 * power.loc["naive", 'rejection_rate']


@pytest.mark.slow
def test_misspecified_followup_model_stays_close():
    config = ScenarioProfile("sensitivity_p1").to_scenario_config()
    report = run_replications(config, reps=200, ranges=PARTITION, B=100, progress=False)
    summary = report.summary
    in_range = summary[summary['range'] == "70-180"]
    assert (in_range.loc[in_range['method'] == "proposed", 'rel_bias'] <= 0.05).all()
    assert in_range.loc[in_range['method'] == "naive", 'rel_bias'].max() >= 0.05
    size = report.tests[(report.tests['comparison'] == "size") & (report.tests['method'] == "proposed")]
    assert size['rejection_rate'].between(0.02, 0.10).all(), size
