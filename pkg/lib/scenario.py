"""
Simulation Scenarios

A scenario is a set of groups, each with a glucose mean function and a
missingness model, drawn on one grid with one kernel. Generation emits the
masked cohort the estimators see, the complete cohort the oracle sees,
and optionally the ground-truth mean TIR from a separate large sample.
Follow-up is drawn conditional on lasting at least the minimum follow-up,
and gaps conditional on leaving one reading before it ends.

Random streams: subject i of group g draws from default_rng([seed, g, i])
(or [seed, replicate, g, i] inside a Monte Carlo replicate); the ground
truth uses [seed, TRUTH_STREAM, g, i]. Outputs do not depend on how
subjects are scheduled.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from lib.errors import SimulationError
from lib.glucose_simulator import (
    FollowupMode, KernelSpec, MeanFunction, MissingnessSpec, cox_followup_days,
    intermittent_gaps, mask_gaps, sample_C_noninformative, sample_C_transformation,
    sample_gp_paths,
)
from lib.trajectory import (
    Cohort, TargetRange, TimeGrid, Trajectory, build_covariates, prev_day_mean_path,
    RANGE_PRESETS,
)

logger = logging.getLogger("Scenario")

TRUTH_STREAM = 2 ** 31 - 1
TRUTH_CHUNK = 1000
MAX_REDRAWS = 10000


@dataclass(frozen=True)
class GroupSpec:
    label: str
    n: int
    mean: MeanFunction = MeanFunction()
    missing: MissingnessSpec = MissingnessSpec()
    zeta_shift: float = 0.0      # mean shift per unit of zeta (sensitivity design)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"Group {self.label} needs n >= 1")


@dataclass(frozen=True)
class ScenarioConfig:
    groups: Tuple[GroupSpec, ...]
    kernel: KernelSpec = KernelSpec()
    grid: TimeGrid = TimeGrid(5.0, 7.0)
    seed: int = 0
    ground_truth_mu: Optional[Dict[str, Dict[str, float]]] = field(default=None, hash=False, compare=False)
    ground_truth_n: int = 10000
    min_followup_minutes: Optional[float] = None
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, 'groups', tuple(self.groups))
        labels = [g.label for g in self.groups]
        if not labels:
            raise ValueError("A scenario needs at least one group")
        if len(set(labels)) != len(labels):
            raise ValueError(f"Group labels must be unique, got {labels}")

    @property
    def labels(self) -> List[str]:
        return [g.label for g in self.groups]

    @property
    def min_followup_days(self) -> float:
        minutes = self.grid.step_minutes if self.min_followup_minutes is None else self.min_followup_minutes
        return minutes / 1440.0

    def with_overrides(self, seed: Optional[int] = None, n: Optional[int] = None,
                       ground_truth_n: Optional[int] = None) -> 'ScenarioConfig':
        config = self
        if seed is not None:
            config = replace(config, seed=int(seed))
        if n is not None:
            config = replace(config, groups=tuple(replace(g, n=int(n)) for g in config.groups))
        if ground_truth_n is not None:
            config = replace(config, ground_truth_n=int(ground_truth_n))
        return config


@dataclass(frozen=True, eq=False)
class GroupDraw:
    label: str
    masked: Cohort
    complete: Cohort
    z2: np.ndarray
    zeta: np.ndarray

    @property
    def external_names(self) -> Tuple[str, ...]:
        return external_covariate_names(self.masked)

    def availability_frame(self) -> pd.DataFrame:
        panel = self.masked.panel
        return pd.DataFrame({
            'time_minutes': panel.grid.points,
            'proportion_available': panel.availability.mean(axis=0),
        })


@dataclass(frozen=True, eq=False)
class ScenarioDraw:
    config: ScenarioConfig
    groups: Dict[str, GroupDraw]
    ground_truth: Optional[Dict[str, Dict[str, Dict[str, float]]]] = None


def external_covariate_names(cohort: Cohort) -> Tuple[str, ...]:
    if cohort.covariates is None:
        return ()
    return tuple(n for n in cohort.covariates[0].names if n != "prev_day_mean")


def _subject_rng(seed: int, group_index: int, subject: int, replicate: Optional[int]) -> np.random.Generator:
    if replicate is None:
        return np.random.default_rng([seed, group_index, subject])
    return np.random.default_rng([seed, replicate, group_index, subject])


def _draw_paths(group: GroupSpec, config: ScenarioConfig, rngs: Sequence[np.random.Generator]):
    """Normals, zeta and z2 per subject, then the GP paths in one product"""
    k = config.grid.size
    normals = np.empty((len(rngs), k))
    zeta = np.empty(len(rngs))
    z2 = np.empty(len(rngs))
    for i, rng in enumerate(rngs):
        normals[i] = rng.standard_normal(k)
        zeta[i] = float(rng.random() < 0.5)
        z2[i] = rng.uniform(-0.5, 0.5)
    mean = group.mean.values(config.grid)
    paths = sample_gp_paths(mean, config.kernel, config.grid, normals)
    paths = paths + group.zeta_shift * zeta[:, None]
    return paths, zeta, z2


def _followups(group: GroupSpec, config: ScenarioConfig, paths: np.ndarray, zeta: np.ndarray,
               z2: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    spec = group.missing
    grid = config.grid
    s_min = config.min_followup_days
    mode = spec.monotone_mode
    if mode is FollowupMode.COX_INFORMATIVE:
        history = prev_day_mean_path(paths, np.ones_like(paths, dtype=bool), grid)
        exposures = np.array([rng.exponential() for rng in rngs])
        return cox_followup_days(history, z2, grid, spec.baseline_hazard, spec.beta, exposures,
                                 spec.history_reference_mgdl, s_min)

    def draw(rng: np.random.Generator, i: int) -> float:
        if mode is FollowupMode.NONINFORMATIVE_MIXTURE:
            return sample_C_noninformative(rng, "mixture", weight=spec.mixture_weight,
                                           first=spec.mixture_first, second=spec.mixture_second)
        if mode is FollowupMode.NONINFORMATIVE_EMPIRICAL:
            return sample_C_noninformative(rng, "empirical", durations=spec.empirical_durations)
        return sample_C_transformation(zeta[i], spec.transformation_scale, spec.transformation_p, rng)

    out = np.empty(len(rngs))
    for i, rng in enumerate(rngs):
        # rejection sampling gives the law of C conditional on C >= s_min
        for _ in range(MAX_REDRAWS):
            c = draw(rng, i)
            if c >= s_min:
                break
        else:
            raise SimulationError(
                f"Group {group.label}: could not draw a follow-up of at least {s_min} days",
                stage="simulate")
        out[i] = c
    return out


def _subject_ids(label: str, n: int) -> List[str]:
    width = max(4, len(str(n - 1)))
    return [f"{label}-{i:0{width}d}" for i in range(n)]


def _observed_gaps(group: GroupSpec, grid: TimeGrid, followup_days: float,
                   rng: np.random.Generator) -> np.ndarray:
    """
    Gap mask conditional on at least one available left-endpoint reading.

    Gaps are independent of glucose, so redrawing them leaves the glucose
    law untouched.
    """
    window = grid.points_days[:-1] <= followup_days
    for _ in range(MAX_REDRAWS):
        mask = mask_gaps(grid, intermittent_gaps(group.missing, grid.horizon_minutes, rng))
        if np.any(mask[:-1] & window):
            return mask
    raise SimulationError(
        f"Group {group.label}: gaps cover every reading of a {followup_days:.4f} day follow-up",
        stage="simulate")


def generate_group(config: ScenarioConfig, group_index: int,
                   replicate: Optional[int] = None) -> GroupDraw:
    group = config.groups[group_index]
    grid = config.grid
    rngs = [_subject_rng(config.seed, group_index, i, replicate) for i in range(group.n)]
    paths, zeta, z2 = _draw_paths(group, config, rngs)

    followups = _followups(group, config, paths, zeta, z2, rngs)
    masks = [_observed_gaps(group, grid, followups[i], rng) for i, rng in enumerate(rngs)]

    ids = _subject_ids(group.label, group.n)
    masked = tuple(Trajectory(sid, grid, paths[i], masks[i], followups[i]) for i, sid in enumerate(ids))
    complete = tuple(Trajectory.complete(sid, grid, paths[i]) for i, sid in enumerate(ids))

    if group.missing.monotone_mode is FollowupMode.TRANSFORMATION_SENSITIVITY:
        external = {sid: (("zeta",), np.full(grid.size, zeta[i])) for i, sid in enumerate(ids)}
        history = False
    else:
        external = {sid: (("z2",), np.full(grid.size, z2[i])) for i, sid in enumerate(ids)}
        history = True
    masked_cohort = build_covariates(Cohort(masked, None, group.label), external, history=history)
    complete_cohort = Cohort(complete, None, group.label)
    return GroupDraw(group.label, masked_cohort, complete_cohort, z2, zeta)


def ground_truth_mu(config: ScenarioConfig, ranges: Sequence[TargetRange],
                    n: Optional[int] = None) -> Dict[str, Dict[str, Dict[str, float]]]:
    """
    Large-sample mean TIR per group and range with its Monte Carlo SE

    Returns:
        group label -> range label -> {'mu': ..., 'mc_se': ..., 'n': ...}
    """
    n = config.ground_truth_n if n is None else int(n)
    grid = config.grid
    truth = {}
    for g, group in enumerate(config.groups):
        per_subject = {r.label: [] for r in ranges}
        for start in range(0, n, TRUTH_CHUNK):
            stop = min(start + TRUTH_CHUNK, n)
            rngs = [np.random.default_rng([config.seed, TRUTH_STREAM, g, i]) for i in range(start, stop)]
            paths, _, _ = _draw_paths(group, config, rngs)
            for r in ranges:
                per_subject[r.label].append(np.mean(r.contains(paths[:, :-1]), axis=1))
        truth[group.label] = {}
        for r in ranges:
            values = np.concatenate(per_subject[r.label])
            truth[group.label][r.label] = {
                'mu': float(values.mean()),
                'mc_se': float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0,
                'n': int(values.size),
            }
        logger.info(f"[Scenario] Ground truth for {group.label} from {n} trajectories")
    return truth


def generate_scenario(config: ScenarioConfig, ranges: Optional[Sequence[TargetRange]] = None,
                      ground_truth: bool = True, replicate: Optional[int] = None) -> ScenarioDraw:
    """
    Draw every group of a scenario

    Args:
        config: scenario configuration
        ranges: ranges for the ground truth (default: the three-way partition)
        ground_truth: compute the large-sample truth unless config supplies it
        replicate: Monte Carlo replicate index folded into the random streams

    Returns:
        ScenarioDraw with masked and complete cohorts per group
    """
    groups = {}
    for g, group in enumerate(config.groups):
        groups[group.label] = generate_group(config, g, replicate)
        logger.debug(f"[Scenario] Drew {group.n} subjects for {group.label}")
    truth = None
    if config.ground_truth_mu is not None:
        truth = {label: {r: {'mu': float(v), 'mc_se': 0.0, 'n': 0} for r, v in values.items()}
                 for label, values in config.ground_truth_mu.items()}
    elif ground_truth:
        truth = ground_truth_mu(config, list(ranges or RANGE_PRESETS['partition3']))
    return ScenarioDraw(config, groups, truth)
