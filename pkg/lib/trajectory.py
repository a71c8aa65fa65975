"""
Glucose Trajectory Data Model

Time grids, target glycemic ranges, per-subject trajectories with their
availability masks, covariate processes, and cohorts of aligned subjects.
Every container is immutable once built; arrays are stored read-only.
"""

import math
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.errors import GridMismatchError

logger = logging.getLogger("Trajectory")

MINUTES_PER_DAY = 1440.0
GLUCOSE_SCALE = 100.0  # prev-day mean is reported in units of 100 mg/dL


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeGrid:
    """Equally spaced sensor grid 0 = t_1 < ... < t_K = tau (minutes)"""
    step_minutes: float = 5.0
    tau_days: float = 7.0

    def __post_init__(self):
        if not (self.step_minutes > 0 and math.isfinite(self.step_minutes)):
            raise ValueError(f"step_minutes must be positive, got {self.step_minutes}")
        if not (self.tau_days > 0 and math.isfinite(self.tau_days)):
            raise ValueError(f"tau_days must be positive, got {self.tau_days}")
        intervals = self.horizon_minutes / self.step_minutes
        if abs(intervals - round(intervals)) > 1e-9 * max(1.0, intervals):
            raise ValueError(
                f"horizon of {self.tau_days} days is not a multiple of {self.step_minutes} minutes")

    @property
    def horizon_minutes(self) -> float:
        return self.tau_days * MINUTES_PER_DAY

    @property
    def size(self) -> int:
        """Number of grid points K"""
        return int(math.floor(self.horizon_minutes / self.step_minutes + 1e-9)) + 1

    @cached_property
    def points(self) -> np.ndarray:
        """Grid times in minutes"""
        return _frozen(np.arange(self.size, dtype=float) * self.step_minutes)

    @cached_property
    def points_days(self) -> np.ndarray:
        """Grid times in days"""
        return _frozen(self.points / MINUTES_PER_DAY)

    @property
    def points_per_day(self) -> int:
        return int(round(MINUTES_PER_DAY / self.step_minutes))

    def interval_index(self, minutes: Union[float, np.ndarray]) -> np.ndarray:
        """Index j of the left-closed interval [t_j, t_{j+1}) holding each time"""
        return np.floor(np.asarray(minutes, dtype=float) / self.step_minutes + 1e-9).astype(np.int64)

    def left_limit_index(self, days: Union[float, np.ndarray]) -> np.ndarray:
        """
        Index of the grid value in force just before each time.

        For a right-continuous piecewise-constant process the left limit at
        u in (t_j, t_{j+1}] is the value at t_j.
        """
        steps = np.asarray(days, dtype=float) * MINUTES_PER_DAY / self.step_minutes
        index = np.ceil(steps - 1e-9).astype(np.int64) - 1
        return np.clip(index, 0, self.size - 1)

    def index_of(self, minutes: float) -> int:
        """Index of a time that must sit on the grid"""
        index = int(round(minutes / self.step_minutes))
        if index < 0 or index >= self.size or abs(index * self.step_minutes - minutes) > 1e-6:
            raise ValueError(f"{minutes} min is not a point of the grid")
        return index

    def truncate(self, tau_days: float) -> 'TimeGrid':
        """Same spacing over a shorter horizon"""
        if tau_days > self.tau_days + 1e-12:
            raise ValueError(f"cannot extend grid from {self.tau_days} to {tau_days} days")
        return TimeGrid(self.step_minutes, tau_days)


@dataclass(frozen=True)
class TargetRange:
    """Glycemic interval G with explicit boundary inclusion"""
    lower: float
    upper: float
    lower_inclusive: bool = True
    upper_inclusive: bool = True
    name: Optional[str] = None

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"range lower bound {self.lower} must be below upper bound {self.upper}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.interval_text

    @property
    def interval_text(self) -> str:
        left = '[' if self.lower_inclusive and math.isfinite(self.lower) else '('
        right = ']' if self.upper_inclusive and math.isfinite(self.upper) else ')'
        return f"{left}{_bound_text(self.lower)},{_bound_text(self.upper)}{right}"

    def contains(self, glucose: Union[float, np.ndarray]) -> np.ndarray:
        """Vectorized membership; NaN is never a member"""
        y = np.asarray(glucose, dtype=float)
        above = y >= self.lower if self.lower_inclusive else y > self.lower
        below = y <= self.upper if self.upper_inclusive else y < self.upper
        return above & below

    @classmethod
    def parse(cls, text: str, name: Optional[str] = None) -> 'TargetRange':
        """
        Parse interval notation such as "[70,180]", "(180,inf)" or "(0,70)"

        Args:
            text: interval string, brackets give inclusion
            name: optional display label

        Returns:
            TargetRange
        """
        text = text.strip()
        if len(text) < 5 or text[0] not in '[(' or text[-1] not in '])' or ',' not in text:
            raise ValueError(f"Invalid range '{text}', expected e.g. [70,180] or (180,inf)")
        low_text, high_text = text[1:-1].split(',', 1)
        return cls(lower=_parse_bound(low_text), upper=_parse_bound(high_text),
                   lower_inclusive=text[0] == '[', upper_inclusive=text[-1] == ']', name=name)

    def to_dict(self) -> Dict:
        return {
            'label': self.label,
            'lower': _bound_text(self.lower),
            'upper': _bound_text(self.upper),
            'lower_inclusive': self.lower_inclusive,
            'upper_inclusive': self.upper_inclusive,
        }


def _bound_text(value: float) -> str:
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f"{value:g}"


def _parse_bound(text: str) -> float:
    text = text.strip().lower()
    if text in ('inf', '+inf', 'infinity'):
        return math.inf
    if text in ('-inf', '-infinity'):
        return -math.inf
    return float(text)


# The hypoglycemia range is open below so the three-way split covers every finite value
HYPO = TargetRange(-math.inf, 70.0, False, False, name="<70")
IN_RANGE = TargetRange(70.0, 180.0, True, True, name="70-180")
TIGHT_RANGE = TargetRange(70.0, 140.0, True, True, name="70-140")
HYPER = TargetRange(180.0, math.inf, False, False, name=">180")
ABOVE_140 = TargetRange(140.0, math.inf, False, False, name=">140")
ABOVE_250 = TargetRange(250.0, math.inf, False, False, name=">250")

RANGE_PRESETS: Dict[str, Tuple[TargetRange, ...]] = {
    'consensus6': (IN_RANGE, TIGHT_RANGE, HYPER, ABOVE_140, ABOVE_250, HYPO),
    'partition3': (HYPO, IN_RANGE, HYPER),
}

TAU_PRESETS: Dict[str, Tuple[float, ...]] = {
    'horizons5': (1.0, 3.0, 5.0, 7.0, 9.0),
}

# alternate names for the default presets
PRESET_ALIASES = {'paper6': 'consensus6', 'paper5': 'horizons5'}


def resolve_ranges(specs: Sequence[str]) -> List[TargetRange]:
    """Expand preset names and interval strings into TargetRanges"""
    ranges: List[TargetRange] = []
    for spec in specs:
        spec = PRESET_ALIASES.get(spec, spec)
        if spec in RANGE_PRESETS:
            ranges.extend(RANGE_PRESETS[spec])
        else:
            ranges.append(TargetRange.parse(spec))
    if not ranges:
        raise ValueError("At least one target range is required")
    labels = [r.label for r in ranges]
    if len(set(labels)) != len(labels):
        raise ValueError(f"Duplicate target ranges: {labels}")
    return ranges


def resolve_taus(specs: Sequence[Union[str, float]]) -> List[float]:
    """Expand tau presets; every tau must be positive"""
    taus: List[float] = []
    for spec in specs:
        if isinstance(spec, str):
            spec = PRESET_ALIASES.get(spec, spec)
        if isinstance(spec, str) and spec in TAU_PRESETS:
            taus.extend(TAU_PRESETS[spec])
        else:
            taus.append(float(spec))
    if not taus or any(t <= 0 for t in taus):
        raise ValueError(f"tau_days must be positive, got {taus}")
    return taus


def in_range(y: float, target: TargetRange) -> int:
    """Indicator I(y in G) for one finite glucose value"""
    if not math.isfinite(y):
        raise ValueError(f"glucose value must be finite, got {y}")
    return int(bool(target.contains(y)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One subject's glucose path on the grid with its availability"""
    subject_id: str
    grid: TimeGrid
    glucose: np.ndarray
    intermittent_mask: np.ndarray
    followup_days: float
    availability: np.ndarray = field(init=False)

    def __post_init__(self):
        k = self.grid.size
        glucose = np.asarray(self.glucose, dtype=float)
        mask = np.asarray(self.intermittent_mask).astype(bool)
        if glucose.shape != (k,) or mask.shape != (k,):
            raise ValueError(f"Subject {self.subject_id}: arrays must have length {k}")
        if not (self.followup_days > 0):
            raise ValueError(f"Subject {self.subject_id}: follow-up must be positive")
        available = mask & (self.grid.points_days <= self.followup_days)
        if not np.all(np.isfinite(glucose[available])):
            raise ValueError(f"Subject {self.subject_id}: glucose undefined at an available point")
        object.__setattr__(self, 'subject_id', str(self.subject_id))
        object.__setattr__(self, 'followup_days', float(self.followup_days))
        object.__setattr__(self, 'glucose', _frozen(glucose))
        object.__setattr__(self, 'intermittent_mask', _frozen(mask))
        object.__setattr__(self, 'availability', _frozen(available))

    @property
    def followup_minutes(self) -> float:
        return self.followup_days * MINUTES_PER_DAY

    @property
    def is_complete(self) -> bool:
        return bool(self.availability.all())

    @classmethod
    def complete(cls, subject_id: str, grid: TimeGrid, glucose: np.ndarray) -> 'Trajectory':
        """Fully observed path: no gaps, follow-up equal to the horizon"""
        return cls(subject_id, grid, glucose, np.ones(grid.size, dtype=bool), grid.tau_days)

    def truncate(self, grid: TimeGrid) -> 'Trajectory':
        k = grid.size
        return Trajectory(self.subject_id, grid, self.glucose[:k], self.intermittent_mask[:k],
                          self.followup_days)


@dataclass(frozen=True, eq=False)
class CovariateProcess:
    """Z_i(t_j) for one subject, piecewise constant between grid points"""
    subject_id: str
    grid: TimeGrid
    values: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != self.grid.size or values.shape[1] < 1:
            raise ValueError(
                f"Subject {self.subject_id}: covariates must be shaped ({self.grid.size}, p)")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"Subject {self.subject_id}: covariates must be finite")
        names = tuple(self.names) or tuple(f"z{i + 1}" for i in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise ValueError(f"Subject {self.subject_id}: {len(names)} names for {values.shape[1]} covariates")
        object.__setattr__(self, 'subject_id', str(self.subject_id))
        object.__setattr__(self, 'values', _frozen(values))
        object.__setattr__(self, 'names', names)

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def truncate(self, grid: TimeGrid) -> 'CovariateProcess':
        return CovariateProcess(self.subject_id, grid, self.values[:grid.size], self.names)


@dataclass(frozen=True, eq=False)
class CohortPanel:
    """
    Array view of a cohort: one row per subject.

    Estimators and the bootstrap work on panels; resampling subjects with
    replacement is a row take and does not need unique subject ids.
    """
    grid: TimeGrid
    subject_ids: Tuple[str, ...]
    glucose: np.ndarray            # (n, K), NaN where unavailable
    availability: np.ndarray       # (n, K) bool
    followup_days: np.ndarray      # (n,)
    covariates: Optional[np.ndarray] = None   # (n, K, p)
    covariate_names: Tuple[str, ...] = ()
    group_label: str = "cohort"

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    def take(self, indices: np.ndarray) -> 'CohortPanel':
        indices = np.asarray(indices, dtype=np.int64)
        return CohortPanel(
            grid=self.grid,
            subject_ids=tuple(self.subject_ids[i] for i in indices),
            glucose=self.glucose[indices],
            availability=self.availability[indices],
            followup_days=self.followup_days[indices],
            covariates=None if self.covariates is None else self.covariates[indices],
            covariate_names=self.covariate_names,
            group_label=self.group_label,
        )

    def truncate(self, tau_days: float) -> 'CohortPanel':
        grid = self.grid.truncate(tau_days)
        k = grid.size
        return CohortPanel(
            grid=grid,
            subject_ids=self.subject_ids,
            glucose=self.glucose[:, :k],
            availability=self.availability[:, :k],
            followup_days=self.followup_days,
            covariates=None if self.covariates is None else self.covariates[:, :k],
            covariate_names=self.covariate_names,
            group_label=self.group_label,
        )


@dataclass(frozen=True, eq=False)
class Cohort:
    """Subjects sharing one grid, with optional aligned covariate processes"""
    trajectories: Tuple[Trajectory, ...]
    covariates: Optional[Tuple[CovariateProcess, ...]] = None
    group_label: str = "cohort"

    def __post_init__(self):
        trajectories = tuple(self.trajectories)
        if not trajectories:
            raise ValueError("A cohort needs at least one subject")
        grid = trajectories[0].grid
        for traj in trajectories:
            if traj.grid != grid:
                raise GridMismatchError(
                    f"Subject {traj.subject_id} is on grid {traj.grid}, cohort uses {grid}")
        ids = [traj.subject_id for traj in trajectories]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Cohort '{self.group_label}' has duplicate subject ids")
        object.__setattr__(self, 'trajectories', trajectories)
        if self.covariates is not None:
            covariates = tuple(self.covariates)
            if [c.subject_id for c in covariates] != ids:
                raise ValueError("Covariate processes must align one-to-one with trajectories")
            names = covariates[0].names
            for cov in covariates:
                if cov.grid != grid:
                    raise GridMismatchError(f"Covariates of {cov.subject_id} are on a different grid")
                if cov.names != names:
                    raise ValueError("Covariate dimension/names must be constant across subjects")
            object.__setattr__(self, 'covariates', covariates)

    @property
    def grid(self) -> TimeGrid:
        return self.trajectories[0].grid

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def subject_ids(self) -> List[str]:
        return [traj.subject_id for traj in self.trajectories]

    @property
    def is_complete(self) -> bool:
        return all(traj.is_complete for traj in self.trajectories)

    @cached_property
    def panel(self) -> CohortPanel:
        covariates = None
        names: Tuple[str, ...] = ()
        if self.covariates is not None:
            covariates = _frozen(np.stack([c.values for c in self.covariates]))
            names = self.covariates[0].names
        glucose = np.stack([t.glucose for t in self.trajectories])
        availability = np.stack([t.availability for t in self.trajectories])
        return CohortPanel(
            grid=self.grid,
            subject_ids=tuple(self.subject_ids),
            glucose=_frozen(np.where(availability, glucose, np.nan)),
            availability=_frozen(availability),
            followup_days=_frozen(np.array([t.followup_days for t in self.trajectories])),
            covariates=covariates,
            covariate_names=names,
            group_label=self.group_label,
        )

    def with_covariates(self, covariates: Sequence[CovariateProcess]) -> 'Cohort':
        return Cohort(self.trajectories, tuple(covariates), self.group_label)

    def relabel(self, group_label: str) -> 'Cohort':
        return Cohort(self.trajectories, self.covariates, group_label)

    def truncate(self, tau_days: float) -> 'Cohort':
        """Restrict every subject to [0, tau_days] on the same spacing"""
        grid = self.grid.truncate(tau_days)
        if grid == self.grid:
            return self
        trajectories = tuple(t.truncate(grid) for t in self.trajectories)
        covariates = None
        if self.covariates is not None:
            covariates = tuple(c.truncate(grid) for c in self.covariates)
        return Cohort(trajectories, covariates, self.group_label)


CohortLike = Union[Cohort, CohortPanel]


def as_panel(cohort: CohortLike) -> CohortPanel:
    return cohort.panel if isinstance(cohort, Cohort) else cohort


def prev_day_mean_path(glucose: np.ndarray, availability: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """
    Previous-day mean glucose / 100 at every grid point.

    Works on a single path (K,) or a stack (n, K). The window for t_m is
    [t_m - 1 day, t_m); the value is 0 during the first day and carries the
    last defined value forward when the window holds no available reading.
    """
    single = np.ndim(glucose) == 1
    glucose = np.atleast_2d(np.asarray(glucose, dtype=float))
    available = np.atleast_2d(np.asarray(availability, dtype=bool))
    n, k = glucose.shape
    window = grid.points_per_day

    values = np.where(available, glucose, 0.0)
    csum = np.zeros((n, k + 1))
    np.cumsum(values, axis=1, out=csum[:, 1:])
    ccount = np.zeros((n, k + 1), dtype=np.int64)
    np.cumsum(available, axis=1, out=ccount[:, 1:])

    result = np.zeros((n, k))
    defined = np.ones((n, k), dtype=bool)
    if k > window:
        stop = np.arange(window, k)
        sums = csum[:, stop] - csum[:, stop - window]
        counts = ccount[:, stop] - ccount[:, stop - window]
        with np.errstate(invalid='ignore', divide='ignore'):
            result[:, window:] = sums / counts / GLUCOSE_SCALE
        defined[:, window:] = counts > 0

    # carry the most recent defined value forward
    last = np.where(defined, np.arange(k)[None, :], 0)
    np.maximum.accumulate(last, axis=1, out=last)
    result = np.take_along_axis(result, last, axis=1)

    if single:
        return result[0]
    return result


def history_covariate_prev_day_mean(traj: Trajectory, t: float) -> float:
    """Z1(t) of one subject at grid time t (minutes)"""
    index = traj.grid.index_of(t)
    path = prev_day_mean_path(traj.glucose, traj.availability, traj.grid)
    return float(np.ravel(path)[index])


ExternalCovariates = Dict[str, Tuple[Tuple[str, ...], np.ndarray]]


def build_covariates(cohort: Cohort, external: Optional[ExternalCovariates] = None,
                     history: bool = True) -> Cohort:
    """
    Attach covariate processes to a cohort

    Args:
        cohort: cohort of observed trajectories
        external: subject_id -> (names, (K, q) values) carried on the grid
        history: include the prev-day-mean glucose covariate computed
            from available readings

    Returns:
        Cohort with covariates set
    """
    if not history and not external:
        raise ValueError("No covariates requested")
    processes = []
    for traj in cohort.trajectories:
        columns = []
        names: List[str] = []
        if history:
            columns.append(np.ravel(prev_day_mean_path(traj.glucose, traj.availability, traj.grid)))
            names.append("prev_day_mean")
        if external:
            if traj.subject_id not in external:
                raise ValueError(f"No external covariates for subject {traj.subject_id}")
            ext_names, ext_values = external[traj.subject_id]
            ext_values = np.asarray(ext_values, dtype=float).reshape(traj.grid.size, -1)
            columns.extend(ext_values.T)
            names.extend(ext_names)
        processes.append(CovariateProcess(traj.subject_id, traj.grid, np.column_stack(columns), tuple(names)))
    logger.debug(f"[Trajectory] Built covariates {processes[0].names} for {cohort.n} subjects")
    return cohort.with_covariates(processes)
