"""
Synthetic Glucose Trajectory Simulator

Gaussian-process glucose paths with a daily-periodic covariance,
intermittent sensor gaps, and monitoring follow-up durations that are
either unrelated to glucose (mixture / empirical), driven by glucose
history through a Cox model, or drawn from a transformation model.
"""

import math
import logging
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from lib.errors import SimulationError
from lib.trajectory import (
    MINUTES_PER_DAY, TimeGrid, Trajectory, prev_day_mean_path,
)

logger = logging.getLogger("Simulator")

MAX_JITTER = 1e-4


class FollowupMode(Enum):
    """How the monitoring end time C is generated"""
    NONINFORMATIVE_EMPIRICAL = "noninformative_empirical"   # resample tabulated durations
    NONINFORMATIVE_MIXTURE = "noninformative_mixture"       # 0.8 Unif(0,2) + 0.2 Unif(2,9) days
    COX_INFORMATIVE = "cox_informative"                     # hazard driven by glucose history
    TRANSFORMATION_SENSITIVITY = "transformation_sensitivity"  # C = s exp(-zeta + eps)


@dataclass(frozen=True)
class KernelSpec:
    """Periodic kernel sigma^2 exp(-(2/l^2) sin^2(pi |t - t'| / p))"""
    sigma: float = 62.0          # mg/dL
    length_scale: float = 1.0
    period: float = 1440.0       # minutes
    jitter: float = 1e-8         # relative to sigma^2

    def __post_init__(self):
        for name in ('sigma', 'length_scale', 'period', 'jitter'):
            if not getattr(self, name) > 0:
                raise ValueError(f"KernelSpec.{name} must be positive")

    def covariance(self, t: np.ndarray, t_prime: np.ndarray) -> np.ndarray:
        lag = np.abs(np.subtract.outer(np.asarray(t, dtype=float), np.asarray(t_prime, dtype=float)))
        phase = np.sin(np.pi * lag / self.period)
        return self.sigma ** 2 * np.exp(-2.0 / self.length_scale ** 2 * phase ** 2)


@dataclass(frozen=True)
class MeanFunction:
    """
    Glucose mean over time (mg/dL).

    Parametric form: baseline + decay * exp(-decay_rate * days)
    + amplitude * sin(2 pi minutes / 1440 + phase). When table_minutes is
    given the tabulated values are interpolated instead.

    The defaults settle at 160 mg/dL with admission at the daily trough,
    so the first hours of monitoring run lower than the week average.
    """
    baseline: float = 160.0
    decay: float = 20.0
    decay_rate: float = 1.5      # per day
    amplitude: float = 90.0
    phase: float = -np.pi / 2.0  # radians, trough at t = 0
    table_minutes: Tuple[float, ...] = ()
    table_values: Tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.table_minutes) != len(self.table_values):
            raise ValueError("Tabulated mean needs as many values as times")
        if self.table_minutes and np.any(np.diff(self.table_minutes) <= 0):
            raise ValueError("Tabulated mean times must increase")

    def values(self, grid: TimeGrid) -> np.ndarray:
        minutes = grid.points
        if self.table_minutes:
            out = np.interp(minutes, self.table_minutes, self.table_values)
        else:
            days = minutes / MINUTES_PER_DAY
            out = (self.baseline + self.decay * np.exp(-self.decay_rate * days)
                   + self.amplitude * np.sin(2.0 * np.pi * minutes / MINUTES_PER_DAY + self.phase))
        if not np.all(np.isfinite(out)):
            raise SimulationError("Mean function is not finite on the grid", stage="simulate")
        return out


@dataclass(frozen=True)
class BaselineHazard:
    """lambda0(t) = rate * t^(-exponent), t in days"""
    rate: float = 0.25
    exponent: float = 0.75

    def __post_init__(self):
        if not self.rate > 0 or not 0 <= self.exponent < 1:
            raise ValueError("Baseline hazard needs rate > 0 and exponent in [0, 1)")

    def cumulative(self, days) -> np.ndarray:
        days = np.maximum(np.asarray(days, dtype=float), 0.0)
        return self.rate / (1.0 - self.exponent) * days ** (1.0 - self.exponent)

    def inverse(self, value) -> np.ndarray:
        value = np.maximum(np.asarray(value, dtype=float), 0.0)
        return ((1.0 - self.exponent) * value / self.rate) ** (1.0 / (1.0 - self.exponent))


@dataclass(frozen=True)
class MissingnessSpec:
    """Intermittent gaps plus the follow-up model"""
    intermittent_start_scale: float = 3424.0   # minutes, exponential scale
    gap_low: float = 10.0                      # minutes
    gap_high: float = 70.0                     # minutes
    monotone_mode: FollowupMode = FollowupMode.COX_INFORMATIVE
    # cox_informative
    baseline_hazard: BaselineHazard = BaselineHazard()
    beta: Tuple[float, float] = (2.0, 2.0)
    history_reference_mgdl: float = 0.0
    # noninformative
    mixture_weight: float = 0.8
    mixture_first: Tuple[float, float] = (0.0, 2.0)     # days
    mixture_second: Tuple[float, float] = (2.0, 9.0)    # days
    empirical_durations: Tuple[float, ...] = ()         # days
    # transformation_sensitivity
    transformation_scale: float = 8.0                   # days
    transformation_p: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'monotone_mode', FollowupMode(self.monotone_mode))
        if not self.intermittent_start_scale > 0:
            raise ValueError("intermittent_start_scale must be positive")
        if not 0 < self.gap_low < self.gap_high:
            raise ValueError("Gap durations need 0 < gap_low < gap_high")
        if len(self.beta) != 2:
            raise ValueError("beta holds the history and Z2 coefficients")
        if not 0 <= self.transformation_p <= 1:
            raise ValueError("transformation_p must lie in [0, 1]")
        if self.monotone_mode is FollowupMode.NONINFORMATIVE_EMPIRICAL and not self.empirical_durations:
            raise ValueError("Empirical follow-up mode needs empirical_durations")


@lru_cache(maxsize=8)
def kernel_cholesky(kernel: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """
    Lower Cholesky factor of the kernel matrix on the grid.

    The periodic kernel matrix is rank deficient over several days, so a
    diagonal jitter (relative to sigma^2) is added and escalated x10 up to
    MAX_JITTER until the factorization succeeds.
    """
    points = grid.points
    matrix = kernel.covariance(points, points)
    jitter = kernel.jitter
    while jitter <= MAX_JITTER * (1 + 1e-12):
        try:
            factor = linalg.cholesky(matrix + jitter * kernel.sigma ** 2 * np.eye(points.size),
                                     lower=True, check_finite=False)
            if jitter > kernel.jitter:
                logger.debug(f"[Simulator] Cholesky needed jitter {jitter:g}")
            factor.setflags(write=False)
            return factor
        except linalg.LinAlgError:
            jitter *= 10.0
    raise SimulationError(f"Kernel matrix is not positive definite even with jitter {MAX_JITTER:g}",
                          stage="simulate")


def sample_gp_paths(mean_values: np.ndarray, kernel: KernelSpec, grid: TimeGrid,
                    normals: np.ndarray) -> np.ndarray:
    """mean + L z for each row z of standard normals, shape (n, K)"""
    factor = kernel_cholesky(kernel, grid)
    normals = np.atleast_2d(normals)
    return mean_values[None, :] + normals @ factor.T


def sample_gp_trajectory(mean: MeanFunction, kernel: KernelSpec, grid: TimeGrid,
                         rng: np.random.Generator, subject_id: str = "sim-0") -> Trajectory:
    """One complete glucose path from GP(mean, k)"""
    normals = rng.standard_normal(grid.size)
    path = sample_gp_paths(mean.values(grid), kernel, grid, normals)[0]
    return Trajectory.complete(subject_id, grid, path)


def intermittent_gaps(spec: MissingnessSpec, horizon_minutes: float,
                      rng: np.random.Generator) -> List[Tuple[float, float]]:
    """Renewal sequence of [start, end) gaps covering the horizon"""
    gaps = []
    position = 0.0
    while True:
        start = position + rng.exponential(spec.intermittent_start_scale)
        if start >= horizon_minutes:
            break
        end = start + rng.uniform(spec.gap_low, spec.gap_high)
        gaps.append((start, end))
        position = end
    return gaps


def mask_gaps(grid: TimeGrid, gaps: Sequence[Tuple[float, float]]) -> np.ndarray:
    """delta* over the grid: 0 on every interval [t_j, t_j+1) meeting a gap"""
    mask = np.ones(grid.size, dtype=bool)
    step = grid.step_minutes
    for start, end in gaps:
        first = int(math.floor(start / step))
        last = int(math.ceil(end / step)) - 1
        if first >= grid.size:
            continue
        mask[max(first, 0):min(last, grid.size - 1) + 1] = False
    return mask


def inject_intermittent(traj: Trajectory, spec: MissingnessSpec,
                        rng: np.random.Generator) -> Trajectory:
    gaps = intermittent_gaps(spec, traj.grid.horizon_minutes, rng)
    mask = np.asarray(traj.intermittent_mask) & mask_gaps(traj.grid, gaps)
    return Trajectory(traj.subject_id, traj.grid, traj.glucose, mask, traj.followup_days)


def cox_followup_days(history: np.ndarray, z2: np.ndarray, grid: TimeGrid,
                      baseline: BaselineHazard, beta: Sequence[float], exposures: np.ndarray,
                      history_reference_mgdl: float = 0.0,
                      min_followup_days: float = 0.0) -> np.ndarray:
    """
    Invert the cumulative hazard of the Cox follow-up model

    The covariate (history, z2) at t_m holds on (t_m, t_m+1]; inside an
    interval the baseline is integrated exactly. After the first day the
    history covariate is measured from history_reference_mgdl / 100.
    Follow-up conditional on exceeding min_followup_days is drawn by
    adding the cumulative hazard at that time to the exposure.

    Args:
        history: (n, K) prev-day-mean covariate paths
        z2: (n,) time-constant covariate
        grid: simulation grid
        baseline: lambda0 family
        beta: (history, z2) coefficients
        exposures: (n,) unit exponential draws
        history_reference_mgdl: reference level subtracted after day one
        min_followup_days: conditioning threshold

    Returns:
        (n,) follow-up durations in days, tau + one step when no crossing
    """
    history = np.atleast_2d(history)
    days = grid.points_days
    in_first_day = days[:-1] < 1.0
    centered = history[:, :-1] - np.where(in_first_day, 0.0, history_reference_mgdl / 100.0)[None, :]
    multiplier = np.exp(beta[0] * centered + beta[1] * np.asarray(z2, dtype=float)[:, None])
    base = baseline.cumulative(days)
    increments = multiplier * np.diff(base)[None, :]
    cumulative = np.cumsum(increments, axis=1)
    before = np.concatenate((np.zeros((history.shape[0], 1)), cumulative[:, :-1]), axis=1)

    target = np.asarray(exposures, dtype=float).copy()
    if min_followup_days > 0:
        m0 = min(int(np.floor(min_followup_days / days[1] + 1e-9)), days.size - 2)
        offset = before[:, m0] + multiplier[:, m0] * (baseline.cumulative(min_followup_days) - base[m0])
        target = target + offset

    crossed = cumulative >= target[:, None]
    hit = crossed.any(axis=1)
    interval = np.argmax(crossed, axis=1)
    rows = np.arange(history.shape[0])
    remaining = target - before[rows, interval]
    solved = baseline.inverse(base[interval] + remaining / multiplier[rows, interval])
    solved = np.clip(solved, days[interval], days[interval + 1])
    cap = grid.tau_days + grid.step_minutes / MINUTES_PER_DAY
    return np.where(hit, solved, cap)


def sample_C_cox(traj: Trajectory, baseline: BaselineHazard, beta: Sequence[float],
                 rng: np.random.Generator, z2: Optional[float] = None,
                 history_reference_mgdl: float = 0.0, min_followup_days: float = 0.0) -> float:
    """Follow-up duration of one complete trajectory under the Cox model"""
    if not traj.is_complete:
        raise ValueError("Cox follow-up needs the complete glucose history")
    if z2 is None:
        z2 = rng.uniform(-0.5, 0.5)
    history = prev_day_mean_path(traj.glucose, traj.availability, traj.grid)
    exposure = rng.exponential()
    return float(cox_followup_days(history[None, :], np.array([z2]), traj.grid, baseline, beta,
                                   np.array([exposure]), history_reference_mgdl, min_followup_days)[0])


def sample_C_noninformative(rng: np.random.Generator, mode: str = "mixture",
                            durations: Sequence[float] = (), weight: float = 0.8,
                            first: Tuple[float, float] = (0.0, 2.0),
                            second: Tuple[float, float] = (2.0, 9.0)) -> float:
    """Follow-up unrelated to glucose, in days"""
    if mode == "empirical":
        if not durations:
            raise ValueError("Empirical follow-up sampling needs durations")
        return float(durations[rng.integers(0, len(durations))])
    if mode != "mixture":
        raise ValueError(f"Unknown non-informative mode '{mode}'")
    low, high = first if rng.random() < weight else second
    return float(rng.uniform(low, high))


def sample_C_transformation(zeta: float, s: float, p_mix: float, rng: np.random.Generator) -> float:
    """
    C = s exp(-zeta + eps), eps ~ p Logistic + (1 - p) min-extreme-value

    The logistic branch gives a proportional-odds model; the extreme-value
    branch (log of a unit exponential) gives a Cox model in zeta.
    """
    if not s > 0:
        raise ValueError("Transformation scale s must be positive")
    use_logistic = rng.random() < p_mix
    logistic = rng.logistic()
    extreme = math.log(max(rng.exponential(), 1e-300))
    eps = logistic if use_logistic else extreme
    return float(s * math.exp(-zeta + eps))
