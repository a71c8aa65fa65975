"""
Mean Time-in-Range Estimators

Subject-level TIR, and cohort mean TIR by four methods:

    oracle      complete data only
    naive       per-subject TIR over available readings, averaged
    proposed    inverse-probability weighted p_G(t) with Cox (or KM) weights
    simplified  proposed with unit weights

Every integral over [0, tau] is a left-endpoint sum over the K-1 grid
intervals, so the oracle equals a count-based TIR.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.errors import CoxFitError, MissingDataError, PositivityError, TirError
from lib.survival import CoxFit, SurvivalCurve, fit_cox, km_curve, survival_curves
from lib.trajectory import (
    CohortLike, CohortPanel, TargetRange, TimeGrid, Trajectory, as_panel,
)

logger = logging.getLogger("Estimator")

DEFAULT_WEIGHT_FLOOR = 0.01


class Method(Enum):
    ORACLE = "oracle"
    NAIVE = "naive"
    PROPOSED = "proposed"
    SIMPLIFIED = "simplified"


class WeightMode(Enum):
    COX = "cox"
    KM = "km"


@dataclass(frozen=True)
class EstimatorConfig:
    """How one mean-TIR estimate is computed"""
    method: Method = Method.PROPOSED
    mode: WeightMode = WeightMode.COX
    weight_floor: float = DEFAULT_WEIGHT_FLOOR
    allow_nonconverged: bool = False
    target: Optional[TargetRange] = None

    def __post_init__(self):
        object.__setattr__(self, 'method', Method(self.method))
        object.__setattr__(self, 'mode', WeightMode(self.mode))
        if not 0 < self.weight_floor < 0.5:
            raise ValueError(f"weight_floor must lie in (0, 0.5), got {self.weight_floor}")

    def with_target(self, target: TargetRange) -> 'EstimatorConfig':
        return replace(self, target=target)


@dataclass(frozen=True, eq=False)
class PgCurve:
    """p_G(t_j) over the grid with its weighted denominators"""
    values: np.ndarray
    effective_weight_sums: np.ndarray
    method: str                      # 'ipw' or 'simplified'
    grid: TimeGrid
    target: TargetRange
    diagnostics: Dict = field(default_factory=dict)

    def to_rows(self, method_label: str) -> List[Dict]:
        return [
            {'method': method_label, 'range': self.target.label, 'tau_days': self.grid.tau_days,
             'time_minutes': float(t), 'p_g': float(v)}
            for t, v in zip(self.grid.points, self.values)
        ]


@dataclass(frozen=True)
class TirEstimate:
    mu_hat: float
    method: str
    target: TargetRange
    tau_days: float
    se: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    ci_normal: Optional[Tuple[float, float]] = None
    diagnostics: Dict = field(default_factory=dict, compare=False)
    pg_curve: Optional[PgCurve] = field(default=None, compare=False, repr=False)
    cox_fit: Optional[CoxFit] = field(default=None, compare=False, repr=False)

    def with_inference(self, se: float, ci: Tuple[float, float],
                       ci_normal: Optional[Tuple[float, float]] = None) -> 'TirEstimate':
        return replace(self, se=se, ci=ci, ci_normal=ci_normal)

    def clipped_ci(self) -> Optional[Tuple[float, float]]:
        if self.ci is None:
            return None
        return (max(0.0, self.ci[0]), min(1.0, self.ci[1]))

    def to_dict(self) -> Dict:
        return {
            'method': self.method,
            'range': self.target.to_dict(),
            'tau_days': self.tau_days,
            'estimate': self.mu_hat,
            'se': self.se,
            'ci': list(self.ci) if self.ci is not None else None,
            'ci_normal': list(self.ci_normal) if self.ci_normal is not None else None,
            'diagnostics': _plain(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TirEstimate':
        rng = data['range']
        target = TargetRange.parse(
            ('[' if rng['lower_inclusive'] else '(') + f"{rng['lower']},{rng['upper']}"
            + (']' if rng['upper_inclusive'] else ')'), name=rng['label'])
        return cls(
            mu_hat=float(data['estimate']),
            method=data['method'],
            target=target,
            tau_days=float(data['tau_days']),
            se=data.get('se'),
            ci=tuple(data['ci']) if data.get('ci') is not None else None,
            ci_normal=tuple(data['ci_normal']) if data.get('ci_normal') is not None else None,
            diagnostics=data.get('diagnostics', {}),
        )

    def to_row(self) -> Dict:
        return {
            'method': self.method,
            'range': self.target.label,
            'tau_days': self.tau_days,
            'estimate': self.mu_hat,
            'se': self.se,
            'ci_lo': self.ci[0] if self.ci else None,
            'ci_hi': self.ci[1] if self.ci else None,
        }


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def subject_tir_oracle(traj: Trajectory, target: TargetRange) -> float:
    """Fraction of [0, tau] spent in the target range by a fully observed subject"""
    if not traj.is_complete:
        raise MissingDataError(
            f"Oracle TIR needs a fully observed trajectory; subject {traj.subject_id} has gaps",
            subject_ids=[traj.subject_id], stage="oracle")
    indicator = target.contains(traj.glucose[:-1])
    return float(np.sum(indicator) / indicator.size)


def _subject_oracle_values(panel: CohortPanel, target: TargetRange) -> np.ndarray:
    incomplete = ~panel.availability.all(axis=1)
    if incomplete.any():
        ids = [panel.subject_ids[i] for i in np.flatnonzero(incomplete)]
        raise MissingDataError(
            f"Oracle estimate needs complete data; {len(ids)} subjects have missing readings",
            subject_ids=ids, stage="oracle")
    indicator = target.contains(panel.glucose[:, :-1])
    return np.sum(indicator, axis=1) / indicator.shape[1]


def oracle_mean_tir(cohort: CohortLike, target: TargetRange) -> TirEstimate:
    panel = as_panel(cohort)
    values = _subject_oracle_values(panel, target)
    return TirEstimate(float(np.mean(values)), Method.ORACLE.value, target, panel.grid.tau_days,
                       diagnostics={'n_subjects': panel.n})


def naive_mean_tir(cohort: CohortLike, target: TargetRange) -> TirEstimate:
    """
    Average of per-subject TIR computed over available readings only

    Raises:
        MissingDataError: a subject has no available reading before tau
    """
    panel = as_panel(cohort)
    available = panel.availability[:, :-1]
    counts = np.sum(available, axis=1)
    empty = counts == 0
    if empty.any():
        ids = [panel.subject_ids[i] for i in np.flatnonzero(empty)]
        raise MissingDataError(
            f"Naive TIR undefined for subjects with no available reading: {ids}",
            subject_ids=ids, stage="naive")
    hits = np.sum(available & target.contains(panel.glucose[:, :-1]), axis=1)
    values = hits / counts
    return TirEstimate(float(np.mean(values)), Method.NAIVE.value, target, panel.grid.tau_days,
                       diagnostics={'n_subjects': panel.n,
                                    'min_available_count': int(counts.min())})


def _as_weight_matrix(curves, panel: CohortPanel) -> np.ndarray:
    if isinstance(curves, np.ndarray):
        matrix = np.asarray(curves, dtype=float)
    else:
        matrix = np.stack([c.values if isinstance(c, SurvivalCurve) else np.asarray(c, dtype=float)
                           for c in curves])
    if matrix.ndim == 1:
        matrix = np.broadcast_to(matrix, (panel.n, matrix.size))
    k = panel.grid.size
    if matrix.shape[0] != panel.n or matrix.shape[1] < k:
        raise ValueError(f"Survival curves shaped {matrix.shape} do not match {panel.n} subjects x {k} points")
    return matrix[:, :k]


def _weighted_pg(panel: CohortPanel, targets: Sequence[TargetRange], survival: np.ndarray,
                 weight_floor: float, method: str) -> List[PgCurve]:
    """
    Ratio estimator at every grid point for several ranges sharing weights.

    Weights are divided by their per-time maximum over available subjects,
    so identical survival curves give unit weights exactly.
    """
    available = panel.availability
    floored = np.maximum(survival, weight_floor)
    raw = np.where(available, 1.0 / floored, 0.0)
    sums = np.sum(raw, axis=0)
    count = np.sum(available, axis=0)
    empty = np.flatnonzero(count == 0)
    if empty.size:
        t_fail = float(panel.grid.points[empty[0]])
        raise PositivityError(
            f"No subject is available at t={t_fail:g} min ({t_fail / 1440.0:.3f} days); "
            f"positivity inf E[delta(t)] > 0 fails, shorten tau", time_minutes=t_fail,
            stage="estimate_pg")

    peak = np.max(raw, axis=0)
    weights = raw / peak
    denominator = np.sum(weights, axis=0)

    activations = int(np.sum(available & (survival < weight_floor)))
    if activations:
        logger.warning(f"[Estimator] Weight floor {weight_floor} applied at {activations} subject-times")
    observed = survival[available]
    diagnostics = {
        'min_survival_weight': float(observed.min()) if observed.size else 1.0,
        'min_available_count': int(count.min()),
        'weight_floor_activations': activations,
    }

    curves = []
    for target in targets:
        hits = available & target.contains(panel.glucose)
        numerator = np.sum(np.where(hits, weights, 0.0), axis=0)
        values = np.clip(numerator / denominator, 0.0, 1.0)
        curves.append(PgCurve(values, sums, method, panel.grid, target, dict(diagnostics)))
    return curves


def estimate_pg(cohort: CohortLike, target: TargetRange, curves,
                weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> PgCurve:
    """
    Inverse-probability weighted p_G(t) at every grid point

    Args:
        cohort: observed cohort
        target: glycemic range
        curves: per-subject survival curves (SurvivalCurves or an (n, K) array);
            one shared curve is broadcast to every subject
        weight_floor: lower bound applied to each survival probability

    Returns:
        PgCurve with method 'ipw'
    """
    if not 0 < weight_floor < 0.5:
        raise ValueError(f"weight_floor must lie in (0, 0.5), got {weight_floor}")
    panel = as_panel(cohort)
    return _weighted_pg(panel, [target], _as_weight_matrix(curves, panel), weight_floor, 'ipw')[0]


def estimate_pg_simplified(cohort: CohortLike, target: TargetRange) -> PgCurve:
    panel = as_panel(cohort)
    ones = np.ones((panel.n, panel.grid.size))
    return _weighted_pg(panel, [target], ones, DEFAULT_WEIGHT_FLOOR, 'simplified')[0]


def mean_tir_from_pg(pg: PgCurve, grid: Optional[TimeGrid] = None) -> TirEstimate:
    """Left-endpoint average of p_G over [0, tau]"""
    grid = grid or pg.grid
    values = pg.values[:grid.size]
    mu = float(np.sum(values[:-1]) / (values.size - 1))
    method = Method.PROPOSED.value if pg.method == 'ipw' else Method.SIMPLIFIED.value
    return TirEstimate(min(max(mu, 0.0), 1.0), method, pg.target, grid.tau_days,
                       diagnostics=dict(pg.diagnostics), pg_curve=pg)


def survival_weights(cohort: CohortLike, mode: Union[WeightMode, str] = WeightMode.COX,
                     allow_nonconverged: bool = False) -> Tuple[np.ndarray, Dict, Optional[CoxFit]]:
    """
    Per-subject Pr(t <= C | history) on the grid

    A cohort with no follow-up ending before tau gets unit weights in either
    mode; there is nothing to fit.

    Returns:
        (n, K) survival matrix, diagnostics, CoxFit or None
    """
    panel = as_panel(cohort)
    mode = WeightMode(mode)
    tau = panel.grid.tau_days
    if not np.any(panel.followup_days <= tau):
        logger.debug(f"[Estimator] No follow-up ends before tau={tau}; survival weights are 1")
        return np.ones((panel.n, panel.grid.size)), {'n_events': 0}, None

    if mode is WeightMode.KM:
        curve = km_curve(panel)
        return np.broadcast_to(curve, (panel.n, curve.size)), {'weight_mode': 'km'}, None

    try:
        fit = fit_cox(panel, tau)
    except CoxFitError as e:
        raise e.with_stage("cox")
    if not fit.converged and not allow_nonconverged:
        raise CoxFitError(
            f"Cox fit did not converge after {fit.iterations} iterations "
            f"(score norm {fit.final_score_norm:.3g})", stage="cox")
    diagnostics = {
        'weight_mode': 'cox',
        'beta': fit.beta_hat.tolist(),
        'cox_converged': fit.converged,
        'cox_iterations': fit.iterations,
        'n_events': fit.n_events,
    }
    return survival_curves(fit, panel), diagnostics, fit


def proposed_mean_tir(cohort: CohortLike, target: TargetRange, tau_days: Optional[float] = None,
                      mode: Union[WeightMode, str] = WeightMode.COX,
                      weight_floor: float = DEFAULT_WEIGHT_FLOOR,
                      allow_nonconverged: bool = False) -> TirEstimate:
    """Survival weights, weighted p_G, then its time average"""
    config = EstimatorConfig(Method.PROPOSED, WeightMode(mode), weight_floor, allow_nonconverged)
    panel = as_panel(cohort)
    if tau_days is not None:
        panel = panel.truncate(tau_days)
    return estimate_ranges(panel, [target], config)[target.label]


def estimate_ranges(cohort: CohortLike, targets: Sequence[TargetRange],
                    config: EstimatorConfig) -> Dict[str, TirEstimate]:
    """
    Estimate mean TIR for several ranges with one set of weights

    Args:
        cohort: cohort or panel, already on the analysis horizon
        targets: glycemic ranges
        config: estimator configuration (its target is ignored)

    Returns:
        range label -> TirEstimate
    """
    panel = as_panel(cohort)
    method = Method(config.method)
    if method is Method.ORACLE:
        return {t.label: oracle_mean_tir(panel, t) for t in targets}
    if method is Method.NAIVE:
        return {t.label: naive_mean_tir(panel, t) for t in targets}

    extra: Dict = {}
    fit: Optional[CoxFit] = None
    if method is Method.SIMPLIFIED:
        survival = np.ones((panel.n, panel.grid.size))
        label = 'simplified'
    else:
        survival, extra, fit = survival_weights(panel, config.mode, config.allow_nonconverged)
        label = 'ipw'
    try:
        curves = _weighted_pg(panel, targets, survival, config.weight_floor, label)
    except TirError as e:
        raise e.with_stage("estimate_pg")

    estimates = {}
    for curve in curves:
        estimate = mean_tir_from_pg(curve)
        estimate.diagnostics.update(extra)
        estimates[curve.target.label] = replace(estimate, cox_fit=fit) if fit is not None else estimate
    return estimates
