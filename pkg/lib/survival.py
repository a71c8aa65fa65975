"""
Follow-up Survival Models

Cox proportional-hazards fit for the follow-up duration C with
time-varying covariates (Breslow ties and baseline), plug-in survival
probabilities Pr(t <= C | history) on the grid, and the covariate-free
Kaplan-Meier curve used when follow-up is non-informative.

Times on the survival scale are in days.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from lifelines import KaplanMeierFitter

from lib.errors import CoxFitError
from lib.trajectory import CohortLike, CovariateProcess, TimeGrid, as_panel, CohortPanel

logger = logging.getLogger("Cox")

SCORE_TOLERANCE = 1e-8
LOGLIK_TOLERANCE = 1e-12
MAX_ITERATIONS = 100
MAX_HALVINGS = 20
RANK_TOLERANCE = 1e-10
GRID_TIME_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class CoxFit:
    """Fitted coefficients with the Breslow cumulative baseline hazard"""
    beta_hat: np.ndarray
    jump_times: np.ndarray           # distinct event times (days), increasing
    cumulative_hazard: np.ndarray    # Breslow Lambda at each jump
    converged: bool
    iterations: int
    final_score_norm: float
    covariate_names: Tuple[str, ...]
    log_likelihood: float
    null_log_likelihood: float
    tau_days: float
    step_minutes: float
    n_subjects: int
    n_events: int

    @property
    def hazard_increments(self) -> np.ndarray:
        return np.diff(self.cumulative_hazard, prepend=0.0)

    def baseline_at(self, days) -> np.ndarray:
        """Right-continuous step function Lambda(t)"""
        pos = np.searchsorted(self.jump_times, np.asarray(days, dtype=float) + GRID_TIME_SLACK, side='right')
        padded = np.concatenate(([0.0], self.cumulative_hazard))
        return padded[pos]

    def to_dict(self) -> Dict:
        return {
            'beta': self.beta_hat.tolist(),
            'covariates': list(self.covariate_names),
            'jump_times_days': self.jump_times.tolist(),
            'cumulative_hazard': self.cumulative_hazard.tolist(),
            'converged': self.converged,
            'iterations': self.iterations,
            'final_score_norm': self.final_score_norm,
            'log_likelihood': self.log_likelihood,
            'null_log_likelihood': self.null_log_likelihood,
            'tau_days': self.tau_days,
            'step_minutes': self.step_minutes,
            'n_subjects': self.n_subjects,
            'n_events': self.n_events,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict) -> 'CoxFit':
        return cls(
            beta_hat=np.asarray(data['beta'], dtype=float),
            jump_times=np.asarray(data['jump_times_days'], dtype=float),
            cumulative_hazard=np.asarray(data['cumulative_hazard'], dtype=float),
            converged=bool(data['converged']),
            iterations=int(data['iterations']),
            final_score_norm=float(data['final_score_norm']),
            covariate_names=tuple(data['covariates']),
            log_likelihood=float(data['log_likelihood']),
            null_log_likelihood=float(data['null_log_likelihood']),
            tau_days=float(data['tau_days']),
            step_minutes=float(data['step_minutes']),
            n_subjects=int(data['n_subjects']),
            n_events=int(data['n_events']),
        )


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """p_C(t_j) = Pr(t_j <= C | history) over the grid"""
    subject_id: str
    values: np.ndarray = field(repr=False)


class _RiskSets:
    """Event-time design: covariates of every subject at every distinct event time"""

    def __init__(self, panel: CohortPanel, tau_days: float):
        stop = np.minimum(panel.followup_days, tau_days)
        event = panel.followup_days <= tau_days
        self.event_times = np.unique(stop[event])
        slot = panel.grid.left_limit_index(self.event_times)
        # (m, n, p): Z_j evaluated just before each event time
        self.x = np.transpose(panel.covariates[:, slot, :], (1, 0, 2))
        self.at_risk = stop[None, :] >= self.event_times[:, None]
        which = np.searchsorted(self.event_times, stop[event])
        self.deaths = np.bincount(which, minlength=len(self.event_times)).astype(float)
        self.event_x_sum = np.zeros((len(self.event_times), self.x.shape[2]))
        np.add.at(self.event_x_sum, which, self.x[which, np.flatnonzero(event), :])

    def log_likelihood(self, beta: np.ndarray) -> float:
        eta = self.x @ beta
        shift, s0 = self._normalizer(eta)
        return float(np.sum(self.event_x_sum @ beta) - np.sum(self.deaths * (shift + np.log(s0))))

    def derivatives(self, beta: np.ndarray):
        """Log-likelihood, score and information at beta"""
        eta = self.x @ beta
        shift, s0 = self._normalizer(eta)
        w = np.where(self.at_risk, np.exp(eta - shift[:, None]), 0.0)
        s1 = np.einsum('mn,mnp->mp', w, self.x)
        s2 = np.einsum('mn,mnp,mnq->mpq', w, self.x, self.x)
        xbar = s1 / s0[:, None]
        ll = float(np.sum(self.event_x_sum @ beta) - np.sum(self.deaths * (shift + np.log(s0))))
        score = np.sum(self.event_x_sum - self.deaths[:, None] * xbar, axis=0)
        information = np.einsum('m,mpq->pq', self.deaths,
                                s2 / s0[:, None, None] - np.einsum('mp,mq->mpq', xbar, xbar))
        return ll, score, information

    def breslow(self, beta: np.ndarray) -> np.ndarray:
        eta = self.x @ beta
        shift, s0 = self._normalizer(eta)
        return np.cumsum(self.deaths * np.exp(-shift) / s0)

    def _normalizer(self, eta: np.ndarray):
        masked = np.where(self.at_risk, eta, -np.inf)
        shift = np.max(masked, axis=1)
        s0 = np.sum(np.where(self.at_risk, np.exp(eta - shift[:, None]), 0.0), axis=1)
        return shift, s0


def _check_rank(information: np.ndarray, names: Tuple[str, ...]):
    _, r, piv = linalg.qr(information, pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag[0] if diag.size and diag[0] > 0 else 0.0
    rank = int(np.sum(diag > RANK_TOLERANCE * max(scale, 1.0))) if scale > 0 else 0
    if rank < len(names):
        offending = names[piv[rank]]
        raise CoxFitError(
            f"Singular information matrix: covariate '{offending}' is constant or collinear "
            f"among subjects at risk", covariate=offending, stage="cox")


def fit_cox(cohort: CohortLike, tau_days: Optional[float] = None) -> CoxFit:
    """
    Fit the Cox model for follow-up with time-varying covariates

    Subjects with C <= tau are events at C; the rest are censored at tau.
    Damped Newton from beta = 0 with step halving on likelihood decrease.

    Args:
        cohort: cohort (or panel) carrying covariate processes
        tau_days: horizon, defaults to the cohort grid horizon

    Returns:
        CoxFit; converged is False when the iteration limit is reached
    """
    panel = as_panel(cohort)
    tau = panel.grid.tau_days if tau_days is None else float(tau_days)
    if tau < panel.grid.tau_days:
        panel = panel.truncate(tau)
    if panel.covariates is None or panel.covariates.shape[2] < 1:
        raise CoxFitError("Cox model needs at least one covariate", stage="cox")
    if panel.n < 2:
        raise CoxFitError("Cox model needs at least two subjects", stage="cox")
    names = panel.covariate_names
    risk = _RiskSets(panel, tau)
    n_events = int(risk.deaths.sum())
    if n_events == 0:
        raise CoxFitError(f"No follow-up ends before tau={tau} days: zero events", stage="cox")

    beta = np.zeros(len(names))
    ll, score, information = risk.derivatives(beta)
    null_ll = ll
    converged = False
    iterations = 0
    while iterations < MAX_ITERATIONS:
        _check_rank(information, names)
        if np.max(np.abs(score)) < SCORE_TOLERANCE:
            converged = True
            break
        try:
            delta = linalg.solve(information, score, assume_a='pos')
        except (linalg.LinAlgError, ValueError):
            delta = linalg.lstsq(information, score)[0]
        iterations += 1

        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            candidate = beta + step * delta
            ll_candidate = risk.log_likelihood(candidate)
            if np.isfinite(ll_candidate) and ll_candidate >= ll - 1e-12 * max(1.0, abs(ll)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            logger.debug(f"[Cox] No improving step at iteration {iterations}")
            break

        change = ll_candidate - ll
        beta = candidate
        ll, score, information = risk.derivatives(beta)
        if abs(change) < LOGLIK_TOLERANCE:
            converged = True
            break

    if not np.all(np.isfinite(beta)):
        converged = False
    score_norm = float(np.max(np.abs(score)))
    if not converged:
        logger.warning(f"[Cox] Newton did not converge after {iterations} iterations "
                       f"(score norm {score_norm:.3g})")

    fit = CoxFit(
        beta_hat=beta,
        jump_times=risk.event_times,
        cumulative_hazard=risk.breslow(beta),
        converged=converged,
        iterations=iterations,
        final_score_norm=score_norm,
        covariate_names=tuple(names),
        log_likelihood=ll,
        null_log_likelihood=null_ll,
        tau_days=tau,
        step_minutes=panel.grid.step_minutes,
        n_subjects=panel.n,
        n_events=n_events,
    )
    logger.debug(f"[Cox] beta={np.round(beta, 4).tolist()} events={n_events} iterations={iterations}")
    return fit


def survival_curves(fit: CoxFit, cohort: CohortLike) -> np.ndarray:
    """
    p_C,i(t_j) for every subject and grid point, shape (n, K)

    The covariate of each subject is taken just before each Breslow jump.
    """
    panel = as_panel(cohort)
    if panel.covariates is None or panel.covariates.shape[2] != len(fit.beta_hat):
        raise ValueError("Covariate dimension does not match the fitted model")
    grid = panel.grid
    if fit.jump_times.size == 0:
        return np.ones((panel.n, grid.size))
    slot = grid.left_limit_index(fit.jump_times)
    risk_score = np.exp(panel.covariates[:, slot, :] @ fit.beta_hat)       # (n, m)
    cumulative = np.cumsum(risk_score * fit.hazard_increments[None, :], axis=1)
    pos = np.searchsorted(fit.jump_times, grid.points_days + GRID_TIME_SLACK, side='right')
    padded = np.concatenate((np.zeros((panel.n, 1)), cumulative), axis=1)
    return np.exp(-padded[:, pos])


def survival_prob(fit: CoxFit, covariate: CovariateProcess, grid: TimeGrid) -> SurvivalCurve:
    """Survival curve of one subject given its covariate path"""
    if covariate.grid != grid:
        grid_values = covariate.values[:grid.size]
    else:
        grid_values = covariate.values
    panel = CohortPanel(
        grid=grid,
        subject_ids=(covariate.subject_id,),
        glucose=np.zeros((1, grid.size)),
        availability=np.ones((1, grid.size), dtype=bool),
        followup_days=np.array([grid.tau_days]),
        covariates=grid_values[None, :, :],
        covariate_names=covariate.names,
    )
    return SurvivalCurve(covariate.subject_id, survival_curves(fit, panel)[0])


def km_curve(cohort: CohortLike, tau_days: Optional[float] = None) -> np.ndarray:
    """Kaplan-Meier Pr(t <= C) on the cohort grid, censoring at tau"""
    panel = as_panel(cohort)
    grid = panel.grid
    tau = grid.tau_days if tau_days is None else float(tau_days)
    durations = np.minimum(panel.followup_days, tau)
    events = panel.followup_days <= tau
    if not events.any():
        return np.ones(grid.size)
    kmf = KaplanMeierFitter()
    kmf.fit(durations=durations, event_observed=events)
    timeline = kmf.survival_function_.index.to_numpy(dtype=float)
    values = kmf.survival_function_.iloc[:, 0].to_numpy(dtype=float)
    pos = np.searchsorted(timeline, grid.points_days + GRID_TIME_SLACK, side='right') - 1
    return np.where(pos >= 0, values[np.clip(pos, 0, None)], 1.0)


def survival_prob_km(cohort: CohortLike, grid: Optional[TimeGrid] = None) -> SurvivalCurve:
    """One product-limit curve shared by every subject"""
    panel = as_panel(cohort)
    if grid is not None and grid != panel.grid:
        panel = panel.truncate(grid.tau_days)
    return SurvivalCurve("*", km_curve(panel))
