"""
Bootstrap Inference and Group Comparison

Subject-level nonparametric bootstrap of the whole estimation pipeline
(weights are refit in every replicate) and the Wald-type chi-square test
of equal mean TIR across K groups.
"""

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special, stats

from lib.errors import BootstrapError, GridMismatchError, TirError
from lib.estimators import EstimatorConfig, TirEstimate, estimate_ranges
from lib.trajectory import CohortLike, TargetRange, as_panel

logger = logging.getLogger("Bootstrap")

DEFAULT_B = 200
MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    replicates: np.ndarray
    replicate_index: np.ndarray      # which of the B resamples succeeded
    estimate: float
    se: float
    ci_percentile: Tuple[float, float]
    ci_normal: Tuple[float, float]
    failures: int
    B: int
    seed: int

    def to_dict(self) -> Dict:
        return {
            'estimate': self.estimate,
            'se': self.se,
            'ci_percentile': list(self.ci_percentile),
            'ci_normal': list(self.ci_normal),
            'failures': self.failures,
            'B': self.B,
            'seed': self.seed,
        }


@dataclass(frozen=True, eq=False)
class WaldTest:
    groups: Tuple[str, ...]
    estimates: np.ndarray
    ses: np.ndarray
    contrast: np.ndarray
    covariance: np.ndarray
    statistic: float
    df: int
    p_value: float
    B: int
    seed: int
    n_common_replicates: int = 0

    def to_dict(self) -> Dict:
        return {
            'groups': list(self.groups),
            'estimates': self.estimates.tolist(),
            'ses': self.ses.tolist(),
            'contrast': self.contrast.tolist(),
            'covariance': self.covariance.tolist(),
            'statistic': self.statistic,
            'df': self.df,
            'p_value': self.p_value,
            'B': self.B,
            'seed': self.seed,
        }


def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, else TIR_IPW_THREADS, else 1"""
    if threads is None:
        threads = int(os.environ.get('TIR_IPW_THREADS', '1') or 1)
    return max(1, int(threads))


def stream_key(label: str) -> int:
    """Stable integer for deriving a group's random stream from its label"""
    return zlib.crc32(str(label).encode('utf-8'))


def chi_square_upper_tail(x: float, df: int) -> float:
    """Pr(chi2_df > x) via the regularized upper incomplete gamma function"""
    if x < 0 or not np.isfinite(x):
        raise ValueError(f"chi-square statistic must be finite and >= 0, got {x}")
    if int(df) != df or df < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {df}")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def _summarize(estimate: float, reps: np.ndarray, alpha: float) -> Tuple[float, Tuple, Tuple]:
    if np.ptp(reps) == 0:
        se = 0.0
    else:
        se = float(np.std(reps, ddof=1))
    lo, hi = np.quantile(reps, [alpha / 2.0, 1.0 - alpha / 2.0], method='inverted_cdf')
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return se, (float(lo), float(hi)), (estimate - z * se, estimate + z * se)


def bootstrap_ranges(cohort: CohortLike, targets: Sequence[TargetRange], config: EstimatorConfig,
                     B: int = DEFAULT_B, seed: int = 0, alpha: float = 0.05,
                     threads: Optional[int] = None, stream: Optional[int] = None,
                     estimates: Optional[Dict[str, TirEstimate]] = None) -> Dict[str, BootstrapResult]:
    """
    Bootstrap every range from the same subject resamples

    Args:
        cohort: cohort or panel on the analysis horizon
        targets: glycemic ranges
        config: estimator configuration
        B: number of resamples (>= 2)
        seed: base seed; resample b draws from default_rng([seed, b])
        alpha: two-sided CI level
        threads: worker threads (TIR_IPW_THREADS when None)
        stream: extra seed component separating independent groups
        estimates: point estimates already computed on the cohort

    Returns:
        range label -> BootstrapResult
    """
    if B < 2:
        raise ValueError(f"Bootstrap needs B >= 2, got {B}")
    panel = as_panel(cohort)
    if estimates is None:
        try:
            estimates = estimate_ranges(panel, targets, config)
        except TirError as e:
            raise BootstrapError(f"Estimator is not valid on the original data: {e}",
                                 stage="bootstrap") from e
    labels = [t.label for t in targets]
    base = [seed] if stream is None else [seed, stream]

    def replicate(b: int) -> Optional[List[float]]:
        rng = np.random.default_rng(base + [b])
        indices = rng.integers(0, panel.n, size=panel.n)
        try:
            result = estimate_ranges(panel.take(indices), targets, config)
        except TirError as e:
            logger.debug(f"[Bootstrap] Replicate {b} failed: {e}")
            return None
        return [result[label].mu_hat for label in labels]

    workers = resolve_threads(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(replicate, range(B)))
    else:
        outcomes = [replicate(b) for b in range(B)]

    ok = [b for b, out in enumerate(outcomes) if out is not None]
    failures = B - len(ok)
    if failures:
        logger.warning(f"[Bootstrap] {failures}/{B} resamples of {panel.group_label} were not estimable")
    if failures > MAX_FAILURE_FRACTION * B or len(ok) < 2:
        raise BootstrapError(
            f"{failures} of {B} bootstrap resamples failed (limit {MAX_FAILURE_FRACTION:.0%})",
            stage="bootstrap")

    matrix = np.array([outcomes[b] for b in ok], dtype=float)
    results = {}
    for col, label in enumerate(labels):
        reps = matrix[:, col]
        estimate = estimates[label].mu_hat
        se, ci, ci_normal = _summarize(estimate, reps, alpha)
        results[label] = BootstrapResult(reps, np.asarray(ok), estimate, se, ci, ci_normal,
                                         failures, B, seed)
    return results


def bootstrap_mu(cohort: CohortLike, config: EstimatorConfig, B: int = DEFAULT_B, seed: int = 0,
                 alpha: float = 0.05, threads: Optional[int] = None) -> BootstrapResult:
    """Bootstrap the mean TIR of config.target"""
    if config.target is None:
        raise ValueError("EstimatorConfig.target must be set for bootstrap_mu")
    results = bootstrap_ranges(cohort, [config.target], config, B, seed, alpha, threads)
    return results[config.target.label]


def attach_inference(estimates: Dict[str, TirEstimate],
                     boots: Dict[str, BootstrapResult]) -> Dict[str, TirEstimate]:
    return {label: est.with_inference(boots[label].se, boots[label].ci_percentile,
                                      boots[label].ci_normal)
            for label, est in estimates.items()}


def wald_from_bootstrap(labels: Sequence[str], boots: Sequence[BootstrapResult]) -> WaldTest:
    """
    Chi-square test of equal means from per-group bootstrap results

    The contrast is each group minus the first; its covariance comes from
    replicate differences over resample indices that succeeded in every group.
    """
    if len(boots) < 2:
        raise ValueError("A comparison needs at least two groups")
    estimates = np.array([b.estimate for b in boots])
    ses = np.array([b.se for b in boots])
    contrast = estimates[1:] - estimates[0]
    df = len(boots) - 1

    common = boots[0].replicate_index
    for b in boots[1:]:
        common = np.intersect1d(common, b.replicate_index)
    if common.size < 2:
        raise BootstrapError("Fewer than two bootstrap replicates succeeded in every group",
                             stage="wald")
    columns = []
    for b in boots:
        keep = np.isin(b.replicate_index, common)
        columns.append(b.replicates[keep])
    reps = np.column_stack(columns)
    diffs = reps[:, 1:] - reps[:, [0]]
    covariance = np.atleast_2d(np.cov(diffs, rowvar=False, ddof=1))
    covariance = (covariance + covariance.T) / 2.0

    if np.all(contrast == 0):
        statistic = 0.0
    else:
        eigenvalues = linalg.eigvalsh(covariance)
        if eigenvalues.min() <= 1e-14 * max(1.0, abs(eigenvalues.max())):
            raise BootstrapError(
                "Bootstrap covariance of the group differences is singular; increase B",
                stage="wald")
        statistic = float(contrast @ linalg.solve(covariance, contrast, assume_a='pos'))
        statistic = max(statistic, 0.0)
    p_value = chi_square_upper_tail(statistic, df)
    return WaldTest(tuple(labels), estimates, ses, contrast, covariance, statistic, df, p_value,
                    boots[0].B, boots[0].seed, int(common.size))


def _check_groups(cohorts: Sequence[CohortLike]) -> List:
    panels = [as_panel(c) for c in cohorts]
    if len(panels) < 2:
        raise ValueError("A comparison needs at least two groups")
    labels = [p.group_label for p in panels]
    if len(set(labels)) != len(labels):
        raise ValueError(f"Group labels must be unique, got {labels}")
    for p in panels[1:]:
        if p.grid != panels[0].grid:
            raise GridMismatchError(
                f"Group {p.group_label} is on {p.grid}, group {labels[0]} on {panels[0].grid}",
                stage="wald")
    return panels


def wald_test_ranges(cohorts: Sequence[CohortLike], targets: Sequence[TargetRange],
                     config: EstimatorConfig, B: int = DEFAULT_B, seed: int = 0,
                     threads: Optional[int] = None) -> Dict[str, WaldTest]:
    """Per-range Wald tests; each group is bootstrapped once on its own stream"""
    panels = _check_groups(cohorts)
    labels = [p.group_label for p in panels]
    per_group = [bootstrap_ranges(p, targets, config, B, seed, threads=threads,
                                  stream=stream_key(p.group_label))
                 for p in panels]
    return {t.label: wald_from_bootstrap(labels, [g[t.label] for g in per_group]) for t in targets}


def wald_test(group_results: Sequence[Tuple[CohortLike, EstimatorConfig]], B: int = DEFAULT_B,
              seed: int = 0, threads: Optional[int] = None) -> WaldTest:
    """
    Wald test of equal mean TIR across groups

    Args:
        group_results: (cohort, estimator config with target) per group
        B: bootstrap resamples per group
        seed: base seed; groups use independent streams derived from their labels

    Returns:
        WaldTest
    """
    panels = _check_groups([cohort for cohort, _ in group_results])
    boots = []
    for panel, (_, config) in zip(panels, group_results):
        boots.append(bootstrap_mu_stream(panel, config, B, seed, threads))
    return wald_from_bootstrap([p.group_label for p in panels], boots)


def bootstrap_mu_stream(cohort: CohortLike, config: EstimatorConfig, B: int, seed: int,
                        threads: Optional[int] = None) -> BootstrapResult:
    panel = as_panel(cohort)
    if config.target is None:
        raise ValueError("EstimatorConfig.target must be set for a group comparison")
    return bootstrap_ranges(panel, [config.target], config, B, seed, threads=threads,
                            stream=stream_key(panel.group_label))[config.target.label]
