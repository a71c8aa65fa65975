"""
Monte Carlo Replication Harness

Repeats scenario generation and estimation to measure, per group and
range: average estimate, relative bias against the average oracle,
empirical SD, mean bootstrap SE, and rejection rates of the group
comparison (size for two groups with equal means, power otherwise).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from lib.errors import ReplicationError, TirError
from lib.estimators import EstimatorConfig, Method, WeightMode, estimate_ranges
from lib.inference import bootstrap_ranges, stream_key, wald_from_bootstrap
from lib.scenario import ScenarioConfig, generate_scenario
from lib.trajectory import TargetRange

logger = logging.getLogger("Replicate")

MAX_FAILED_FRACTION = 0.05
INFERENCE_METHODS = (Method.NAIVE, Method.PROPOSED)


@dataclass
class ReplicateOutcome:
    """Estimates of one replicate: (group, range, method) -> value"""
    estimates: Dict[Tuple[str, str, str], float] = field(default_factory=dict)
    ses: Dict[Tuple[str, str, str], float] = field(default_factory=dict)
    rejections: Dict[Tuple[str, str, str], bool] = field(default_factory=dict)


@dataclass
class MonteCarloReport:
    scenario: str
    reps: int
    failed: int
    summary: pd.DataFrame
    tests: pd.DataFrame

    def to_frame(self) -> pd.DataFrame:
        """Both tables stacked in one tidy frame for montecarlo.csv"""
        summary = self.summary.assign(kind='estimate')
        tests = self.tests.assign(kind='test')
        return pd.concat([summary, tests], ignore_index=True, sort=False)


def default_pairs(labels: Sequence[str]) -> Dict[str, Tuple[str, str]]:
    """Size compares the first and third group, power the first and second"""
    pairs = {}
    if len(labels) >= 3:
        pairs['size'] = (labels[0], labels[2])
    if len(labels) >= 2:
        pairs['power'] = (labels[0], labels[1])
    return pairs


def run_replicate(config: ScenarioConfig, replicate: int, ranges: Sequence[TargetRange],
                  tau_days: float, B: int, mode: WeightMode, weight_floor: float,
                  pairs: Dict[str, Tuple[str, str]], alpha: float,
                  threads: Optional[int] = None) -> ReplicateOutcome:
    draw = generate_scenario(config, ranges, ground_truth=False, replicate=replicate)
    outcome = ReplicateOutcome()
    boots: Dict[Tuple[str, str], Dict] = {}
    for label, group in draw.groups.items():
        complete = group.complete.truncate(tau_days)
        masked = group.masked.truncate(tau_days)
        for r, est in estimate_ranges(complete, ranges, EstimatorConfig(Method.ORACLE)).items():
            outcome.estimates[(label, r, Method.ORACLE.value)] = est.mu_hat
        for method in INFERENCE_METHODS:
            est_config = EstimatorConfig(method, mode, weight_floor)
            estimates = estimate_ranges(masked, ranges, est_config)
            for r, est in estimates.items():
                outcome.estimates[(label, r, method.value)] = est.mu_hat
            if B >= 2:
                result = bootstrap_ranges(masked, ranges, est_config, B,
                                          seed=config.seed + replicate, threads=threads,
                                          stream=stream_key(label), estimates=estimates)
                boots[(label, method.value)] = result
                for r, boot in result.items():
                    outcome.ses[(label, r, method.value)] = boot.se

    if B >= 2:
        for name, (first, second) in pairs.items():
            for method in INFERENCE_METHODS:
                for r in ranges:
                    test = wald_from_bootstrap(
                        [first, second],
                        [boots[(first, method.value)][r.label], boots[(second, method.value)][r.label]])
                    outcome.rejections[(name, r.label, method.value)] = test.p_value < alpha
    return outcome


def summarize(outcomes: Sequence[ReplicateOutcome], labels: Sequence[str],
              ranges: Sequence[TargetRange], pairs: Dict[str, Tuple[str, str]]):
    rows = []
    methods = [Method.ORACLE.value] + [m.value for m in INFERENCE_METHODS]
    for label in labels:
        for r in ranges:
            oracle = np.array([o.estimates[(label, r.label, 'oracle')] for o in outcomes])
            for method in methods:
                values = np.array([o.estimates[(label, r.label, method)] for o in outcomes])
                ses = [o.ses[(label, r.label, method)] for o in outcomes
                       if (label, r.label, method) in o.ses]
                avg = float(values.mean())
                if method == 'oracle' or oracle.mean() == 0:
                    rel_bias = np.nan
                else:
                    rel_bias = abs(avg - oracle.mean()) / oracle.mean()
                rows.append({
                    'group': label, 'range': r.label, 'method': method,
                    'avg_est': avg, 'rel_bias': rel_bias,
                    'esd': float(values.std(ddof=1)) if values.size > 1 else np.nan,
                    'bse': float(np.mean(ses)) if ses else np.nan,
                    'reps_ok': int(values.size),
                })
    tests = []
    for name, (first, second) in pairs.items():
        for r in ranges:
            for method in INFERENCE_METHODS:
                key = (name, r.label, method.value)
                hits = [o.rejections[key] for o in outcomes if key in o.rejections]
                if not hits:
                    continue
                tests.append({
                    'comparison': name, 'group': f"{first} vs {second}", 'range': r.label,
                    'method': method.value, 'rejection_rate': float(np.mean(hits)),
                    'reps_ok': len(hits),
                })
    return pd.DataFrame(rows), pd.DataFrame(tests)


def run_replications(config: ScenarioConfig, reps: int, ranges: Sequence[TargetRange],
                     tau_days: Optional[float] = None, B: int = 200,
                     mode: WeightMode = WeightMode.COX, weight_floor: float = 0.01,
                     alpha: float = 0.05, pairs: Optional[Dict[str, Tuple[str, str]]] = None,
                     threads: Optional[int] = None, progress: bool = True) -> MonteCarloReport:
    """
    Replicate a scenario and summarize estimator performance

    Args:
        config: scenario (group sizes already set)
        reps: number of replicated datasets
        ranges: glycemic ranges
        tau_days: analysis horizon (default: the scenario horizon)
        B: bootstrap resamples per group and replicate (0 skips inference)
        mode: survival weights for the proposed estimator
        weight_floor: survival probability floor
        alpha: test level
        pairs: named group pairs to compare
        threads: bootstrap worker threads

    Returns:
        MonteCarloReport

    Raises:
        ReplicationError: more than 5% of replicates failed
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    tau = config.grid.tau_days if tau_days is None else float(tau_days)
    pairs = default_pairs(config.labels) if pairs is None else pairs
    mode = WeightMode(mode)
    allowed = int(np.floor(MAX_FAILED_FRACTION * reps))

    outcomes: List[ReplicateOutcome] = []
    failed = 0
    for replicate in tqdm(range(reps), desc="Replicates", disable=not progress):
        try:
            outcomes.append(run_replicate(config, replicate, ranges, tau, B, mode, weight_floor,
                                          pairs, alpha, threads))
        except TirError as e:
            failed += 1
            logger.warning(f"[Replicate] Replicate {replicate} failed: {e}")
            if failed > allowed:
                raise ReplicationError(
                    f"{failed} of {reps} replicates failed (limit {MAX_FAILED_FRACTION:.0%})",
                    stage="replicate") from e
    summary, tests = summarize(outcomes, config.labels, ranges, pairs)
    logger.info(f"[Replicate] {len(outcomes)} of {reps} replicates completed for {config.name}")
    return MonteCarloReport(config.name, reps, failed, summary, tests)
