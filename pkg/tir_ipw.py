#!/usr/bin/env python3
"""
TIR-IPW Command Line

Estimate and compare mean Time-in-Range from CGM readings with
intermittent gaps and informative end of monitoring, simulate scenarios
with known ground truth, and replicate the Monte Carlo experiments.

Usage:
    python3 tir_ipw.py estimate --readings r.csv --followups f.csv --tau-days 7
    python3 tir_ipw.py compare --readings a.csv b.csv --followups fa.csv fb.csv
    python3 tir_ipw.py simulate --scenario informative --out data/
    python3 tir_ipw.py replicate --scenario informative --reps 200 --n 200
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from lib import __version__
from lib.config import METHODS, RunConfig, ScenarioProfile, list_available_scenarios
from lib.errors import GridMismatchError, TirError
from lib.estimators import EstimatorConfig, TirEstimate, estimate_ranges
from lib.inference import (
    WaldTest, attach_inference, bootstrap_ranges, stream_key, wald_from_bootstrap,
)
from lib.ingest import (
    canonical_rows, covariates_frame, followups_frame, ingest_readings, read_covariates,
    read_followups, read_readings, write_frame,
)
from lib.montecarlo import run_replications
from lib.scenario import external_covariate_names, generate_scenario
from lib.trajectory import Cohort, TargetRange, TimeGrid, build_covariates

logger = logging.getLogger("CLI")


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)


def percent(value: Optional[float]) -> str:
    return "-" if value is None or not np.isfinite(value) else f"{100.0 * value:.2f}"


def range_title(target: TargetRange) -> str:
    return f"TIR {target.label} mg/dL (%)"


def write_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------

def load_cohort(config: RunConfig, readings: str, followups: str, covariates: Optional[str],
                label: str, grid: TimeGrid) -> Cohort:
    """Ingest one group and attach the covariates the Cox weights need"""
    rows = read_readings(readings)
    cohort = ingest_readings(rows, grid, read_followups(followups),
                             min_followup_minutes=config.min_followup_minutes, group_label=label)
    external = read_covariates(covariates, grid, cohort.subject_ids) if covariates else None
    if config.history_covariate or external:
        cohort = build_covariates(cohort, external, history=config.history_covariate)
    return cohort


def analysis_grid(config: RunConfig) -> TimeGrid:
    return TimeGrid(config.step_minutes, max(config.taus))


def group_labels(config: RunConfig, count: int) -> List[str]:
    if config.labels:
        if len(config.labels) != count:
            raise ValueError(f"{len(config.labels)} labels given for {count} datasets")
        return list(config.labels)
    return [f"group{i + 1}" for i in range(count)]


def estimate_with_inference(cohort: Cohort, ranges: Sequence[TargetRange], est_config: EstimatorConfig,
                            config: RunConfig, stream: Optional[int] = None):
    """Point estimates plus bootstrap SE/CI for every range"""
    estimates = estimate_ranges(cohort, ranges, est_config)
    boots = None
    if config.bootstrap_B >= 2 and est_config.method.value != "oracle":
        boots = bootstrap_ranges(cohort, ranges, est_config, config.bootstrap_B, config.effective_seed,
                                 alpha=config.alpha, threads=config.worker_threads, stream=stream,
                                 estimates=estimates)
        estimates = attach_inference(estimates, boots)
    return estimates, boots


def _estimator_config(config: RunConfig, method: str) -> EstimatorConfig:
    return EstimatorConfig(method, config.mode, config.weight_floor, config.allow_nonconverged)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_estimate(config: RunConfig) -> Dict[str, Path]:
    """Estimate mean TIR per (method, range, tau); write estimates and p_G curves"""
    if len(config.readings) != 1 or len(config.followups) != 1:
        raise ValueError("estimate takes exactly one --readings and one --followups file")
    ranges = config.target_ranges
    grid = analysis_grid(config)
    label = config.labels[0] if config.labels else "cohort"
    covariates = config.covariates[0] if config.covariates else None
    cohort = load_cohort(config, config.readings[0], config.followups[0], covariates, label, grid)

    results: List[TirEstimate] = []
    fits: Dict[str, Dict] = {}
    curves: List[Dict] = []
    for tau in config.taus:
        sub = cohort.truncate(tau)
        for method in config.methods:
            if method == "oracle" and config.method == "all" and not sub.is_complete:
                logger.info(f"[CLI] Skipping oracle at tau={tau:g}: readings are incomplete")
                continue
            estimates, _ = estimate_with_inference(sub, ranges, _estimator_config(config, method), config)
            for estimate in estimates.values():
                if estimate.cox_fit is not None:
                    fits[f"{tau:g}"] = estimate.cox_fit.to_dict()
                results.append(estimate)
                if estimate.pg_curve is not None:
                    curves.extend(estimate.pg_curve.to_rows(method))
        logger.info(f"[CLI] Estimated tau={tau:g} days for {cohort.n} subjects")

    out = Path(config.output_dir)
    paths = {
        'estimates_csv': write_frame(pd.DataFrame([e.to_row() for e in results]), out / "estimates.csv"),
        'estimates_json': write_json([e.to_dict() for e in results], out / "estimates.json"),
    }
    if curves:
        paths['pg_curve'] = write_frame(pd.DataFrame(curves), out / "pg_curve.csv")
    for tau, fit in fits.items():
        # fitted weights model, one per horizon
        paths[f'cox_fit_tau{tau}'] = write_json(fit, out / f"cox_fit_tau{tau}.json")
    print(format_estimates_table(results))
    return paths


def format_estimates_table(estimates: Sequence[TirEstimate]) -> str:
    lines = [f"{'Method':<11} {'Range':<10} {'tau':>5} {'Estimate':>9} {'SE':>7} {'95% CI':>17}"]
    for e in estimates:
        ci = f"({percent(e.ci[0])}, {percent(e.ci[1])})" if e.ci else "-"
        lines.append(f"{e.method:<11} {e.target.label:<10} {e.tau_days:>5g} {percent(e.mu_hat):>9} "
                     f"{percent(e.se):>7} {ci:>17}")
    return "\n".join(lines)


def format_comparison_table(method: str, tau: float, tests: Dict[str, WaldTest],
                            ranges: Sequence[TargetRange]) -> str:
    """Rows per range, estimate +- SE (percent) per group, then the p-value"""
    first = tests[ranges[0].label]
    header = f"{'':<26}" + "".join(f"{g:>16}" for g in first.groups) + f"{'p-value':>10}"
    lines = [f"Method: {method}  tau = {tau:g} days", header]
    for r in ranges:
        test = tests[r.label]
        cells = "".join(f"{percent(m) + '±' + percent(s):>16}" for m, s in zip(test.estimates, test.ses))
        p = "<0.01" if test.p_value < 0.005 else f"{test.p_value:.2f}"
        lines.append(f"{range_title(r):<26}{cells}{p:>10}")
    return "\n".join(lines)


def cmd_compare(config: RunConfig) -> Dict[str, Path]:
    """Wald tests of equal mean TIR across two or more groups"""
    count = len(config.readings)
    if count < 2 or len(config.followups) != count:
        raise ValueError("compare needs at least two --readings files and one --followups file per group")
    if config.covariates and len(config.covariates) != count:
        raise ValueError("give one --covariates file per group or none")
    if config.bootstrap_B < 2:
        raise ValueError("compare needs --bootstrap-B of at least 2")
    ranges = config.target_ranges
    grid = analysis_grid(config)
    labels = group_labels(config, count)
    cohorts = [load_cohort(config, config.readings[i], config.followups[i],
                           config.covariates[i] if config.covariates else None, labels[i], grid)
               for i in range(count)]
    for cohort in cohorts[1:]:
        if cohort.grid != cohorts[0].grid:
            raise GridMismatchError(f"Group {cohort.group_label} is on a different grid", stage="compare")

    methods = ["naive", "proposed"] if config.method == "all" else [config.method]
    reports = []
    tables = []
    for tau in config.taus:
        subs = [c.truncate(tau) for c in cohorts]
        for method in methods:
            est_config = _estimator_config(config, method)
            boots = []
            for sub in subs:
                _, group_boots = estimate_with_inference(sub, ranges, est_config, config,
                                                         stream=stream_key(sub.group_label))
                boots.append(group_boots)
            tests = {r.label: wald_from_bootstrap(labels, [b[r.label] for b in boots]) for r in ranges}
            for r in ranges:
                reports.append({'method': method, 'tau_days': tau, 'range': r.to_dict(),
                                **tests[r.label].to_dict()})
            tables.append(format_comparison_table(method, tau, tests, ranges))

    out = Path(config.output_dir)
    text = "\n\n".join(tables)
    paths = {'comparison_json': write_json(reports, out / "comparison.json")}
    paths['comparison_txt'] = out / "comparison.txt"
    paths['comparison_txt'].write_text(text + "\n", encoding='utf-8')
    print(text)
    return paths


def cmd_simulate(config: RunConfig) -> Dict[str, Path]:
    """Draw a scenario and write per-group datasets plus the ground truth"""
    scenario = ScenarioProfile(config.scenario).to_scenario_config()
    scenario = scenario.with_overrides(seed=config.seed, n=config.n, ground_truth_n=config.ground_truth_n)
    if config.min_followup_minutes is not None:
        scenario = replace(scenario, min_followup_minutes=config.min_followup_minutes)
    ranges = config.target_ranges
    draw = generate_scenario(scenario, ranges, ground_truth=scenario.ground_truth_n > 0)

    out = Path(config.output_dir)
    paths: Dict[str, Path] = {}
    for label, group in draw.groups.items():
        masked = group.masked
        paths[f"readings_{label}"] = write_frame(canonical_rows(masked, available_only=True),
                                                 out / f"readings_{label}.csv")
        paths[f"followups_{label}"] = write_frame(followups_frame(masked), out / f"followups_{label}.csv")
        names = external_covariate_names(masked)
        if names:
            values = np.column_stack([group.zeta if name == "zeta" else group.z2 for name in names])
            paths[f"covariates_{label}"] = write_frame(covariates_frame(masked.subject_ids, names, values),
                                                       out / f"covariates_{label}.csv")
        paths[f"complete_{label}"] = write_frame(canonical_rows(group.complete),
                                                 out / f"complete_readings_{label}.csv")
        paths[f"availability_{label}"] = write_frame(group.availability_frame(),
                                                     out / f"availability_{label}.csv")
        logger.info(f"[CLI] {label}: {masked.n} subjects written")

    if draw.ground_truth is not None:
        truth = {
            'scenario': scenario.name,
            'seed': scenario.seed,
            'grid': {'step_minutes': scenario.grid.step_minutes, 'tau_days': scenario.grid.tau_days},
            'ranges': [r.to_dict() for r in ranges],
            'groups': draw.ground_truth,
        }
        paths['ground_truth'] = write_json(truth, out / "ground_truth.json")
        for label, values in draw.ground_truth.items():
            summary = ", ".join(f"{r} {percent(v['mu'])}%" for r, v in values.items())
            print(f"{label}: {summary}")
    return paths


def cmd_replicate(config: RunConfig) -> Dict[str, Path]:
    """Monte Carlo replication of a scenario"""
    scenario = ScenarioProfile(config.scenario).to_scenario_config()
    scenario = scenario.with_overrides(seed=config.seed, n=config.n)
    tau = max(config.taus) if config.tau_days else None
    report = run_replications(scenario, config.reps, config.target_ranges, tau_days=tau,
                              B=config.bootstrap_B, mode=config.mode, weight_floor=config.weight_floor,
                              alpha=config.alpha, threads=config.worker_threads,
                              progress=logging.getLogger().level <= logging.INFO)
    out = Path(config.output_dir)
    path = write_frame(report.to_frame(), out / "montecarlo.csv")
    summary = report.summary.copy()
    for column in ('avg_est', 'rel_bias', 'esd', 'bse'):
        summary[column] = summary[column].map(percent)
    print(summary.to_string(index=False))
    if not report.tests.empty:
        tests = report.tests.copy()
        tests['rejection_rate'] = tests['rejection_rate'].map(percent)
        print()
        print(tests.to_string(index=False))
    return {'montecarlo': path}


COMMANDS = {
    'estimate': cmd_estimate,
    'compare': cmd_compare,
    'simulate': cmd_simulate,
    'replicate': cmd_replicate,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_analysis_args(parser: argparse.ArgumentParser, multi: bool):
    nargs = '+' if multi else None
    parser.add_argument('--readings', nargs=nargs, help='Readings CSV (subject_id,time_minutes,glucose_mgdl)')
    parser.add_argument('--followups', nargs=nargs, help='Follow-up CSV (subject_id,followup_days)')
    parser.add_argument('--covariates', nargs=nargs, help='Optional external covariates CSV')
    parser.add_argument('--labels', nargs='+', help='Group label(s)')
    parser.add_argument('--method', choices=('all',) + METHODS, help='Estimator (default: all)')
    parser.add_argument('--step-minutes', dest='step_minutes', type=float, help='Grid step (default: 5)')
    parser.add_argument('--no-history-covariate', dest='history_covariate', action='store_const',
                        const=False, default=None, help='Do not use the previous-day mean glucose covariate')
    parser.add_argument('--min-followup-minutes', dest='min_followup_minutes', type=float,
                        help='Reject subjects followed for less (default: one grid step)')
    parser.add_argument('--allow-nonconverged', dest='allow_nonconverged', action='store_const',
                        const=True, default=None, help='Use Cox fits that did not converge')


def _add_estimation_args(parser: argparse.ArgumentParser):
    parser.add_argument('--ranges', nargs='+', help='Ranges or presets, e.g. consensus6 "[70,180]" "(180,inf)"')
    parser.add_argument('--tau-days', dest='tau_days', nargs='+', help='Horizons in days or the horizons5 preset')
    parser.add_argument('--mode', choices=('cox', 'km'), help='Survival weights (default: cox)')
    parser.add_argument('--bootstrap-B', dest='bootstrap_B', type=int, help='Bootstrap resamples (default: 200)')
    parser.add_argument('--weight-floor', dest='weight_floor', type=float, help='Survival floor (default: 0.01)')
    parser.add_argument('--alpha', type=float, help='Two-sided level (default: 0.05)')
    parser.add_argument('--threads', type=int, help='Worker threads (default: $TIR_IPW_THREADS or 1)')


def _add_common_args(parser: argparse.ArgumentParser):
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--out', dest='output_dir', help='Output directory (default: results)')
    parser.add_argument('--config', dest='config_file', help='JSON file supplying any option')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Mean Time-in-Range under informative missingness')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='Warnings only')
    sub = parser.add_subparsers(dest='command', required=True)

    estimate = sub.add_parser('estimate', help='Estimate mean TIR for one cohort')
    _add_analysis_args(estimate, multi=False)
    _add_estimation_args(estimate)
    _add_common_args(estimate)

    compare = sub.add_parser('compare', help='Compare mean TIR across groups')
    _add_analysis_args(compare, multi=True)
    _add_estimation_args(compare)
    _add_common_args(compare)

    simulate = sub.add_parser('simulate', help='Simulate a scenario with ground truth')
    simulate.add_argument('--scenario', help=f'Profile name or path ({", ".join(list_available_scenarios())})')
    simulate.add_argument('--n', type=int, help='Subjects per group')
    simulate.add_argument('--ground-truth-n', dest='ground_truth_n', type=int,
                          help='Trajectories per group for the ground truth (0 skips it)')
    simulate.add_argument('--ranges', nargs='+', help='Ranges for the ground truth (default: partition3)')
    simulate.add_argument('--min-followup-minutes', dest='min_followup_minutes', type=float)
    _add_common_args(simulate)

    replicate = sub.add_parser('replicate', help='Monte Carlo replication of a scenario')
    replicate.add_argument('--scenario', help='Profile name or path')
    replicate.add_argument('--reps', type=int, help='Replicated datasets (default: 200)')
    replicate.add_argument('--n', type=int, help='Subjects per group')
    _add_estimation_args(replicate)
    _add_common_args(replicate)
    return parser


def _as_list(value) -> Optional[List[str]]:
    if value is None or isinstance(value, list):
        return value
    return [value]


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit status"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)

    flags = {k: v for k, v in vars(args).items() if k not in ('command', 'config_file', 'verbose', 'quiet')}
    for key in ('readings', 'followups', 'covariates'):
        if key in flags:
            flags[key] = _as_list(flags[key])

    try:
        config = RunConfig.from_sources(args.command, flags, args.config_file)
        COMMANDS[args.command](config)
        return 0

    except TirError as e:
        logger.error(f"[CLI] Error: {e}")
        return 1

    except (ValueError, FileNotFoundError) as e:
        logger.error(f"[CLI] Error: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
