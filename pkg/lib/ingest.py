"""
Monitoring Data Ingestion

Snaps raw sensor readings onto the canonical grid, applies follow-up
durations, and reads/writes the CSV formats used by the command line:

    readings:   subject_id,time_minutes,glucose_mgdl
    followups:  subject_id,followup_days
    covariates: subject_id,time_minutes,z1,...,zp
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lib.errors import IngestError
from lib.trajectory import Cohort, ExternalCovariates, TimeGrid, Trajectory

logger = logging.getLogger("Ingest")

READINGS_COLUMNS = ("subject_id", "time_minutes", "glucose_mgdl")
FOLLOWUP_COLUMNS = ("subject_id", "followup_days")


@dataclass
class IngestReport:
    """What ingestion dropped and why"""
    rejected_rows: List[Dict] = field(default_factory=list)
    rejected_subjects: Dict[str, str] = field(default_factory=dict)
    beyond_horizon: int = 0
    superseded: int = 0

    def to_dict(self) -> Dict:
        return {
            'rejected_rows': len(self.rejected_rows),
            'rejected_subjects': dict(self.rejected_subjects),
            'beyond_horizon': self.beyond_horizon,
            'superseded': self.superseded,
        }


def _readings_frame(rows: Union[pd.DataFrame, Sequence[Tuple]]) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        missing = [c for c in READINGS_COLUMNS if c not in rows.columns]
        if missing:
            raise IngestError(f"Readings are missing columns {missing}", stage="ingest")
        frame = rows.loc[:, list(READINGS_COLUMNS)].copy()
    else:
        frame = pd.DataFrame(list(rows), columns=list(READINGS_COLUMNS))
    if frame.empty:
        raise IngestError("No readings to ingest", stage="ingest")
    frame['subject_id'] = frame['subject_id'].astype(str)
    frame['time_minutes'] = pd.to_numeric(frame['time_minutes'], errors='coerce').astype(float)
    frame['glucose_mgdl'] = pd.to_numeric(frame['glucose_mgdl'], errors='coerce').astype(float)
    return frame


def ingest_readings(rows: Union[pd.DataFrame, Sequence[Tuple]], grid: TimeGrid,
                    followups: Mapping[str, float],
                    min_followup_minutes: Optional[float] = None,
                    group_label: str = "cohort",
                    return_report: bool = False):
    """
    Build a cohort from raw readings

    Args:
        rows: (subject_id, time_minutes, glucose_mgdl) records or a DataFrame
        grid: canonical grid to snap onto
        followups: subject_id -> follow-up duration C in days
        min_followup_minutes: subjects followed for less are rejected
            (default one grid step)
        group_label: label of the resulting cohort
        return_report: also return the IngestReport

    Returns:
        Cohort, or (Cohort, IngestReport) when return_report is set
    """
    report = IngestReport()
    frame = _readings_frame(rows)
    followups = {str(k): float(v) for k, v in followups.items()}

    times = frame['time_minutes'].to_numpy()
    if np.any(np.isnan(times)):
        raise IngestError("Reading times must be numeric", stage="ingest")
    if np.any(times < 0):
        bad = frame.loc[times < 0, 'subject_id'].unique().tolist()
        raise IngestError(f"Negative reading times for subjects {bad}", stage="ingest")

    finite = np.isfinite(frame['glucose_mgdl'].to_numpy())
    if not finite.all():
        dropped = frame.loc[~finite]
        report.rejected_rows.extend(dropped.to_dict('records'))
        logger.warning(f"[Ingest] Dropped {len(dropped)} readings with non-finite glucose")
        frame = frame.loc[finite]

    unknown = sorted(set(frame['subject_id']) - set(followups))
    if unknown:
        raise IngestError(f"No follow-up duration for subjects {unknown}", stage="ingest")

    min_minutes = grid.step_minutes if min_followup_minutes is None else float(min_followup_minutes)
    for subject_id in sorted(set(frame['subject_id'])):
        c_days = followups[subject_id]
        if not np.isfinite(c_days) or c_days * 1440.0 < min_minutes or c_days <= 0:
            report.rejected_subjects[subject_id] = f"follow-up {c_days} days below {min_minutes} min"
            logger.warning(f"[Ingest] Rejected subject {subject_id}: follow-up {c_days} days "
                           f"is shorter than {min_minutes:g} min")
    if report.rejected_subjects:
        frame = frame.loc[~frame['subject_id'].isin(list(report.rejected_subjects))]

    frame = frame.assign(slot=grid.interval_index(frame['time_minutes'].to_numpy()))
    beyond = frame['slot'].to_numpy() >= grid.size
    report.beyond_horizon = int(beyond.sum())
    if report.beyond_horizon:
        logger.debug(f"[Ingest] {report.beyond_horizon} readings fall beyond the {grid.tau_days} day horizon")
    lost = sorted(set(frame['subject_id']) - set(frame.loc[~beyond, 'subject_id']))
    for subject_id in lost:
        report.rejected_subjects[subject_id] = f"no readings within the {grid.tau_days:g} day horizon"
        logger.warning(f"[Ingest] Rejected subject {subject_id}: every reading is beyond the horizon")
    frame = frame.loc[~beyond]
    if frame.empty:
        raise IngestError("No usable readings remain after validation", stage="ingest")

    # stable sort keeps input order among equal timestamps, so the last row wins
    frame = frame.sort_values(['subject_id', 'time_minutes'], kind='mergesort')
    latest = frame.drop_duplicates(subset=['subject_id', 'slot'], keep='last')
    report.superseded = len(frame) - len(latest)

    trajectories = []
    k = grid.size
    for subject_id, group in latest.groupby('subject_id', sort=True):
        glucose = np.full(k, np.nan)
        slots = group['slot'].to_numpy()
        glucose[slots] = group['glucose_mgdl'].to_numpy()
        mask = np.zeros(k, dtype=bool)
        mask[slots] = True
        trajectories.append(Trajectory(subject_id, grid, glucose, mask, followups[subject_id]))

    cohort = Cohort(tuple(trajectories), None, group_label)
    logger.info(f"[Ingest] {group_label}: {cohort.n} subjects on a {k}-point grid "
                f"({len(latest)} readings, {report.superseded} superseded)")
    if return_report:
        return cohort, report
    return cohort


def canonical_rows(cohort: Cohort, available_only: bool = False) -> pd.DataFrame:
    """
    Readings that reproduce the cohort when ingested again.

    Every grid interval with a reading is emitted once at its grid time,
    including readings after follow-up ends unless available_only is set.
    """
    records = []
    grid = cohort.grid
    for traj in cohort.trajectories:
        slots = np.flatnonzero(traj.availability if available_only else traj.intermittent_mask)
        for j in slots:
            records.append((traj.subject_id, float(grid.points[j]), float(traj.glucose[j])))
    return pd.DataFrame(records, columns=list(READINGS_COLUMNS))


def followups_frame(cohort: Cohort) -> pd.DataFrame:
    return pd.DataFrame({
        'subject_id': cohort.subject_ids,
        'followup_days': [t.followup_days for t in cohort.trajectories],
    })


def read_readings(path: Union[str, Path]) -> pd.DataFrame:
    frame = _read_csv(path, READINGS_COLUMNS)
    return _readings_frame(frame)


def read_followups(path: Union[str, Path]) -> Dict[str, float]:
    frame = _read_csv(path, FOLLOWUP_COLUMNS)
    frame['subject_id'] = frame['subject_id'].astype(str)
    if frame['subject_id'].duplicated().any():
        dupes = frame.loc[frame['subject_id'].duplicated(), 'subject_id'].tolist()
        raise IngestError(f"Duplicate follow-up rows for subjects {dupes}", stage="ingest")
    durations = pd.to_numeric(frame['followup_days'], errors='coerce')
    return dict(zip(frame['subject_id'], durations.astype(float)))


def read_covariates(path: Union[str, Path], grid: TimeGrid,
                    subject_ids: Sequence[str]) -> ExternalCovariates:
    """
    Load external covariates and carry them forward onto the grid

    Values before a subject's first record take that first record.

    Args:
        path: CSV with subject_id,time_minutes and one column per covariate
        grid: canonical grid
        subject_ids: subjects that must be present

    Returns:
        subject_id -> (names, (K, q) values)
    """
    frame = _read_csv(path, ("subject_id", "time_minutes"))
    names = tuple(c for c in frame.columns if c not in ("subject_id", "time_minutes"))
    if not names:
        raise IngestError(f"{path}: no covariate columns", stage="ingest")
    frame['subject_id'] = frame['subject_id'].astype(str)
    values = frame.loc[:, list(names)].apply(pd.to_numeric, errors='coerce')
    if not np.all(np.isfinite(values.to_numpy(dtype=float))):
        raise IngestError(f"{path}: covariates must be finite numbers", stage="ingest")
    frame = frame.assign(slot=grid.interval_index(frame['time_minutes'].astype(float).to_numpy()))
    frame = frame.sort_values(['subject_id', 'time_minutes'], kind='mergesort')

    missing = sorted(set(subject_ids) - set(frame['subject_id']))
    if missing:
        raise IngestError(f"No covariates for subjects {missing}", stage="ingest")

    grid_slots = np.arange(grid.size)
    result: ExternalCovariates = {}
    for subject_id, group in frame.groupby('subject_id', sort=True):
        if subject_id not in subject_ids:
            continue
        group = group.drop_duplicates(subset=['slot'], keep='last')
        slots = group['slot'].to_numpy()
        rows = np.searchsorted(slots, grid_slots, side='right') - 1
        rows = np.clip(rows, 0, len(slots) - 1)
        result[subject_id] = (names, group.loc[:, list(names)].to_numpy(dtype=float)[rows])
    return result


def covariates_frame(subject_ids: Sequence[str], names: Sequence[str],
                     values: np.ndarray) -> pd.DataFrame:
    """Time-constant covariates as one row per subject at time 0"""
    frame = pd.DataFrame(np.asarray(values, dtype=float).reshape(len(subject_ids), -1),
                         columns=list(names))
    frame.insert(0, 'time_minutes', 0.0)
    frame.insert(0, 'subject_id', list(subject_ids))
    return frame


def write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g')
    return path


def _read_csv(path: Union[str, Path], required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"File not found: {path}", stage="ingest")
    try:
        frame = pd.read_csv(path, dtype={'subject_id': str}, encoding='utf-8')
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise IngestError(f"Cannot parse {path}: {e}", stage="ingest") from e
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}", stage="ingest")
    return frame
