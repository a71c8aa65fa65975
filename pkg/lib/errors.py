"""
Exception hierarchy for the TIR-IPW pipeline.

Every pipeline failure is a TirError. The optional stage label names the
pipeline step that raised it so the CLI can report where a run broke.
"""

from typing import List, Optional


class TirError(Exception):
    """Base class for all pipeline errors"""

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def with_stage(self, stage: str) -> 'TirError':
        """Attach a stage label unless one is already set"""
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class IngestError(TirError):
    """Readings/follow-up/covariate input cannot be turned into a cohort"""


class GridMismatchError(TirError):
    """Cohorts or curves were built on different time grids"""


class CoxFitError(TirError):
    """Cox partial-likelihood fit failed"""

    def __init__(self, message: str, covariate: Optional[str] = None, stage: Optional[str] = None):
        super().__init__(message, stage)
        self.covariate = covariate


class PositivityError(TirError):
    """No subject is available at some grid time (mean TIR not identified)"""

    def __init__(self, message: str, time_minutes: float, stage: Optional[str] = None):
        super().__init__(message, stage)
        self.time_minutes = time_minutes


class MissingDataError(TirError):
    """Estimator requirements on observed data are not met"""

    def __init__(self, message: str, subject_ids: Optional[List[str]] = None, stage: Optional[str] = None):
        super().__init__(message, stage)
        self.subject_ids = list(subject_ids or [])


class BootstrapError(TirError):
    """Bootstrap or Wald-test inference cannot be completed"""


class SimulationError(TirError):
    """Synthetic data generation failed"""


class ReplicationError(TirError):
    """Too many Monte Carlo replicates failed"""
