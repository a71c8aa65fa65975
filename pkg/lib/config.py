"""
Configuration Management

Loads simulation scenarios from JSON profiles and assembles run settings
for the command line from defaults, an optional JSON config file and
explicit flags (flags win).
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from lib.glucose_simulator import (
    BaselineHazard, FollowupMode, KernelSpec, MeanFunction, MissingnessSpec,
)
from lib.inference import resolve_threads
from lib.scenario import GroupSpec, ScenarioConfig
from lib.trajectory import TargetRange, TimeGrid, resolve_ranges, resolve_taus

logger = logging.getLogger("Config")

PROFILE_DIR = "scenarios"
METHODS = ("naive", "proposed", "simplified", "oracle")


def _profile_dirs() -> List[Path]:
    return [Path(PROFILE_DIR), Path(__file__).parent.parent / PROFILE_DIR]


class ScenarioProfile:
    """Scenario definition loaded from a JSON profile"""

    def __init__(self, profile: Optional[str] = None):
        """
        Load a scenario profile

        Args:
            profile: file path or profile name in scenarios/ (default: informative)
        """
        if profile is None:
            profile = "informative"

        self.config_path = self._find_profile(profile)
        self.config = self._load()

    def _find_profile(self, profile: str) -> Path:
        """Path as given, then ./scenarios, then the bundled scenarios directory"""
        candidate = Path(profile)
        if candidate.is_file():
            return candidate
        filename = profile if profile.endswith('.json') else f"{profile}.json"
        for directory in _profile_dirs():
            path = directory / filename
            if path.exists():
                return path
        raise FileNotFoundError(f"Scenario profile not found: {profile}")

    def _load(self) -> Dict:
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid JSON in scenario profile {self.config_path}: {e}")
        logger.info(f"[Config] Loaded scenario profile: {self.config_path.name}")
        return config

    def get(self, key: str, default: Any = None) -> Any:
        """Get a value with dot notation, e.g. get('kernel.sigma')"""
        value = self.config
        for k in key.split('.'):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    @property
    def name(self) -> str:
        return self.get('name', self.config_path.stem)

    def get_grid(self) -> TimeGrid:
        return TimeGrid(float(self.get('grid.step_minutes', 5.0)), float(self.get('grid.tau_days', 7.0)))

    def get_kernel(self) -> KernelSpec:
        return KernelSpec(
            sigma=float(self.get('kernel.sigma', 62.0)),
            length_scale=float(self.get('kernel.l', 1.0)),
            period=float(self.get('kernel.p', 1440.0)),
            jitter=float(self.get('kernel.jitter', 1e-8)),
        )

    def get_groups(self) -> List[GroupSpec]:
        groups = self.get('groups', [])
        if not groups:
            raise ValueError(f"Scenario profile {self.config_path.name} defines no groups")
        return [_group_spec(g) for g in groups]

    def to_scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            groups=tuple(self.get_groups()),
            kernel=self.get_kernel(),
            grid=self.get_grid(),
            seed=int(self.get('seed', 0)),
            ground_truth_mu=self.get('ground_truth_mu'),
            ground_truth_n=int(self.get('ground_truth_n', 10000)),
            min_followup_minutes=self.get('min_followup_minutes'),
            name=self.name,
        )


def _mean_function(data: Dict) -> MeanFunction:
    if 'table_minutes' in data:
        return MeanFunction(table_minutes=tuple(map(float, data['table_minutes'])),
                            table_values=tuple(map(float, data['table_values'])))
    default = MeanFunction()
    return MeanFunction(
        baseline=float(data.get('baseline', default.baseline)),
        decay=float(data.get('decay', default.decay)),
        decay_rate=float(data.get('decay_rate', default.decay_rate)),
        amplitude=float(data.get('amplitude', default.amplitude)),
        phase=float(data.get('phase', default.phase)),
    )


def _missingness(data: Dict) -> MissingnessSpec:
    hazard = data.get('baseline_hazard', {})
    return MissingnessSpec(
        intermittent_start_scale=float(data.get('intermittent_start_scale', 3424.0)),
        gap_low=float(data.get('gap_low', 10.0)),
        gap_high=float(data.get('gap_high', 70.0)),
        monotone_mode=FollowupMode(data.get('mode', FollowupMode.COX_INFORMATIVE.value)),
        baseline_hazard=BaselineHazard(float(hazard.get('rate', 0.25)), float(hazard.get('exponent', 0.75))),
        beta=tuple(float(b) for b in data.get('beta', (2.0, 2.0))),
        history_reference_mgdl=float(data.get('history_reference_mgdl', 0.0)),
        mixture_weight=float(data.get('mixture_weight', 0.8)),
        mixture_first=tuple(data.get('mixture_first', (0.0, 2.0))),
        mixture_second=tuple(data.get('mixture_second', (2.0, 9.0))),
        empirical_durations=tuple(float(c) for c in data.get('empirical_durations', ())),
        transformation_scale=float(data.get('transformation_scale', 8.0)),
        transformation_p=float(data.get('transformation_p', 1.0)),
    )


def _group_spec(data: Dict) -> GroupSpec:
    return GroupSpec(
        label=str(data['label']),
        n=int(data.get('n', 200)),
        mean=_mean_function(data.get('mean', {})),
        missing=_missingness(data.get('missing', {})),
        zeta_shift=float(data.get('zeta_shift', 0.0)),
    )


def list_available_scenarios() -> List[str]:
    """Profile names found in the scenario directories"""
    names = set()
    for directory in _profile_dirs():
        if directory.exists():
            names.update(f.stem for f in directory.glob("*.json"))
    return sorted(names)


@dataclass
class RunConfig:
    """Settings of one command-line run"""
    command: str = "estimate"
    readings: List[str] = field(default_factory=list)
    followups: List[str] = field(default_factory=list)
    covariates: List[str] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)
    ranges: Optional[List[str]] = None
    tau_days: Optional[List[Any]] = None
    method: str = "all"
    mode: str = "cox"
    bootstrap_B: int = 200
    seed: Optional[int] = None
    weight_floor: float = 0.01
    output_dir: str = "results"
    scenario: Optional[str] = None
    reps: int = 200
    n: Optional[int] = None
    threads: Optional[int] = None
    step_minutes: float = 5.0
    history_covariate: bool = True
    min_followup_minutes: Optional[float] = None
    ground_truth_n: Optional[int] = None
    alpha: float = 0.05
    allow_nonconverged: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.command not in ("estimate", "compare", "simulate", "replicate"):
            raise ValueError(f"Unknown command '{self.command}'")
        if self.method != "all" and self.method not in METHODS:
            raise ValueError(f"Unknown method '{self.method}'")
        if self.mode not in ("cox", "km"):
            raise ValueError(f"Unknown weight mode '{self.mode}'")
        if self.bootstrap_B == 1 or self.bootstrap_B < 0:
            raise ValueError("bootstrap_B must be 0 (no inference) or at least 2")
        if not 0 < self.weight_floor < 0.5:
            raise ValueError("weight_floor must lie in (0, 0.5)")
        if isinstance(self.tau_days, (int, float, str)):
            self.tau_days = [self.tau_days]
        if isinstance(self.ranges, str):
            self.ranges = [self.ranges]
        if self.ranges:
            resolve_ranges(self.ranges)
        if self.tau_days:
            resolve_taus(self.tau_days)

    @property
    def target_ranges(self) -> List[TargetRange]:
        """Given ranges; consensus6 for analyses of real data, partition3 for simulations"""
        if self.ranges:
            return resolve_ranges(self.ranges)
        preset = "consensus6" if self.command in ("estimate", "compare") else "partition3"
        return resolve_ranges([preset])

    @property
    def taus(self) -> List[float]:
        return resolve_taus(self.tau_days if self.tau_days else ["horizons5"])

    @property
    def effective_seed(self) -> int:
        return 0 if self.seed is None else int(self.seed)

    @property
    def methods(self) -> List[str]:
        return list(METHODS) if self.method == "all" else [self.method]

    @property
    def worker_threads(self) -> int:
        return resolve_threads(self.threads)

    @classmethod
    def from_sources(cls, command: str, flags: Dict[str, Any],
                     config_file: Optional[str] = None) -> 'RunConfig':
        """
        Merge defaults, a JSON config file and explicit flags

        Args:
            command: subcommand name
            flags: parsed flags; None means not given on the command line
            config_file: optional JSON document with any RunConfig field

        Returns:
            RunConfig
        """
        known = {f.name for f in fields(cls)}
        values: Dict[str, Any] = {}
        if config_file:
            try:
                with open(config_file, 'r', encoding='utf-8') as f:
                    file_values = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ValueError(f"Cannot read config file {config_file}: {e}")
            unknown = sorted(set(file_values) - known)
            if unknown:
                raise ValueError(f"Unknown keys in config file {config_file}: {unknown}")
            values.update(file_values)
            logger.info(f"[Config] Loaded run config: {config_file}")
        values.update({k: v for k, v in flags.items() if k in known and v is not None})
        values['command'] = command
        return cls(**values)
