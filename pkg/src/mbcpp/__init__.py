"""Multi-band carrier-phase positioning: bounds, estimator and simulation harness."""

__version__ = "0.1.0"

from .scenario import BandConfig, ConfigError, GeometryError, ScenarioConfig, load_scenario, sample_default_scenario
from .model import IdentifiabilityError, MeasurementSet, build_matrices, synthesize_measurements
from .bounds import BoundReport, RankError, fused_single_band_peb, micrb
from .ils import IlsError, IlsProblem, solve
from .estimator import EstimatorConfig, EstimateResult, estimate

__all__ = [
    "BandConfig",
    "BoundReport",
    "ConfigError",
    "EstimateResult",
    "EstimatorConfig",
    "GeometryError",
    "IdentifiabilityError",
    "IlsError",
    "IlsProblem",
    "MeasurementSet",
    "RankError",
    "ScenarioConfig",
    "build_matrices",
    "estimate",
    "fused_single_band_peb",
    "load_scenario",
    "micrb",
    "sample_default_scenario",
    "solve",
    "synthesize_measurements",
]
