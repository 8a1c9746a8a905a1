"""demfit: distributed EM estimation for linear mixed-effects models."""

from .datagen import SimDesign, canonical_sigma, partition, simulate
from .diagnostics import (
    ErrReport,
    aggregate_rmse,
    compute_err,
    empirical_gamma,
    ratio_report,
)
from .lmm import (
    InfoMatrices,
    LmmModel,
    Sample,
    SpeedReport,
    Theta,
    information_matrices,
    speed_matrices,
)
from .model import (
    ConvergenceMonitor,
    ModelContract,
    NumericalDomainError,
    ProtocolError,
    RankDeficiencyError,
    SuffStats,
    Trace,
    aggregate_stats,
    check_monotone_F,
    evaluate_F,
)
from .runtime import RunConfig, deterministic_schedule, run_dem, run_ecme0, run_scheme

__version__ = "0.1.0"

__all__ = [
    "SimDesign",
    "canonical_sigma",
    "partition",
    "simulate",
    "ErrReport",
    "aggregate_rmse",
    "compute_err",
    "empirical_gamma",
    "ratio_report",
    "InfoMatrices",
    "LmmModel",
    "Sample",
    "SpeedReport",
    "Theta",
    "information_matrices",
    "speed_matrices",
    "ConvergenceMonitor",
    "ModelContract",
    "NumericalDomainError",
    "ProtocolError",
    "RankDeficiencyError",
    "SuffStats",
    "Trace",
    "aggregate_stats",
    "check_monotone_F",
    "evaluate_F",
    "RunConfig",
    "deterministic_schedule",
    "run_dem",
    "run_ecme0",
    "run_scheme",
    "__version__",
]
