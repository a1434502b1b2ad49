"""lenkf: localized ensemble Kalman filters and their continuous formulations.

Five analysis schemes (stochastic EnKF, serial square-root filter, DEnKF,
and two gradient-flow variants integrating the analysis in pseudo-time),
Schur-product covariance localization, a Lorenz-96 twin-experiment
harness, and a CLI for single runs and (inflation, radius) sweeps.
"""

from .ensemble import Ensemble, EnsembleStats, covariance, cross_products, from_stats, inflate, stats
from .errors import (
    DimensionMismatchError,
    DivergenceError,
    IntegrationError,
    LinearSolveError,
    ValidationError,
)
from .filters import (
    AnalysisConfig,
    AnalysisReport,
    MollifiedRun,
    cenkf1,
    cenkf1_nonlinear,
    cenkf2,
    denkf,
    enkf_perturbed,
    esrf_sequential,
    kalman_oracle,
    mollified_assimilate,
    potential,
    run_analysis,
)
from .harness import (
    CycleRecord,
    ExperimentConfig,
    SweepCell,
    SweepResult,
    TwinInputs,
    prepare_inputs,
    read_sweep_csv,
    rmse_of,
    run_sweep,
    run_twin,
    write_cycle_csv,
    write_sweep_csv,
)
from .localization import (
    FULL_SUPPORT,
    HALF_SUPPORT,
    GridDistance,
    RingDistance,
    TaperFunction,
    TaperMatrices,
    build_state_taper,
    build_tapers,
    taper_value,
)
from .models import IntegratorConfig, Lorenz96, propagate, step
from .observation import (
    LinearObservation,
    NonlinearObservation,
    ObsError,
    ObservationBatch,
    synthesize,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig",
    "AnalysisReport",
    "CycleRecord",
    "DimensionMismatchError",
    "DivergenceError",
    "Ensemble",
    "EnsembleStats",
    "ExperimentConfig",
    "FULL_SUPPORT",
    "GridDistance",
    "HALF_SUPPORT",
    "IntegrationError",
    "IntegratorConfig",
    "LinearObservation",
    "LinearSolveError",
    "Lorenz96",
    "MollifiedRun",
    "NonlinearObservation",
    "ObsError",
    "ObservationBatch",
    "RingDistance",
    "SweepCell",
    "SweepResult",
    "TaperFunction",
    "TaperMatrices",
    "TwinInputs",
    "ValidationError",
    "build_state_taper",
    "build_tapers",
    "cenkf1",
    "cenkf1_nonlinear",
    "cenkf2",
    "covariance",
    "cross_products",
    "denkf",
    "enkf_perturbed",
    "esrf_sequential",
    "from_stats",
    "inflate",
    "kalman_oracle",
    "mollified_assimilate",
    "potential",
    "prepare_inputs",
    "propagate",
    "read_sweep_csv",
    "rmse_of",
    "run_analysis",
    "run_sweep",
    "run_twin",
    "stats",
    "step",
    "synthesize",
    "taper_value",
    "write_cycle_csv",
    "write_sweep_csv",
]
