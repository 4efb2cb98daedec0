"""Three-level transmon relaxation analysis and TLS defect tracking."""

__version__ = "0.1.0"

from .dynamics import (
    DecayRates,
    HeatingRates,
    PopulationState,
    PopulationTrace,
    bosonic_ratio,
    closed_form_trace,
    integrate_rate_equations,
    populations_closed_form,
)
from .errors import (
    FitDivergedError,
    InvalidObjectiveError,
    InvalidParameterError,
    MitigationUnstableError,
    ScenarioSchemaError,
    TlstrackError,
    UndefinedCorrelationError,
)
from .optimize import (
    FitOptions,
    FitResult,
    LeastSquaresProblem,
    grid_refine_1d,
    levenberg_marquardt,
)
from .readout import (
    ConfusionMatrix,
    IqBlobModel,
    ShotRecord,
    assignment_fidelity,
    classify,
    equilateral_blobs,
    mitigate,
    mitigate_trace,
    simulate_confusion_matrix,
)
from .synth import (
    DriftProcess,
    Scenario,
    TlsTruth,
    bundled_scenario,
    generate_trajectories,
    load_scenario,
    synthesize_experiment,
    write_run_directory,
)
from .tls import (
    DeviceFrequencies,
    TlsDefect,
    TlsParameterSet,
    lorentzian_density,
    rates_with_background,
    transition_rates,
)
from .trace_fit import TraceFit, default_delay_grid, fit_trace, initial_guess
from .tracker import (
    LifetimeSeries,
    TrackerConfig,
    TrackerFit,
    lifetime_correlation,
    reconstruct_trajectory,
    select_model,
    track_tls,
)

__all__ = [name for name in dir() if not name.startswith("_")]
