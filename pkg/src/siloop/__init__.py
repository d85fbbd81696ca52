"""Software-in-the-loop simulation of eco-adaptive cruise control.

The package closes the loop between a longitudinal vehicle plant, a
signalized-corridor traffic environment, idealized sensing, a virtual
message bus, and a model-predictive cruise controller that avoids
friction braking wherever physics allows.  Everything runs in process:
deterministic lockstep for reproducible experiments, or a two-actor
soft-real-time mode that exercises the same bus contracts under real
scheduling.

Typical use goes through scenarios:

    from siloop import bundled_scenario, run_episode, write_trace

    episode = run_episode(bundled_scenario("urban"))
    write_trace(episode.records, "urban_trace.csv")

The `siloop` console script wraps the same flow (`run`, `plot`,
`verify` subcommands).
"""

from .coasting import CoastingSet, coast_rollout_safe, compute_coasting_set
from .harness import (
    EpisodeResult,
    TraceRecord,
    read_trace,
    run_episode,
    trace_csv,
    write_trace,
)
from .mpc import EcoAccController, MpcConfig, MpcSolution, StepDiagnostics, build_qp
from .plant import ControlInput, PlantParams, PlantState, plant_step, resistive_force
from .plots import emit_plots
from .qp import QpProblem, QpResult, SolverStatus, solve_qp
from .scenario import (
    Scenario,
    ScenarioError,
    bundled_scenario,
    load_scenario,
    parse_scenario,
)
from .sensing import (
    FrontPrediction,
    LeadPlan,
    RadarReading,
    SpatSnapshot,
    constant_prediction,
    predict_front_exact,
    predict_front_worst_case,
    radar_measure,
    spat_snapshot,
)
from .signals import Corridor, Phase, SignalPlan, green_window, phase_at
from .traffic import (
    CollisionError,
    IdmParams,
    TargetVehicle,
    TrafficDemand,
    TrafficState,
    idm_accel,
    traffic_step,
)
from .vbus import (
    BusConfig,
    BusMode,
    Frame,
    FrameKind,
    VirtualBus,
    read_frame_log,
)
from .verify import CheckResult, VerifyReport, verify

__version__ = "0.1.0"

__all__ = [
    "BusConfig",
    "BusMode",
    "CheckResult",
    "CoastingSet",
    "CollisionError",
    "ControlInput",
    "Corridor",
    "EcoAccController",
    "EpisodeResult",
    "Frame",
    "FrameKind",
    "FrontPrediction",
    "IdmParams",
    "LeadPlan",
    "MpcConfig",
    "MpcSolution",
    "PlantParams",
    "PlantState",
    "Phase",
    "QpProblem",
    "QpResult",
    "RadarReading",
    "Scenario",
    "ScenarioError",
    "SignalPlan",
    "SolverStatus",
    "SpatSnapshot",
    "StepDiagnostics",
    "TargetVehicle",
    "TraceRecord",
    "TrafficDemand",
    "TrafficState",
    "VerifyReport",
    "VirtualBus",
    "build_qp",
    "bundled_scenario",
    "coast_rollout_safe",
    "compute_coasting_set",
    "constant_prediction",
    "emit_plots",
    "green_window",
    "idm_accel",
    "load_scenario",
    "parse_scenario",
    "phase_at",
    "plant_step",
    "predict_front_exact",
    "predict_front_worst_case",
    "radar_measure",
    "read_frame_log",
    "read_trace",
    "resistive_force",
    "run_episode",
    "solve_qp",
    "spat_snapshot",
    "trace_csv",
    "traffic_step",
    "verify",
    "write_trace",
    "__version__",
]
