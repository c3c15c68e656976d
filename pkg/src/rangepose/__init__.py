"""Range-only relative pose estimation for multi-agent UWB ranging.

The package is organized as a pipeline: :mod:`rangepose.geometry`
(rigid transforms, antenna arrays, DOP), :mod:`rangepose.sensing`
(range error model, bias calibration, occlusion), :mod:`rangepose.estimator`
(the constrained nonlinear least-squares solver), :mod:`rangepose.protocol`
(constraint envelopes and one-off messaging), :mod:`rangepose.simulator`
(deterministic scenario engine), and :mod:`rangepose.evalio` (metrics,
replay, ablation tables, dataset import). :mod:`rangepose.cli` exposes
the whole chain as the ``rangepose`` command.
"""

from .errors import (
    DecodeError,
    DegeneracyError,
    DomainError,
    ObservabilityError,
    RangePoseError,
    ResourceError,
    SchemaError,
)
from .estimator import (
    AblationFlags,
    EstimationProblem,
    GridBest,
    LossConfig,
    PoseEstimate,
    SmoothingFilter,
    SolverConfig,
    grid_oracle,
    moving_average,
    moving_circular_mean,
    solve,
    solve_with_config,
)
from .evalio import (
    AblationRow,
    EvalRecord,
    ImportResult,
    MetricSummary,
    ablation_table,
    ahe,
    ape,
    export_import,
    import_dataset,
    interpolate_pose,
    replay,
    summarize,
)
from .geometry import (
    AntennaArray,
    DopReport,
    Pose3,
    horn_align,
    pose_from_tuple,
    position_dop,
    wrap_deg,
)
from .protocol import (
    AgentInfo,
    AgentState,
    ConstraintEnvelope,
    EnvelopeMeasurement,
    SwarmMessage,
    check_envelope,
    decode_message,
    encode_message,
    step_agent,
)
from .sensing import (
    BiasFit,
    BiasModel,
    NoiseProfile,
    RangeMeasurement,
    expected_range,
    fit_bias_polynomial,
    occlusion_mask,
    pair_geometry,
    sample_range_errors,
)
from .simulator import (
    PRESETS,
    AgentSpec,
    ChannelModel,
    Scenario,
    SimEvent,
    SimulationLog,
    TrajectorySpec,
    pose_at,
    run,
    uav_circle,
    uav_line,
    ugv_three_agent,
)

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "AblationRow",
    "AgentInfo",
    "AgentSpec",
    "AgentState",
    "AntennaArray",
    "BiasFit",
    "BiasModel",
    "ChannelModel",
    "ConstraintEnvelope",
    "DecodeError",
    "DegeneracyError",
    "DomainError",
    "DopReport",
    "EnvelopeMeasurement",
    "EstimationProblem",
    "EvalRecord",
    "GridBest",
    "ImportResult",
    "LossConfig",
    "MetricSummary",
    "NoiseProfile",
    "ObservabilityError",
    "PRESETS",
    "Pose3",
    "PoseEstimate",
    "RangeMeasurement",
    "RangePoseError",
    "ResourceError",
    "Scenario",
    "SchemaError",
    "SimEvent",
    "SimulationLog",
    "SmoothingFilter",
    "SolverConfig",
    "SwarmMessage",
    "TrajectorySpec",
    "ablation_table",
    "ahe",
    "ape",
    "check_envelope",
    "decode_message",
    "encode_message",
    "expected_range",
    "export_import",
    "fit_bias_polynomial",
    "grid_oracle",
    "horn_align",
    "import_dataset",
    "interpolate_pose",
    "moving_average",
    "moving_circular_mean",
    "occlusion_mask",
    "pair_geometry",
    "pose_at",
    "pose_from_tuple",
    "position_dop",
    "replay",
    "run",
    "sample_range_errors",
    "solve",
    "solve_with_config",
    "step_agent",
    "summarize",
    "uav_circle",
    "uav_line",
    "ugv_three_agent",
    "wrap_deg",
    "__version__",
]
