"""Probability-density-shaping MPC for a stochastic tendon-driven soft finger."""

__version__ = "0.1.0"

from .finger_model import (  # noqa: F401
    FingerGeometry,
    FingerState,
    LogNormalShape,
    ParameterShapes,
    ReducedModel,
    ViscoelasticParams,
    median_params,
)
from .fpe_solver import (  # noqa: F401
    Grid2D,
    GridPdf,
    SchemeViolationError,
    gaussian_pdf,
    l2_distance,
    moments,
    step,
)
from .fpe_mpc import (  # noqa: F401
    EpisodeResult,
    MpcConfig,
    ReferenceSpec,
    reachability_sweep,
    run_episode,
)
from .monte_carlo import (  # noqa: F401
    ConfidenceReport,
    SampledEnsemble,
    confidence_report,
    run_ensemble,
    sample_parameters,
    simulate_trajectory,
)
from .scenario import Scenario, ScenarioError, parse_scenario, serialize_scenario  # noqa: F401
