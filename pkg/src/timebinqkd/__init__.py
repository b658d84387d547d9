"""One-decoy time-bin QKD toolkit: finite-key analysis, channel modelling,
Monte Carlo simulation, and a complete two-party post-processing stack."""

__version__ = "0.1.0"

from .model import (
    BlockConfig,
    ChannelParams,
    ConfigError,
    DetectorParams,
    ExperimentConfig,
    ProtocolParams,
    SecurityParams,
    ValidationError,
    config_digest,
    parse_config,
    serialize_config,
    validate,
)
from .finitekey import (
    KeyLengthBreakdown,
    Tally,
    binary_entropy,
    secret_key_length,
    secret_key_rate,
)
from .channel import (
    evaluate_config,
    expected_skr,
    expected_tally,
    idealized_bb84_skr,
    raw_key_rate,
)
from .simulate import (
    AliceView,
    BobView,
    SimulationError,
    TrueTally,
    export_bitstreams,
    simulate_block_aggregate,
    simulate_block_pulsewise,
)
from .reconcile import cascade
from .amplify import toeplitz_hash
from .session import (
    SessionReport,
    make_inprocess_pair,
    run_pair,
    run_session,
)
# NB: the optimize *function* stays off the package namespace so that
# ``timebinqkd.optimize`` keeps naming the submodule
from .optimize import OptimizationResult, SearchBounds, optimize_config

__all__ = [
    "__version__",
    "AliceView",
    "BlockConfig",
    "BobView",
    "ChannelParams",
    "ConfigError",
    "DetectorParams",
    "ExperimentConfig",
    "KeyLengthBreakdown",
    "OptimizationResult",
    "ProtocolParams",
    "SearchBounds",
    "SecurityParams",
    "SessionReport",
    "SimulationError",
    "Tally",
    "TrueTally",
    "ValidationError",
    "binary_entropy",
    "cascade",
    "config_digest",
    "evaluate_config",
    "expected_skr",
    "expected_tally",
    "export_bitstreams",
    "idealized_bb84_skr",
    "make_inprocess_pair",
    "optimize_config",
    "parse_config",
    "raw_key_rate",
    "run_pair",
    "run_session",
    "secret_key_length",
    "secret_key_rate",
    "serialize_config",
    "simulate_block_aggregate",
    "simulate_block_pulsewise",
    "toeplitz_hash",
    "validate",
]
