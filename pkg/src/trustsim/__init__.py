"""Agent-based simulation of recommendation strategies, consumer trust and provider profit."""
from .consumer import ConsumerState, PositionBias, expectation_threshold
from .data import ItemCatalog, RatingStore, load_ratings, sample_profits
from .engine import RunConfig, RunResult, StepMetrics, grid, run_experiment, run_replication
from .predictor import FactorizationRegressor
from .social import ReputationLedger
from .strategy import STRATEGIES, StrategyConfig, recommend

__all__ = [
    "ConsumerState",
    "FactorizationRegressor",
    "ItemCatalog",
    "PositionBias",
    "RatingStore",
    "ReputationLedger",
    "RunConfig",
    "RunResult",
    "STRATEGIES",
    "StepMetrics",
    "StrategyConfig",
    "expectation_threshold",
    "grid",
    "load_ratings",
    "recommend",
    "run_experiment",
    "run_replication",
    "sample_profits",
]
__version__ = "0.1.0"
