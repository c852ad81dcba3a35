"""Core-stable federated learning: CoreFed aggregation and fairness auditing."""

from .models import LabeledDataset, ModelKind, ModelSpec
from .utility import AgentProfile, UtilityConfig
from .federation import Aggregator, RoundConfig
from .solver import SolverConfig, SolveResult
from .audit import Certificate, UtilityMatrix

__version__ = "0.1.0"

__all__ = [
    "AgentProfile",
    "Aggregator",
    "Certificate",
    "LabeledDataset",
    "ModelKind",
    "ModelSpec",
    "RoundConfig",
    "SolveResult",
    "SolverConfig",
    "UtilityConfig",
    "UtilityMatrix",
]
