"""Discrete-event simulation of probabilistic task pruning and task merging."""

from .engine import ConfigError, SimConfig, Simulator, run
from .kernels import BACKEND
from .merger import MergeConfig
from .metrics import MachineRates, MetricsReport
from .pmf import Pmf
from .pruner import PrunerConfig
from .workload import ArrivalConfig, PetMatrix, TaskSpec, generate_pet, generate_trace

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ArrivalConfig",
    "ConfigError",
    "MachineRates",
    "MergeConfig",
    "MetricsReport",
    "PetMatrix",
    "Pmf",
    "PrunerConfig",
    "SimConfig",
    "Simulator",
    "TaskSpec",
    "generate_pet",
    "generate_trace",
    "run",
]
