"""Desk-scale simulator for parameter-sharing federated learning.

A frozen shared encoder plus per-client channel-pruned task predictors,
aggregated with backbone-assisted recovery, alongside classic baselines,
with exact parameter/FLOP/communication ledgers.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .config import (
    ExperimentConfig,
    TaskSpec,
    default_backbone,
    default_tasks,
    load_config,
    save_config,
)
from .errors import (
    AggregationError,
    ConfigurationError,
    DataFormatError,
    FedLPSError,
    InputError,
    PartitionError,
    ProtocolError,
    StructuralError,
    UsageError,
)
from .federation import LEVEL_RATIOS, ClientProfile, assign_level
from .harness import run_experiment, run_one, sweep
from .model import BackboneModel, split_backbone
from .pruning import ChannelMask, build_mask
from .serialize import CheckpointState, load_checkpoint, save_checkpoint

__all__ = [
    "AggregationError",
    "BackboneModel",
    "ChannelMask",
    "CheckpointState",
    "ClientProfile",
    "ConfigurationError",
    "DataFormatError",
    "ExperimentConfig",
    "FedLPSError",
    "InputError",
    "LEVEL_RATIOS",
    "PartitionError",
    "ProtocolError",
    "StructuralError",
    "TaskSpec",
    "UsageError",
    "assign_level",
    "build_mask",
    "default_backbone",
    "default_tasks",
    "load_checkpoint",
    "load_config",
    "run_experiment",
    "run_one",
    "save_checkpoint",
    "save_config",
    "split_backbone",
    "sweep",
    "__version__",
]
