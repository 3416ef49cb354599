"""A self-evolving agent runtime with elastic memory and a deterministic experiment harness."""

from .core import (
    ActionKind,
    ActionRecord,
    ActionVariant,
    FinalStatus,
    Outcome,
    OutcomeStatus,
    TaskSpec,
    Trajectory,
    token_count,
)
from .decision import Agent, RunConfig

__all__ = [
    "ActionKind",
    "ActionRecord",
    "ActionVariant",
    "Agent",
    "FinalStatus",
    "Outcome",
    "OutcomeStatus",
    "RunConfig",
    "TaskSpec",
    "Trajectory",
    "token_count",
]

__version__ = "0.1.0"
