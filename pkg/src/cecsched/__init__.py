"""Two-stage scheduling for collaborative edge computing.

Library layout:

- core:        market value types, surplus arithmetic, instance JSON format
- execsolve:   slot-utilization DP, brute-force oracle, ordering heuristics
- nn:          dense networks, Adam, softmax, checkpoint format
- ddpg:        actor-critic allocator over grouped requests
- orderpolicy: pointer-style processing-order policy with REINFORCE
- sim:         base-station market simulator
- bench:       baseline policies and the experiment harness
"""
from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    REJECT,
    CAPACITY_TOL,
    IncompleteExecution,
    SlotGrid,
    ResourceOffer,
    OffloadRequest,
    SchedulingScheme,
    SlotAction,
    SystemState,
    utility,
    ending_slot,
    surplus,
    slot_reward,
    discounted_return,
)

__all__ = [
    "__version__",
    "REJECT",
    "CAPACITY_TOL",
    "IncompleteExecution",
    "SlotGrid",
    "ResourceOffer",
    "OffloadRequest",
    "SchedulingScheme",
    "SlotAction",
    "SystemState",
    "utility",
    "ending_slot",
    "surplus",
    "slot_reward",
    "discounted_return",
]
