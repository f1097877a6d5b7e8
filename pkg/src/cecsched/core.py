"""Value types and arithmetic for the slot-based edge offloading market.

Conventions used across the package: frequencies are in Hz, workloads in
CPU cycles, prices in money per Hz per slot, latencies in whole slots.
A slot grid covers `horizon` slots starting at the absolute slot index
`origin`; slot offset k refers to absolute slot origin + k.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "REJECT",
    "CAPACITY_TOL",
    "BOOKING_MARGIN_HZ",
    "consume_capacity",
    "IncompleteExecution",
    "SlotGrid",
    "ResourceOffer",
    "OffloadRequest",
    "SchedulingScheme",
    "SlotAction",
    "SystemState",
    "ValidationReport",
    "utility",
    "ending_slot",
    "surplus",
    "scheme_surplus",
    "validate_action",
    "slot_reward",
    "discounted_return",
    "instance_to_json",
    "instance_from_json",
    "save_instance",
    "load_instance",
]

# Target id meaning "do not offload"; real base stations use ids >= 1.
REJECT = 0

# Absolute feasibility tolerance on frequencies, in Hz.
CAPACITY_TOL = 1e-9

# Headroom shaved off a slot's leftover capacity after each booking, in
# Hz. One ulp at typical capacities (~5e9 Hz) is ~1e-6 Hz, far above
# CAPACITY_TOL, so a later booking taking the full float residual
# `a - b` can push the audited sum `b + (a - b)` past the posted `a`.
# This margin absorbs that; economically it is ~1e-12 of a slot.
BOOKING_MARGIN_HZ = 1e-3


def consume_capacity(remaining: np.ndarray, freq: np.ndarray,
                     margin: float = BOOKING_MARGIN_HZ) -> np.ndarray:
    """Net a booking out of leftover capacity, down-rounded for safety.

    Slots the booking touched lose `margin` Hz beyond the booked
    frequency, so re-posting the remainder to later bookings can never
    let their float sum exceed the originally posted capacity.
    """
    shave = np.where(freq > 0.0, margin, 0.0)
    return np.maximum(remaining - freq - shave, 0.0)


class IncompleteExecution(Exception):
    """An execution vector never accumulates the task's full workload."""

    def __init__(self, task_id: int, delivered: float, workload: float):
        self.task_id = task_id
        self.delivered = delivered
        self.workload = workload
        super().__init__(
            f"task {task_id}: delivered {delivered:.6g} of {workload:.6g} cycles"
        )


@dataclass(frozen=True)
class SlotGrid:
    """Discrete time axis: `horizon` slots of `delta_t` seconds from `origin`."""

    delta_t: float
    horizon: int
    origin: int = 0

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ValueError(f"delta_t must be positive, got {self.delta_t}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")

    def offsets(self) -> range:
        return range(self.horizon)


def _as_float_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ResourceOffer:
    """Per-slot capacity (Hz) and unit price a base station posts when idle.

    capacity[k] and price[k] describe slot posted_at + k. A slot the
    station cannot serve carries capacity 0 and price 0.
    """

    bs_id: int
    posted_at: int
    capacity: np.ndarray
    price: np.ndarray

    def __post_init__(self):
        cap = _as_float_vector(self.capacity, "capacity")
        prc = _as_float_vector(self.price, "price")
        if cap.shape != prc.shape:
            raise ValueError(
                f"capacity and price lengths differ: {cap.shape} vs {prc.shape}"
            )
        if self.bs_id < 1:
            raise ValueError(f"bs_id must be >= 1, got {self.bs_id}")
        if np.any(cap < 0) or np.any(prc < 0):
            raise ValueError("capacity and price entries must be nonnegative")
        object.__setattr__(self, "capacity", cap)
        object.__setattr__(self, "price", prc)

    @property
    def horizon(self) -> int:
        return self.capacity.shape[0]


@dataclass(frozen=True)
class OffloadRequest:
    """A task an overloaded station asks the market to run elsewhere.

    Utility is linear in latency: max_utility - latency_penalty * l,
    where l counts whole slots from the posting slot.
    """

    task_id: int
    origin_bs: int
    posted_at: int
    workload: float
    max_utility: float
    latency_penalty: float

    def __post_init__(self):
        if self.workload <= 0:
            raise ValueError(f"workload must be positive, got {self.workload}")
        if self.latency_penalty < 0:
            raise ValueError("latency_penalty must be nonnegative")


@dataclass(frozen=True, eq=False)
class SchedulingScheme:
    """One task's decision: target station (or REJECT) plus its frequency vector."""

    task_id: int
    target: int
    exec_freq: np.ndarray

    def __post_init__(self):
        freq = _as_float_vector(self.exec_freq, "exec_freq")
        if self.target < 0:
            raise ValueError(f"target must be >= 0, got {self.target}")
        if np.any(freq < 0):
            raise ValueError("exec_freq entries must be nonnegative")
        if self.target == REJECT and np.any(freq != 0):
            raise ValueError("a rejected task must carry an all-zero exec_freq")
        object.__setattr__(self, "exec_freq", freq)

    @property
    def rejected(self) -> bool:
        return self.target == REJECT


@dataclass(frozen=True, eq=False)
class SlotAction:
    """All scheduling schemes issued for one slot's request batch."""

    schemes: tuple

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        seen = set()
        for s in self.schemes:
            if s.task_id in seen:
                raise ValueError(f"duplicate scheme for task {s.task_id}")
            seen.add(s.task_id)


@dataclass(frozen=True, eq=False)
class SystemState:
    """Everything posted in one slot: all offers plus the request batch."""

    offers: tuple
    requests: tuple

    def __post_init__(self):
        object.__setattr__(self, "offers", tuple(self.offers))
        object.__setattr__(self, "requests", tuple(self.requests))
        stamps = {o.posted_at for o in self.offers} | {
            r.posted_at for r in self.requests
        }
        if len(stamps) > 1:
            raise ValueError(f"mixed posting slots in one state: {sorted(stamps)}")
        ids = [o.bs_id for o in self.offers]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate offers for one base station")

    def offer_by_bs(self, bs_id: int) -> ResourceOffer:
        for o in self.offers:
            if o.bs_id == bs_id:
                return o
        raise KeyError(f"no offer posted by base station {bs_id}")

    def request_by_id(self, task_id: int) -> OffloadRequest:
        for r in self.requests:
            if r.task_id == task_id:
                return r
        raise KeyError(f"no request with task id {task_id}")


def utility(req: OffloadRequest, latency: int) -> float:
    """Linear utility of finishing `req` after `latency` whole slots."""
    if latency < 0:
        raise ValueError(f"latency must be >= 0, got {latency}")
    return req.max_utility - req.latency_penalty * latency


def ending_slot(freq: np.ndarray, workload: float, grid: SlotGrid) -> Optional[int]:
    """Absolute slot where cumulative freq * delta_t first reaches `workload`.

    Returns None when the vector never delivers the full workload. The
    comparison allows a relative slack of 1e-9 so trimmed fills whose
    float sum lands a hair under the workload still count as complete.
    """
    freq = np.asarray(freq, dtype=np.float64)
    need = workload - (1e-9 * abs(workload) + 1e-12)
    total = 0.0
    for k in range(freq.shape[0]):
        total += freq[k] * grid.delta_t
        if total >= need:
            return grid.origin + k
    return None


def surplus(
    req: OffloadRequest, offer: ResourceOffer, freq: np.ndarray, grid: SlotGrid
) -> float:
    """Utility at the realized latency minus the price-weighted frequency cost."""
    end = ending_slot(freq, req.workload, grid)
    if end is None:
        delivered = float(np.sum(np.asarray(freq) * grid.delta_t))
        raise IncompleteExecution(req.task_id, delivered, req.workload)
    latency = end - grid.origin
    cost = float(np.dot(offer.price, np.asarray(freq, dtype=np.float64)))
    return utility(req, latency) - cost


def scheme_surplus(scheme: SchedulingScheme, state: SystemState, grid: SlotGrid) -> float:
    """Surplus of one scheme within a state; rejection is worth exactly 0."""
    if scheme.rejected:
        return 0.0
    req = state.request_by_id(scheme.task_id)
    offer = state.offer_by_bs(scheme.target)
    return surplus(req, offer, scheme.exec_freq, grid)


@dataclass(frozen=True)
class ValidationReport:
    """Per-slot capacity audit; `violations` holds (bs_id, offset, overage_hz)."""

    ok: bool
    violations: tuple

    def __bool__(self) -> bool:
        return self.ok


def validate_action(state: SystemState, action: SlotAction) -> ValidationReport:
    """Check summed granted frequency against every offer's capacity.

    An overage within CAPACITY_TOL (absolute Hz) passes. Targeting a
    station that posted no offer counts as a violation on every slot the
    scheme uses.
    """
    violations = []
    by_target: dict = {}
    for s in action.schemes:
        if s.rejected:
            continue
        by_target.setdefault(s.target, []).append(s)
    for target, schemes in sorted(by_target.items()):
        try:
            offer = state.offer_by_bs(target)
        except KeyError:
            for s in schemes:
                for k in np.nonzero(s.exec_freq > 0)[0]:
                    violations.append((target, int(k), float(s.exec_freq[k])))
            continue
        total = np.zeros(offer.horizon)
        for s in schemes:
            if s.exec_freq.shape[0] != offer.horizon:
                raise ValueError(
                    f"scheme for task {s.task_id} spans {s.exec_freq.shape[0]} "
                    f"slots, offer spans {offer.horizon}"
                )
            total += s.exec_freq
        over = total - offer.capacity
        for k in np.nonzero(over > CAPACITY_TOL)[0]:
            violations.append((target, int(k), float(over[k])))
    return ValidationReport(ok=not violations, violations=tuple(violations))


def slot_reward(state: SystemState, action: SlotAction, grid: SlotGrid) -> float:
    """Social welfare of one slot: sum of scheme surpluses, rejects contributing 0."""
    return sum(scheme_surplus(s, state, grid) for s in action.schemes)


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of gamma**t * rewards[t]."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    total = 0.0
    weight = 1.0
    for r in rewards:
        total += weight * r
        weight *= gamma
    return total


# ---------------------------------------------------------------------------
# Instance interchange format
# ---------------------------------------------------------------------------

def instance_to_json(grid: SlotGrid, state: SystemState) -> dict:
    """Serialize a slot grid plus system state into the interchange dict."""
    return {
        "delta_t": grid.delta_t,
        "delta": grid.horizon,
        "offers": [
            {
                "bs": o.bs_id,
                "capacity": [float(c) for c in o.capacity],
                "price": [float(p) for p in o.price],
            }
            for o in state.offers
        ],
        "requests": [
            {
                "id": r.task_id,
                "origin": r.origin_bs,
                "w": r.workload,
                "u0": r.max_utility,
                "alpha": r.latency_penalty,
            }
            for r in state.requests
        ],
    }


def instance_from_json(doc: dict):
    """Inverse of instance_to_json; returns (grid, state) with origin slot 0."""
    grid = SlotGrid(delta_t=float(doc["delta_t"]), horizon=int(doc["delta"]))
    offers = []
    for o in doc["offers"]:
        cap = _as_float_vector(o["capacity"], "capacity")
        if cap.shape[0] != grid.horizon:
            raise ValueError(
                f"offer for bs {o['bs']} spans {cap.shape[0]} slots, "
                f"instance declares delta={grid.horizon}"
            )
        offers.append(
            ResourceOffer(
                bs_id=int(o["bs"]),
                posted_at=0,
                capacity=o["capacity"],
                price=o["price"],
            )
        )
    requests = [
        OffloadRequest(
            task_id=int(r["id"]),
            origin_bs=int(r["origin"]),
            posted_at=0,
            workload=float(r["w"]),
            max_utility=float(r["u0"]),
            latency_penalty=float(r["alpha"]),
        )
        for r in doc["requests"]
    ]
    return grid, SystemState(offers=tuple(offers), requests=tuple(requests))


def save_instance(path, grid: SlotGrid, state: SystemState) -> None:
    Path(path).write_text(json.dumps(instance_to_json(grid, state), indent=2))


def load_instance(path):
    return instance_from_json(json.loads(Path(path).read_text()))
