"""Slot-by-slot market simulation across a set of base stations.

Each station carries an exogenous AR(1) local load. Lightly loaded
stations post resource offers spanning the next few slots, priced
inversely to the capacity they expect to have free; overloaded stations
package their excess work into offloading requests and shed it. A
policy maps the posted offers and requests to scheduling schemes, the
simulator validates them against capacity, books the winning frequencies
as binding commitments, and pays out the realized surplus as the slot
reward.

Conventions match core: capacities in Hz, workloads in cycles, prices in
money per Hz per slot, latencies in whole slots from the request's slot.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import (
    REJECT,
    OffloadRequest,
    ResourceOffer,
    SchedulingScheme,
    SlotAction,
    SlotGrid,
    SystemState,
    scheme_surplus,
    slot_reward,
    validate_action,
)

__all__ = [
    "SimConfig",
    "MarketViolation",
    "StepRecord",
    "EpisodeTrace",
    "Simulator",
    "run_episode",
    "episode_invariants",
    "reject_everything",
    "sample_market_instance",
    "sample_refinement_instance",
    "sample_order_sensitive_instance",
]


@dataclass(frozen=True)
class SimConfig:
    """Market parameters; defaults give the standard ten-station setup."""

    n_bs: int = 10
    delta: int = 10
    delta_t: float = 1e-3
    episode_length: int = 200
    group_size: int = 5
    offer_threshold: float = 0.8
    overload_threshold: float = 1.0
    load_mean: float = 0.85
    load_persistence: float = 0.9
    load_noise: float = 0.05
    load_min: float = 0.5
    load_max: float = 1.2
    raw_capacity_low: float = 20e9
    raw_capacity_high: float = 40e9
    kappa: float = 20.0
    min_offer_hz: float = 1e8
    workload_low: float = 5e6
    workload_high: float = 20e6
    workload_min: float = 1e6
    max_utility_low: float = 100.0
    max_utility_high: float = 500.0
    latency_penalty_low: float = 10.0
    latency_penalty_high: float = 90.0

    def __post_init__(self):
        if self.n_bs < 1 or self.delta < 1 or self.episode_length < 1:
            raise ValueError("n_bs, delta and episode_length must be positive")
        if not (0 < self.offer_threshold <= self.overload_threshold):
            raise ValueError("thresholds must satisfy 0 < offer <= overload")
        if self.delta_t <= 0 or self.kappa <= 0:
            raise ValueError("delta_t and kappa must be positive")
        if not (self.load_min <= self.load_mean <= self.load_max):
            raise ValueError("load mean must lie inside the clamp range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


class MarketViolation(Exception):
    """A policy produced an action the market rules reject."""

    def __init__(self, slot: int, violations):
        self.slot = slot
        self.violations = tuple(violations)
        super().__init__(f"invalid action at slot {slot}: {self.violations}")


@dataclass(frozen=True)
class StepRecord:
    slot: int
    state: SystemState
    grid: SlotGrid
    action: SlotAction
    reward: float
    loads: np.ndarray


@dataclass
class EpisodeTrace:
    config: SimConfig
    seed: Optional[int]
    raw_capacity: np.ndarray = None
    steps: List[StepRecord] = field(default_factory=list)

    @property
    def welfare(self) -> float:
        return float(sum(s.reward for s in self.steps))

    @property
    def n_requests(self) -> int:
        return sum(len(s.state.requests) for s in self.steps)

    @property
    def n_accepted(self) -> int:
        return sum(
            sum(1 for sch in s.action.schemes if not sch.rejected)
            for s in self.steps
        )


def reject_everything(state: SystemState, grid: SlotGrid) -> SlotAction:
    """Baseline policy: decline every request."""
    return SlotAction(tuple(
        SchedulingScheme(task_id=r.task_id, target=REJECT,
                         exec_freq=np.zeros(grid.horizon))
        for r in state.requests
    ))


def station_offer(config: SimConfig, bs_id: int, load: float,
                  raw_capacity: float, booked: np.ndarray,
                  slot: int) -> Optional[ResourceOffer]:
    """Offer a lightly loaded station posts, or None.

    Availability projects the AR(1) load forward (slot 0 of the horizon
    is the current, known load), nets out booked commitments, and floors
    thin slots to zero so prices stay bounded.
    """
    if load >= config.offer_threshold:
        return None
    k = np.arange(config.delta)
    proj = config.load_mean + (config.load_persistence ** k) * (load - config.load_mean)
    proj = np.clip(proj, 0.0, 1.0)
    cap = np.maximum(raw_capacity * (1.0 - proj) - booked, 0.0)
    cap[cap < config.min_offer_hz] = 0.0
    if not np.any(cap > 0):
        return None
    price = np.zeros(config.delta)
    positive = cap > 0
    price[positive] = config.kappa / cap[positive]
    return ResourceOffer(bs_id=bs_id, posted_at=slot, capacity=cap, price=price)


class Simulator:
    """Owns station loads, the commitment ledger, and task numbering.

    `init_loads` and `raw_capacity` override the seeded draws, which the
    tests use to stage known market situations.
    """

    def __init__(self, config: SimConfig, seed: Optional[int] = None,
                 init_loads: Optional[Sequence[float]] = None,
                 raw_capacity: Optional[Sequence[float]] = None):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        n = config.n_bs
        if raw_capacity is None:
            self.raw_capacity = self.rng.uniform(
                config.raw_capacity_low, config.raw_capacity_high, size=n)
        else:
            self.raw_capacity = np.asarray(raw_capacity, dtype=float)
            if self.raw_capacity.shape != (n,):
                raise ValueError(f"raw_capacity must have shape ({n},)")
        if init_loads is None:
            self.loads = self.rng.uniform(config.load_min, config.load_max, size=n)
        else:
            self.loads = np.asarray(init_loads, dtype=float).copy()
            if self.loads.shape != (n,):
                raise ValueError(f"init_loads must have shape ({n},)")
        self.slot = 0
        # commitments indexed by absolute slot; sized for one episode
        # plus the horizon tail
        self.committed = np.zeros((n, config.episode_length + config.delta + 1))
        self.next_task_id = 1

    # -- market construction ------------------------------------------------

    def build_offers(self) -> tuple:
        c = self.config
        offers = []
        for i in range(c.n_bs):
            offer = station_offer(
                c, bs_id=i + 1, load=float(self.loads[i]),
                raw_capacity=float(self.raw_capacity[i]),
                booked=self.committed[i, self.slot:self.slot + c.delta],
                slot=self.slot)
            if offer is not None:
                offers.append(offer)
        return tuple(offers)

    def build_requests(self) -> tuple:
        c = self.config
        requests = []
        for i in range(c.n_bs):
            if self.loads[i] <= c.overload_threshold:
                continue
            excess = (self.loads[i] - c.overload_threshold) \
                * self.raw_capacity[i] * c.delta_t
            while excess > 0:
                w = float(self.rng.uniform(c.workload_low, c.workload_high))
                w = min(w, excess)
                excess -= w
                if w < c.workload_min:
                    break
                requests.append(OffloadRequest(
                    task_id=self.next_task_id,
                    origin_bs=i + 1,
                    posted_at=self.slot,
                    workload=w,
                    max_utility=float(self.rng.uniform(
                        c.max_utility_low, c.max_utility_high)),
                    latency_penalty=float(self.rng.uniform(
                        c.latency_penalty_low, c.latency_penalty_high)),
                ))
                self.next_task_id += 1
            # the excess was shed to the market either way
            self.loads[i] = c.overload_threshold
        return tuple(requests)

    # -- stepping -----------------------------------------------------------

    def current_grid(self) -> SlotGrid:
        return SlotGrid(delta_t=self.config.delta_t, horizon=self.config.delta,
                        origin=self.slot)

    def step(self, policy: Callable[[SystemState, SlotGrid], SlotAction]) -> StepRecord:
        c = self.config
        grid = self.current_grid()
        state = SystemState(offers=self.build_offers(),
                            requests=self.build_requests())
        action = policy(state, grid)
        report = validate_action(state, action)
        if not report.ok:
            raise MarketViolation(self.slot, report.violations)
        # book the accepted frequencies as binding commitments
        for scheme in action.schemes:
            if scheme.rejected:
                continue
            self.committed[scheme.target - 1,
                           self.slot:self.slot + c.delta] += scheme.exec_freq
        reward = slot_reward(state, action, grid)
        record = StepRecord(slot=self.slot, state=state, grid=grid,
                            action=action, reward=reward,
                            loads=self.loads.copy())
        # exogenous load update
        noise = self.rng.uniform(-c.load_noise, c.load_noise, size=c.n_bs)
        self.loads = np.clip(
            c.load_mean + c.load_persistence * (self.loads - c.load_mean) + noise,
            c.load_min, c.load_max)
        self.slot += 1
        return record


def run_episode(config: SimConfig, policy, seed: Optional[int] = None,
                episode_length: Optional[int] = None,
                init_loads=None, raw_capacity=None) -> EpisodeTrace:
    sim = Simulator(config, seed=seed, init_loads=init_loads,
                    raw_capacity=raw_capacity)
    trace = EpisodeTrace(config=config, seed=seed,
                         raw_capacity=sim.raw_capacity.copy())
    length = config.episode_length if episode_length is None else episode_length
    if length > config.episode_length:
        raise ValueError("episode_length exceeds the configured ledger size")
    for _ in range(length):
        trace.steps.append(sim.step(policy))
    return trace


def episode_invariants(trace: EpisodeTrace) -> list:
    """Re-audit a finished episode; returns human-readable violations.

    Checks the books from the trace alone: every action revalidates
    against its recorded state, rewards match surpluses recomputed from
    first principles, task ids appear once, loads stay clamped, and a
    commitment ledger replayed from the recorded actions reproduces the
    exact offers each station posted (so bookings really were netted
    out and nothing was double-sold).
    """
    problems = []
    cfg = trace.config
    seen_tasks = set()
    n_steps = len(trace.steps)
    replayed = np.zeros((cfg.n_bs, n_steps + cfg.delta + 1))
    for step in trace.steps:
        report = validate_action(step.state, step.action)
        if not report.ok:
            problems.append(f"slot {step.slot}: action fails revalidation "
                            f"{report.violations}")
        recomputed = sum(
            scheme_surplus(s, step.state, step.grid) for s in step.action.schemes
        )
        if abs(recomputed - step.reward) > 1e-6 * max(1.0, abs(step.reward)):
            problems.append(
                f"slot {step.slot}: reward {step.reward} != recomputed "
                f"{recomputed}")
        for req in step.state.requests:
            if req.task_id in seen_tasks:
                problems.append(f"task {req.task_id} posted twice")
            seen_tasks.add(req.task_id)
        if np.any(step.loads < cfg.load_min - 1e-12) or \
                np.any(step.loads > cfg.load_max + 1e-12):
            problems.append(f"slot {step.slot}: loads escaped the clamp range")
        # replay the ledger: recorded offers must match what the booked
        # state implies, station by station
        if trace.raw_capacity is not None:
            by_bs = {o.bs_id: o for o in step.state.offers}
            for i in range(cfg.n_bs):
                expect = station_offer(
                    cfg, bs_id=i + 1, load=float(step.loads[i]),
                    raw_capacity=float(trace.raw_capacity[i]),
                    booked=replayed[i, step.slot:step.slot + cfg.delta],
                    slot=step.slot)
                got = by_bs.get(i + 1)
                if (expect is None) != (got is None):
                    problems.append(
                        f"slot {step.slot}: bs {i + 1} offer presence mismatch")
                elif expect is not None:
                    if not (np.array_equal(expect.capacity, got.capacity)
                            and np.array_equal(expect.price, got.price)):
                        problems.append(
                            f"slot {step.slot}: bs {i + 1} offer does not "
                            f"match the replayed ledger")
        for scheme in step.action.schemes:
            if scheme.rejected:
                continue
            replayed[scheme.target - 1,
                     step.slot:step.slot + cfg.delta] += scheme.exec_freq
    if np.any(replayed < 0):
        problems.append("negative commitment in the replayed ledger")
    return problems


# ---------------------------------------------------------------------------
# instance families for solver-level studies
#
# These are scaled-down draws from the same distributions the simulator
# uses, shaped so exhaustive search stays tractable.

def sample_market_instance(rng: np.random.Generator, n_tasks: int = 3,
                           delta: int = 6, delta_t: float = 1e-3):
    """Single-station instance at market scale, exhaustively solvable."""
    m = int(rng.integers(1, n_tasks + 1))
    caps = rng.uniform(1e9, 6e9, size=delta)
    prices = 20.0 / caps
    offer = ResourceOffer(bs_id=1, posted_at=0, capacity=caps, price=prices)
    grid = SlotGrid(delta_t=delta_t, horizon=delta, origin=0)
    tasks = []
    for i in range(m):
        tasks.append(OffloadRequest(
            task_id=i + 1, origin_bs=2, posted_at=0,
            workload=float(rng.uniform(2e6, 1e7)),
            max_utility=float(rng.uniform(100.0, 500.0)),
            latency_penalty=float(rng.uniform(10.0, 90.0)),
        ))
    return tasks, offer, grid


def sample_refinement_instance(rng: np.random.Generator, delta: int = 6,
                               delta_t: float = 1e-3):
    """Instance whose tasks all fit with room to spare.

    Total workload stays under half the deliverable work so both the
    full-slot solver and any fractional decision can complete every
    task, which the coarse-versus-fine comparisons require.
    """
    m = int(rng.integers(1, 4))
    caps = rng.uniform(2e9, 6e9, size=delta)
    prices = 20.0 / caps
    offer = ResourceOffer(bs_id=1, posted_at=0, capacity=caps, price=prices)
    grid = SlotGrid(delta_t=delta_t, horizon=delta, origin=0)
    budget = float(np.sum(caps) * delta_t) * 0.5
    tasks = []
    for i in range(m):
        share = budget / m
        tasks.append(OffloadRequest(
            task_id=i + 1, origin_bs=2, posted_at=0,
            workload=float(rng.uniform(0.3, 1.0) * share),
            max_utility=float(rng.uniform(100.0, 500.0)),
            latency_penalty=float(rng.uniform(10.0, 90.0)),
        ))
    return tasks, offer, grid


def sample_order_sensitive_instance(rng: np.random.Generator,
                                    delta_t: float = 1e-3):
    """Two-task single-station instances where processing order moves cost.

    Half the draws ramp prices upward across the horizon and carry tiny
    latency weights: whoever runs first gets the cheap slots, so the
    large task should lead and a size-blind priority rule overpays on
    every such draw. The other half post flat prices with heavy latency
    weights arranged so the classical ratio order is exactly right.
    Capacity is flat and ample, so both tasks always complete under
    either order and cost comparisons are apples to apples. The price
    curve and the weights are all in the observation features, which
    makes the split learnable.
    """
    delta = 4
    cap = float(rng.uniform(4e9, 6e9))
    caps = np.full(delta, cap)
    base = 20.0 / cap
    w_big = float(cap * delta_t * rng.uniform(1.3, 1.6))
    w_small = float(cap * delta_t * rng.uniform(0.25, 0.45))
    if rng.integers(0, 2):
        slope = float(rng.uniform(0.5, 1.0))
        prices = base * (1.0 + slope * np.arange(delta))
        alpha_big = float(rng.uniform(4.0, 6.0))
        # ratio rule still puts the small task first, and loses
        alpha_small = float(
            alpha_big * (w_small / w_big) * rng.uniform(1.05, 1.3))
    else:
        prices = np.full(delta, base)
        alpha_big = float(rng.uniform(40.0, 60.0))
        alpha_small = float(alpha_big * rng.uniform(0.6, 0.9))
    offer = ResourceOffer(bs_id=1, posted_at=0, capacity=caps, price=prices)
    grid = SlotGrid(delta_t=delta_t, horizon=delta, origin=0)
    tasks = [
        OffloadRequest(task_id=1, origin_bs=2, posted_at=0, workload=w_big,
                       max_utility=3000.0, latency_penalty=alpha_big),
        OffloadRequest(task_id=2, origin_bs=2, posted_at=0, workload=w_small,
                       max_utility=3000.0, latency_penalty=alpha_small),
    ]
    return tasks, offer, grid
