"""Benchmark schedulers and the paired-seed experiment harness.

The two reference schedulers book contiguous full-capacity windows:
greedy enumerates every (station, window) pair and keeps the best
surplus, random picks a station blind and then a feasible window
uniformly. Both work against remaining capacity, so a slot's combined
bookings never oversubscribe.

The harness runs an experiment matrix of (policy, station count, seed)
cells where every policy inside a cell consumes the identical offer and
request stream, records three welfare views per episode (the policy's
own end-to-end welfare, its allocations re-solved by the execution
solver, and per-station execution costs under fixed vs learned orders),
and times scheduling work normalized to seconds per 200 slots.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .core import (
    REJECT,
    SchedulingScheme,
    SlotAction,
    SlotGrid,
    SystemState,
    consume_capacity,
    surplus,
)
from .ddpg import Allocator, AllocatorPolicy
from .execsolve import solve_bs
from .sim import SimConfig, reject_everything, run_episode

__all__ = [
    "MissingCheckpoint",
    "trimmed_window_fill",
    "feasible_starts",
    "greedy_policy",
    "RandomPolicy",
    "random_policy",
    "reject_all_policy",
    "resolve_stage2",
    "Stage1Resolved",
    "TimedPolicy",
    "ExperimentCell",
    "ExperimentSpec",
    "paired_spec",
    "CellResult",
    "MetricTable",
    "moving_average",
    "linear_fit",
    "default_policy_factory",
    "run_cell",
    "run_matrix",
    "write_cells_csv",
    "write_timing_csv",
    "write_summary_json",
]


class MissingCheckpoint(Exception):
    """The experiment needs a trained policy that was not supplied."""


# ---------------------------------------------------------------------------
# window fills shared by both reference schedulers


def trimmed_window_fill(workload: float, capacity: np.ndarray,
                        grid: SlotGrid, start: int) -> Optional[np.ndarray]:
    """Full-capacity fill beginning at `start`, final slot trimmed.

    Returns the horizon-length frequency vector, or None when the
    remaining capacity from `start` onward cannot cover the workload.
    Windows canonically begin on a slot with spare capacity; interior
    zero-capacity slots are simply bridged.
    """
    if capacity[start] <= 0.0:
        return None
    freq = np.zeros(grid.horizon)
    need = workload
    for k in range(start, grid.horizon):
        slot_work = capacity[k] * grid.delta_t
        if slot_work >= need:
            freq[k] = need / grid.delta_t
            return freq
        freq[k] = capacity[k]
        need -= slot_work
    return None


def feasible_starts(workload: float, capacity: np.ndarray,
                    grid: SlotGrid) -> List[int]:
    """Starts whose trimmed window completes the workload."""
    return [a for a in range(grid.horizon)
            if trimmed_window_fill(workload, capacity, grid, a) is not None]


# ---------------------------------------------------------------------------
# reference schedulers


def greedy_policy(state: SystemState, grid: SlotGrid) -> SlotAction:
    """Arrival order; per request the best (station, window) by surplus.

    Ties break toward the earliest window, then the lowest station id.
    Requests whose best surplus is negative are rejected.
    """
    offers = {o.bs_id: o for o in state.offers}
    remaining = {bs: o.capacity.copy() for bs, o in offers.items()}
    schemes = []
    for req in state.requests:
        best = None  # (surplus, start, bs_id, freq)
        for start in range(grid.horizon):
            for bs in sorted(offers):
                freq = trimmed_window_fill(req.workload, remaining[bs],
                                           grid, start)
                if freq is None:
                    continue
                gain = surplus(req, offers[bs], freq, grid)
                if best is None or gain > best[0]:
                    best = (gain, start, bs, freq)
        if best is None or best[0] < 0.0:
            schemes.append(SchedulingScheme(
                task_id=req.task_id, target=REJECT,
                exec_freq=np.zeros(grid.horizon)))
        else:
            _, _, bs, freq = best
            remaining[bs] = consume_capacity(remaining[bs], freq)
            schemes.append(SchedulingScheme(
                task_id=req.task_id, target=bs, exec_freq=freq))
    return SlotAction(tuple(schemes))


def random_policy(state: SystemState, grid: SlotGrid,
                  rng: np.random.Generator) -> SlotAction:
    """Blind station pick, then a uniform feasible window on it.

    A request whose drawn station cannot complete it is rejected; there
    is no second draw and no surplus filter.
    """
    offers = {o.bs_id: o for o in state.offers}
    remaining = {bs: o.capacity.copy() for bs, o in offers.items()}
    ids = sorted(offers)
    schemes = []
    for req in state.requests:
        freq = None
        if ids:
            bs = ids[int(rng.integers(len(ids)))]
            starts = feasible_starts(req.workload, remaining[bs], grid)
            if starts:
                start = starts[int(rng.integers(len(starts)))]
                freq = trimmed_window_fill(req.workload, remaining[bs],
                                           grid, start)
        if freq is None:
            schemes.append(SchedulingScheme(
                task_id=req.task_id, target=REJECT,
                exec_freq=np.zeros(grid.horizon)))
        else:
            remaining[bs] = consume_capacity(remaining[bs], freq)
            schemes.append(SchedulingScheme(
                task_id=req.task_id, target=bs, exec_freq=freq))
    return SlotAction(tuple(schemes))


class RandomPolicy:
    """random_policy with an owned, reseedable generator."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def __call__(self, state: SystemState, grid: SlotGrid) -> SlotAction:
        return random_policy(state, grid, self.rng)


def reject_all_policy(state: SystemState, grid: SlotGrid) -> SlotAction:
    return reject_everything(state, grid)


# ---------------------------------------------------------------------------
# stage-1 / stage-2 views


def resolve_stage2(state: SystemState, action: SlotAction, grid: SlotGrid,
                   order_provider: Optional[Callable] = None) -> SlotAction:
    """Keep an action's station assignments, redo the per-station plans.

    Each station's accepted batch is re-planned by the execution solver
    against the full posted offer; tasks the solver cannot place come
    back rejected. Scheme order follows the input action.
    """
    offers = {o.bs_id: o for o in state.offers}
    requests = {r.task_id: r for r in state.requests}
    by_target: Dict[int, list] = {}
    for scheme in action.schemes:
        if not scheme.rejected and scheme.target in offers:
            by_target.setdefault(scheme.target, []).append(
                requests[scheme.task_id])
    resolved = {}
    for bs, batch in sorted(by_target.items()):
        plan = solve_bs(batch, offers[bs], grid,
                        order_provider=order_provider)
        for scheme in plan.schemes():
            resolved[scheme.task_id] = scheme
    out = []
    for scheme in action.schemes:
        out.append(resolved.get(scheme.task_id, SchedulingScheme(
            task_id=scheme.task_id, target=REJECT,
            exec_freq=np.zeros(grid.horizon))))
    return SlotAction(tuple(out))


class Stage1Resolved:
    """Wrap a policy so its allocations are always solver-executed."""

    def __init__(self, policy: Callable,
                 order_provider: Optional[Callable] = None):
        self.policy = policy
        self.order_provider = order_provider

    def __call__(self, state: SystemState, grid: SlotGrid) -> SlotAction:
        return resolve_stage2(state, self.policy(state, grid), grid,
                              self.order_provider)


class TimedPolicy:
    """Accumulate wall-clock seconds spent inside the wrapped policy."""

    def __init__(self, policy: Callable):
        self.policy = policy
        self.elapsed = 0.0

    def __call__(self, state: SystemState, grid: SlotGrid) -> SlotAction:
        t0 = time.perf_counter()
        action = self.policy(state, grid)
        self.elapsed += time.perf_counter() - t0
        return action


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass(frozen=True)
class ExperimentCell:
    policy: str
    n_bs: int
    seed: int
    episodes: int = 1

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("a cell needs at least one episode")


@dataclass(frozen=True)
class ExperimentSpec:
    """The experiment matrix plus shared episode settings.

    Within one station count, every policy must carry the identical
    seed multiset so comparisons stay paired.
    """

    cells: tuple
    episode_length: int = 200
    sim_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cells:
            raise ValueError("an experiment needs at least one cell")
        clash = {"n_bs", "episode_length"} & set(self.sim_overrides)
        if clash:
            raise ValueError(f"set {sorted(clash)} on the cells/spec, "
                             "not in sim_overrides")
        by_n: Dict[int, Dict[str, list]] = {}
        for cell in self.cells:
            by_n.setdefault(cell.n_bs, {}).setdefault(
                cell.policy, []).append((cell.seed, cell.episodes))
        for n, plans in by_n.items():
            seedsets = {p: sorted(s) for p, s in plans.items()}
            baseline = next(iter(seedsets.values()))
            for policy, seeds in seedsets.items():
                if seeds != baseline:
                    raise ValueError(
                        f"unpaired seeds at N={n}: {policy} has {seeds}, "
                        f"expected {baseline}")

    def to_dict(self) -> dict:
        return {
            "episode_length": self.episode_length,
            "sim_overrides": dict(self.sim_overrides),
            "cells": [
                {"policy": c.policy, "n_bs": c.n_bs, "seed": c.seed,
                 "episodes": c.episodes}
                for c in self.cells
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        cells = tuple(ExperimentCell(**c) for c in doc["cells"])
        return cls(cells=cells,
                   episode_length=doc.get("episode_length", 200),
                   sim_overrides=doc.get("sim_overrides", {}))


def paired_spec(policies: Sequence[str], n_values: Sequence[int],
                seeds: Sequence[int], episodes: int = 1,
                episode_length: int = 200,
                sim_overrides: Optional[dict] = None) -> ExperimentSpec:
    """Full cross product with identical seeds in every (policy, N) cell."""
    if not seeds:
        raise ValueError("need at least one seed")
    cells = tuple(
        ExperimentCell(policy=p, n_bs=n, seed=s, episodes=episodes)
        for n in n_values for p in policies for s in seeds
    )
    return ExperimentSpec(cells=cells, episode_length=episode_length,
                          sim_overrides=sim_overrides or {})


@dataclass(frozen=True)
class CellResult:
    policy: str
    n_bs: int
    seed: int
    welfare: tuple            # native end-to-end, one entry per episode
    stage1_welfare: tuple     # allocations re-solved by the exec solver
    moving_avg: tuple         # window-50 series over `welfare`
    seconds_per_200: float
    stage2_fixed_cost: Optional[float] = None
    stage2_learned_cost: Optional[float] = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.welfare))

    @property
    def min(self) -> float:
        return float(np.min(self.welfare))

    @property
    def max(self) -> float:
        return float(np.max(self.welfare))


@dataclass
class MetricTable:
    rows: List[CellResult] = field(default_factory=list)

    def cells(self, policy: Optional[str] = None,
              n_bs: Optional[int] = None) -> List[CellResult]:
        return [r for r in self.rows
                if (policy is None or r.policy == policy)
                and (n_bs is None or r.n_bs == n_bs)]

    def mean_welfare(self, policy: str, n_bs: int) -> float:
        rows = self.cells(policy, n_bs)
        if not rows:
            raise KeyError(f"no cell for ({policy}, N={n_bs})")
        return float(np.mean([r.mean for r in rows]))

    def mean_seconds(self, policy: str, n_bs: int) -> float:
        rows = self.cells(policy, n_bs)
        if not rows:
            raise KeyError(f"no cell for ({policy}, N={n_bs})")
        return float(np.mean([r.seconds_per_200 for r in rows]))


def moving_average(xs: Sequence[float], window: int = 50) -> List[float]:
    """Prefix-aware trailing mean: entry i averages the last `window`."""
    if window < 1:
        raise ValueError("window must be positive")
    out = []
    for i in range(len(xs)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(xs[lo:i + 1])))
    return out


def linear_fit(xs: Sequence[float], ys: Sequence[float]):
    """Least-squares line and its R^2."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 2:
        raise ValueError("need at least two points")
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# running cells


def episode_seed(cell_seed: int, episode: int) -> int:
    # distinct streams per episode, identical across policies
    return cell_seed * 7919 + episode


def default_policy_factory(allocators: Optional[dict] = None,
                           order_provider: Optional[Callable] = None,
                           fresh_proposed: bool = False,
                           ddpg_seed: int = 0) -> Callable:
    """Policy lookup for run_matrix.

    `allocators` maps a station count to a trained Allocator. The
    proposed policy without a matching entry raises MissingCheckpoint
    unless `fresh_proposed` builds an untrained allocator on the spot
    (useful for timing runs, meaningless for welfare).
    """
    allocators = allocators or {}

    def make(name: str, cfg: SimConfig, cell: ExperimentCell) -> Callable:
        if name == "greedy":
            return greedy_policy
        if name == "random":
            return RandomPolicy(seed=cell.seed)
        if name == "reject-all":
            return reject_all_policy
        if name == "proposed":
            alloc = allocators.get(cfg.n_bs)
            if alloc is None:
                if not fresh_proposed:
                    raise MissingCheckpoint(
                        f"no allocator checkpoint for N={cfg.n_bs}")
                from .ddpg import DdpgConfig
                alloc = Allocator(cfg, DdpgConfig(seed=ddpg_seed))
            if alloc.sim_cfg.n_bs != cfg.n_bs:
                raise MissingCheckpoint(
                    f"allocator was trained for N={alloc.sim_cfg.n_bs}, "
                    f"cell needs N={cfg.n_bs}")
            return AllocatorPolicy(alloc, order_provider=order_provider)
        raise ValueError(f"unknown policy {name!r}")

    return make


def _stage2_costs(trace, order_provider: Callable):
    """Mean per-batch execution cost, fixed order vs guarded learned."""
    fixed, learned = [], []
    for step in trace.steps:
        offers = {o.bs_id: o for o in step.state.offers}
        requests = {r.task_id: r for r in step.state.requests}
        by_target: Dict[int, list] = {}
        for scheme in step.action.schemes:
            if not scheme.rejected and scheme.target in offers:
                by_target.setdefault(scheme.target, []).append(
                    requests[scheme.task_id])
        for bs, batch in sorted(by_target.items()):
            fixed.append(
                solve_bs(batch, offers[bs], step.grid).execution_cost)
            learned.append(
                solve_bs(batch, offers[bs], step.grid,
                         order_provider=order_provider).execution_cost)
    if not fixed:
        return None, None
    return float(np.mean(fixed)), float(np.mean(learned))


def run_cell(cell: ExperimentCell, spec: ExperimentSpec,
             base_cfg: SimConfig, policy_factory: Callable,
             order_provider: Optional[Callable] = None) -> CellResult:
    cfg = replace(base_cfg, n_bs=cell.n_bs,
                  episode_length=spec.episode_length,
                  **spec.sim_overrides)
    policy = policy_factory(cell.policy, cfg, cell)
    welfares, stage1, seconds = [], [], []
    s2_fixed, s2_learned = [], []
    for e in range(cell.episodes):
        seed = episode_seed(cell.seed, e)
        if hasattr(policy, "reseed"):
            policy.reseed(seed + 1)
        timed = TimedPolicy(policy)
        trace = run_episode(cfg, timed, seed=seed)
        welfares.append(trace.welfare)
        seconds.append(timed.elapsed * 200.0 / len(trace.steps))
        if hasattr(policy, "reseed"):
            policy.reseed(seed + 1)  # same inner draws as the native run
        stage1.append(
            run_episode(cfg, Stage1Resolved(policy), seed=seed).welfare)
        if order_provider is not None:
            f, l = _stage2_costs(trace, order_provider)
            if f is not None:
                s2_fixed.append(f)
                s2_learned.append(l)
    return CellResult(
        policy=cell.policy,
        n_bs=cell.n_bs,
        seed=cell.seed,
        welfare=tuple(welfares),
        stage1_welfare=tuple(stage1),
        moving_avg=tuple(moving_average(welfares)),
        seconds_per_200=float(np.mean(seconds)),
        stage2_fixed_cost=float(np.mean(s2_fixed)) if s2_fixed else None,
        stage2_learned_cost=(float(np.mean(s2_learned))
                             if s2_learned else None),
    )


def run_matrix(spec: ExperimentSpec, base_cfg: SimConfig,
               policy_factory: Callable,
               order_provider: Optional[Callable] = None,
               progress: Optional[Callable[[CellResult], None]] = None
               ) -> MetricTable:
    """Run every cell sequentially and collect the table."""
    table = MetricTable()
    for cell in spec.cells:
        result = run_cell(cell, spec, base_cfg, policy_factory,
                          order_provider=order_provider)
        table.rows.append(result)
        if progress is not None:
            progress(result)
    return table


# ---------------------------------------------------------------------------
# artifacts


def write_cells_csv(path, table: MetricTable) -> None:
    """One row per (cell, episode) with both welfare views and the MA."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "n_bs", "seed", "episode", "welfare",
                         "stage1_welfare", "moving_avg"])
        for row in table.rows:
            for e, (w, s1, ma) in enumerate(zip(row.welfare,
                                                row.stage1_welfare,
                                                row.moving_avg)):
                writer.writerow([row.policy, row.n_bs, row.seed, e,
                                 repr(w), repr(s1), repr(ma)])


def write_timing_csv(path, table: MetricTable) -> None:
    """Policy-by-N grid of mean seconds per 200 slots."""
    policies = sorted({r.policy for r in table.rows})
    ns = sorted({r.n_bs for r in table.rows})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy"] + [f"n={n}" for n in ns])
        for policy in policies:
            line = [policy]
            for n in ns:
                rows = table.cells(policy, n)
                line.append(repr(float(np.mean(
                    [r.seconds_per_200 for r in rows]))) if rows else "")
            writer.writerow(line)


def write_summary_json(path, table: MetricTable) -> None:
    doc = []
    for r in table.rows:
        doc.append({
            "policy": r.policy,
            "n_bs": r.n_bs,
            "seed": r.seed,
            "mean": r.mean,
            "min": r.min,
            "max": r.max,
            "stage1_mean": float(np.mean(r.stage1_welfare)),
            "seconds_per_200": r.seconds_per_200,
            "stage2_fixed_cost": r.stage2_fixed_cost,
            "stage2_learned_cost": r.stage2_learned_cost,
        })
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
