"""Single-station execution planning over a slot window.

Given the tasks routed to one base station and that station's posted
offer, pick for each task a set of slots and frequencies. Plans here are
sequential: each task runs in the window strictly after its
predecessor's completion slot, every chosen slot is used at full
remaining capacity except that a task's most expensive chosen slot is
trimmed so the workload completes exactly, and the completion slot must
carry strictly positive frequency.

`dp_solve` optimizes a fixed processing order in O(m * delta^3 * log
delta); `brute_force_best` exhaustively searches processing orders and
completion assignments and is the ground-truth oracle for small
instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    REJECT,
    OffloadRequest,
    ResourceOffer,
    SchedulingScheme,
    SlotGrid,
    ending_slot,
    surplus,
)

__all__ = [
    "InstanceTooLarge",
    "Fill",
    "TaskExecution",
    "ExecutionPlan",
    "cheapest_fill",
    "smith_order",
    "gap_bound",
    "dp_solve",
    "brute_force_best",
    "solve_bs",
    "refine_instance",
    "sample_fractional_decision",
    "decision_surplus",
    "RatioReport",
    "eval_ratio",
]

NEG_INF = float("-inf")


class InstanceTooLarge(Exception):
    """Exhaustive search refused: the instance exceeds the stated limits."""

    def __init__(self, n_tasks: int, horizon: int, max_tasks: int, max_delta: int):
        super().__init__(
            f"{n_tasks} tasks / {horizon} slots exceeds the exhaustive-search "
            f"limit of {max_tasks} tasks / {max_delta} slots"
        )


def _completion_threshold(workload: float) -> float:
    # mirrors the slack ending_slot grants trimmed fills
    return workload - (1e-9 * abs(workload) + 1e-12)


@dataclass(frozen=True, eq=False)
class Fill:
    """A concrete frequency vector delivering one task's workload."""

    cost: float
    freq: np.ndarray
    end_offset: int


def cheapest_fill(
    offer: ResourceOffer,
    window: tuple,
    workload: float,
    grid: SlotGrid,
) -> Optional[Fill]:
    """Cheapest way to finish `workload` exactly at the window's last slot.

    Walks the window's slots in ascending (price, index) order taking
    full capacity until the cumulative work covers the workload; the
    final slot taken, which is the most expensive one chosen, is trimmed
    so the total matches the workload. Returns None when the window
    cannot deliver the workload or when the trimmed fill does not place
    its completion in the window's last slot.
    """
    a, b = window
    if a < 0 or b >= grid.horizon or a > b:
        raise ValueError(f"window {window} out of range for horizon {grid.horizon}")
    cap = offer.capacity
    price = offer.price
    need = _completion_threshold(workload)
    slots = sorted(range(a, b + 1), key=lambda k: (price[k], k))
    freq = np.zeros(grid.horizon)
    cum = 0.0
    done = False
    for k in slots:
        work_k = cap[k] * grid.delta_t
        if cum + work_k >= need:
            freq[k] = min((workload - cum) / grid.delta_t, cap[k])
            done = True
            break
        freq[k] = cap[k]
        cum += work_k
    if not done:
        return None
    if ending_slot(freq, workload, grid) != grid.origin + b:
        return None
    return Fill(cost=float(np.dot(price, freq)), freq=freq, end_offset=b)


def smith_order(tasks: Sequence[OffloadRequest]) -> tuple:
    """Processing order by descending latency-penalty-to-workload ratio.

    Ties break toward the smaller workload, then the smaller task id,
    so the order is deterministic.
    """
    return tuple(
        sorted(
            range(len(tasks)),
            key=lambda i: (
                -tasks[i].latency_penalty / tasks[i].workload,
                tasks[i].workload,
                tasks[i].task_id,
            ),
        )
    )


def gap_bound(tasks: Sequence[OffloadRequest], offer: ResourceOffer) -> float:
    """Worst-case surplus lost by full-slot (binary) plans versus fractional ones.

    One partially used slot per task, each worth at most the highest
    capacity priced at the highest unit price.
    """
    if len(tasks) == 0:
        return 0.0
    return len(tasks) * float(np.max(offer.capacity)) * float(np.max(offer.price))


@dataclass(frozen=True, eq=False)
class TaskExecution:
    task: OffloadRequest
    freq: np.ndarray
    end_offset: int
    surplus_value: float
    cost: float


@dataclass(eq=False)
class ExecutionPlan:
    """Outcome of planning one station's task batch."""

    bs_id: int
    horizon: int
    tasks: tuple
    order: tuple
    executions: tuple
    dropped: tuple
    total_surplus: float
    latency_cost: float
    utilization_cost: float
    op_count: int = 0

    @property
    def execution_cost(self) -> float:
        return self.latency_cost + self.utilization_cost

    @property
    def mask(self) -> np.ndarray:
        """Slots carrying any work under this plan."""
        total = np.zeros(self.horizon)
        for ex in self.executions:
            total += ex.freq
        return total > 0

    def schemes(self) -> tuple:
        """Per-task schemes in the input task order; dropped tasks reject."""
        executed = {id(ex.task): ex for ex in self.executions}
        out = []
        for task in self.tasks:
            ex = executed.get(id(task))
            if ex is None:
                out.append(
                    SchedulingScheme(
                        task_id=task.task_id,
                        target=REJECT,
                        exec_freq=np.zeros(self.horizon),
                    )
                )
            else:
                out.append(
                    SchedulingScheme(
                        task_id=task.task_id, target=self.bs_id, exec_freq=ex.freq
                    )
                )
        return tuple(out)


def _plan_from_decisions(
    bs_id, horizon, tasks, order, decisions, op_count=0
) -> ExecutionPlan:
    """Assemble an ExecutionPlan from per-position (task_index, fill|None)."""
    executions = []
    dropped = []
    total = 0.0
    lat_cost = 0.0
    util_cost = 0.0
    for idx, fill in decisions:
        task = tasks[idx]
        if fill is None:
            dropped.append(task)
            continue
        s = (
            task.max_utility
            - task.latency_penalty * fill.end_offset
            - fill.cost
        )
        executions.append(
            TaskExecution(
                task=task,
                freq=fill.freq,
                end_offset=fill.end_offset,
                surplus_value=s,
                cost=fill.cost,
            )
        )
        total += s
        lat_cost += task.latency_penalty * fill.end_offset
        util_cost += fill.cost
    return ExecutionPlan(
        bs_id=bs_id,
        horizon=horizon,
        tasks=tuple(tasks),
        order=tuple(order),
        executions=tuple(executions),
        dropped=tuple(dropped),
        total_surplus=total,
        latency_cost=lat_cost,
        utilization_cost=util_cost,
        op_count=op_count,
    )


def _suffix_capacity_work(offer: ResourceOffer, grid: SlotGrid) -> np.ndarray:
    """suffix[k] = total deliverable work in slots k..horizon-1."""
    work = offer.capacity * grid.delta_t
    out = np.zeros(grid.horizon + 1)
    out[:-1] = np.cumsum(work[::-1])[::-1]
    return out


def dp_solve(
    tasks: Sequence[OffloadRequest],
    offer: ResourceOffer,
    grid: SlotGrid,
) -> ExecutionPlan:
    """Optimal sequential plan for tasks in the given processing order.

    Value recursion over (position j, completion slot of the previous
    task): position j may complete at slot t1 using the cheapest fill of
    any window (t0, t1], or be dropped when the remaining capacity after
    t0 cannot cover its workload. Scans run over ascending slots with
    strict improvement, so earlier completion slots win ties.
    """
    m = len(tasks)
    delta = grid.horizon
    if offer.horizon != delta:
        raise ValueError(
            f"offer spans {offer.horizon} slots, grid declares {delta}"
        )
    suffix = _suffix_capacity_work(offer, grid)
    ops = 0

    # Column c encodes "previous task completed at slot c-1"; column 0 is
    # the virtual completion before the horizon.
    Z = np.full((m + 1, delta + 1), NEG_INF)
    Z[0, 0] = 0.0
    back: dict = {}

    for j in range(1, m + 1):
        task = tasks[j - 1]
        need = _completion_threshold(task.workload)
        exec_found = np.zeros(delta + 1, dtype=bool)
        for t1 in range(delta):
            best = NEG_INF
            best_bp = None
            for c in range(0, t1 + 1):  # window start = c, previous end = c-1
                if Z[j - 1, c] == NEG_INF:
                    continue
                length = t1 - c + 1
                ops += length * (1 + max(1, math.ceil(math.log2(length + 1))))
                fill = cheapest_fill(offer, (c, t1), task.workload, grid)
                if fill is None:
                    continue
                exec_found[c] = True
                value = (
                    Z[j - 1, c]
                    + task.max_utility
                    - task.latency_penalty * t1
                    - fill.cost
                )
                if value > best:
                    best = value
                    best_bp = (c, fill)
            if best > NEG_INF:
                Z[j, t1 + 1] = best
                back[(j, t1 + 1)] = ("exec", best_bp[0], best_bp[1])
        # drop transitions: only when execution from that state is impossible
        for c in range(delta + 1):
            if Z[j - 1, c] == NEG_INF:
                continue
            droppable = suffix[c] < need or not exec_found[c]
            if droppable and Z[j - 1, c] > Z[j, c]:
                Z[j, c] = Z[j - 1, c]
                back[(j, c)] = ("drop", c, None)

    final_col = int(np.argmax(Z[m]))
    if Z[m, final_col] == NEG_INF:
        raise AssertionError("no feasible plan and no drop path; unreachable state")

    decisions = []
    col = final_col
    for j in range(m, 0, -1):
        kind, prev_col_or_c, fill = back[(j, col)]
        if kind == "exec":
            decisions.append((j - 1, fill))
            col = prev_col_or_c
        else:
            decisions.append((j - 1, None))
    decisions.reverse()
    return _plan_from_decisions(
        offer.bs_id, delta, tasks, tuple(range(m)), decisions, op_count=ops
    )


def brute_force_best(
    tasks: Sequence[OffloadRequest],
    offer: ResourceOffer,
    grid: SlotGrid,
    max_tasks: int = 4,
    max_delta: int = 8,
) -> ExecutionPlan:
    """Exhaustive search over processing orders and completion assignments.

    For every permutation, every chain of completion slots is expanded
    recursively (memoized on the position/previous-completion state,
    which fully determines the remaining subproblem). Fill semantics and
    the drop rule match dp_solve exactly; the search strategy shares no
    recursion with it.
    """
    m = len(tasks)
    delta = grid.horizon
    if m > max_tasks or delta > max_delta:
        raise InstanceTooLarge(m, delta, max_tasks, max_delta)
    if offer.horizon != delta:
        raise ValueError(f"offer spans {offer.horizon} slots, grid declares {delta}")
    suffix = _suffix_capacity_work(offer, grid)

    # fills[i][(a, b)] for task i, window [a, b]
    fills: list = [dict() for _ in range(m)]
    for i, task in enumerate(tasks):
        for a in range(delta):
            for b in range(a, delta):
                f = cheapest_fill(offer, (a, b), task.workload, grid)
                if f is not None:
                    fills[i][(a, b)] = f

    best_value = NEG_INF
    best_order = None
    best_decisions = None

    for order in permutations(range(m)):
        memo: dict = {}

        def explore(pos: int, start: int):
            """Best (value, decision chain) from `pos` with window starting at `start`."""
            if pos == m:
                return 0.0, ()
            key = (pos, start)
            if key in memo:
                return memo[key]
            idx = order[pos]
            task = tasks[idx]
            need = _completion_threshold(task.workload)
            best = NEG_INF
            best_chain = None
            found_exec = False
            for t1 in range(start, delta):
                fill = fills[idx].get((start, t1))
                if fill is None:
                    continue
                found_exec = True
                tail_value, tail_chain = explore(pos + 1, t1 + 1)
                value = (
                    task.max_utility
                    - task.latency_penalty * t1
                    - fill.cost
                    + tail_value
                )
                if value > best:
                    best = value
                    best_chain = ((idx, fill),) + tail_chain
            if suffix[start] < need or not found_exec:
                tail_value, tail_chain = explore(pos + 1, start)
                if tail_value > best:
                    best = tail_value
                    best_chain = ((idx, None),) + tail_chain
            memo[key] = (best, best_chain)
            return memo[key]

        value, chain = explore(0, 0)
        if value > best_value:
            best_value = value
            best_order = order
            best_decisions = chain

    return _plan_from_decisions(
        offer.bs_id, delta, tasks, best_order, list(best_decisions)
    )


def solve_bs(
    tasks: Sequence[OffloadRequest],
    offer: ResourceOffer,
    grid: SlotGrid,
    order_provider: Optional[Callable] = None,
) -> ExecutionPlan:
    """Order the station's batch, then run the fixed-order DP.

    `order_provider(tasks, offer, grid)` returns a permutation of task
    indices; the default is the smith ratio order. The returned plan's
    `tasks`/`schemes` keep the caller's task order.
    """
    tasks = tuple(tasks)
    if not tasks:
        return ExecutionPlan(
            bs_id=offer.bs_id,
            horizon=grid.horizon,
            tasks=(),
            order=(),
            executions=(),
            dropped=(),
            total_surplus=0.0,
            latency_cost=0.0,
            utilization_cost=0.0,
        )
    if order_provider is None:
        order = smith_order(tasks)
    else:
        order = tuple(order_provider(tasks, offer, grid))
    if sorted(order) != list(range(len(tasks))):
        raise ValueError(f"order {order} is not a permutation of the task batch")
    plan = dp_solve([tasks[i] for i in order], offer, grid)
    return ExecutionPlan(
        bs_id=plan.bs_id,
        horizon=plan.horizon,
        tasks=tasks,
        order=order,
        executions=plan.executions,
        dropped=plan.dropped,
        total_surplus=plan.total_surplus,
        latency_cost=plan.latency_cost,
        utilization_cost=plan.utilization_cost,
        op_count=plan.op_count,
    )


def refine_instance(grid: SlotGrid, offer: ResourceOffer, tasks: Sequence[OffloadRequest]):
    """Split every slot in two, keeping the physical problem identical.

    Each half-slot keeps the original frequency capacity (so per-slot
    deliverable work halves) and carries half the unit price. The linear
    utility is re-expressed on the finer grid with alpha' = alpha/2 and
    u0' = u0 + alpha/2, which aligns slot-end completion times: a plan
    copied onto both halves of its original slots earns exactly the same
    surplus, and finishing in a first half earns the half-slot bonus.
    """
    grid2 = SlotGrid(delta_t=grid.delta_t / 2, horizon=grid.horizon * 2, origin=grid.origin)
    offer2 = ResourceOffer(
        bs_id=offer.bs_id,
        posted_at=offer.posted_at,
        capacity=np.repeat(offer.capacity, 2),
        price=np.repeat(offer.price / 2.0, 2),
    )
    tasks2 = tuple(
        OffloadRequest(
            task_id=t.task_id,
            origin_bs=t.origin_bs,
            posted_at=t.posted_at,
            workload=t.workload,
            max_utility=t.max_utility + t.latency_penalty / 2.0,
            latency_penalty=t.latency_penalty / 2.0,
        )
        for t in tasks
    )
    return grid2, offer2, tasks2


def sample_fractional_decision(
    tasks: Sequence[OffloadRequest],
    offer: ResourceOffer,
    grid: SlotGrid,
    rng: np.random.Generator,
) -> np.ndarray:
    """Random feasible fractional decision completing every task.

    Tasks are visited in a random order; each walks the slots start to
    end taking a uniformly random share of the remaining capacity,
    bounded below so the tail slots can still finish the workload.
    Tasks freely share slots, so the result is generally simultaneous
    and fractional. Requires total capacity work >= total workload.
    """
    m = len(tasks)
    delta = grid.horizon
    rem = offer.capacity.astype(float).copy()
    total_work = float(np.sum(rem) * grid.delta_t)
    total_need = sum(t.workload for t in tasks)
    if total_work < total_need:
        raise ValueError(
            f"instance cannot fit all tasks fractionally: capacity work "
            f"{total_work:.6g} < total workload {total_need:.6g}"
        )
    freqs = np.zeros((m, delta))
    for i in rng.permutation(m):
        need = tasks[i].workload
        suffix = np.concatenate([np.cumsum((rem * grid.delta_t)[::-1])[::-1], [0.0]])
        for k in range(delta):
            cap_work = rem[k] * grid.delta_t
            hi = min(cap_work, need)
            lo = max(0.0, need - suffix[k + 1])
            if k == delta - 1:
                x = need
            else:
                x = rng.uniform(lo, hi) if hi > lo else hi
            if x > 0:
                f = x / grid.delta_t
                freqs[i, k] = f
                rem[k] -= f
                need -= x
            if need <= 1e-9 * tasks[i].workload:
                break
    return freqs


def decision_surplus(
    tasks: Sequence[OffloadRequest],
    offer: ResourceOffer,
    freqs: np.ndarray,
    grid: SlotGrid,
) -> float:
    """Total surplus of an arbitrary per-task frequency matrix."""
    return sum(
        surplus(task, offer, freqs[i], grid) for i, task in enumerate(tasks)
    )


@dataclass(frozen=True)
class RatioReport:
    max_ratio: float
    mean_ratio: float
    ratios: tuple


def eval_ratio(order_provider, instances) -> RatioReport:
    """Execution-cost ratio of a provider's plans against the exhaustive optimum.

    Every instance must be solvable with no dropped task on both sides,
    so minimizing execution cost and maximizing surplus coincide.
    """
    ratios = []
    for tasks, offer, grid in instances:
        reference = brute_force_best(tasks, offer, grid)
        plan = solve_bs(tasks, offer, grid, order_provider)
        if reference.dropped or plan.dropped:
            raise ValueError(
                "eval_ratio requires instances where every task completes"
            )
        ratios.append(plan.execution_cost / reference.execution_cost)
    arr = np.array(ratios)
    return RatioReport(
        max_ratio=float(arr.max()),
        mean_ratio=float(arr.mean()),
        ratios=tuple(arr.tolist()),
    )
