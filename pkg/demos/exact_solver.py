"""The per-station solver against its exhaustive oracle.

The value recursion books tasks one after another, each buying the
cheapest slots of some window. We check it against brute force over
every order and slot subset, then push on the two theory levers: the
price of forcing binary slot usage, and how that price shrinks as the
grid is refined.
"""
import numpy as np

from cecsched.core import OffloadRequest, ResourceOffer, SlotGrid
from cecsched.execsolve import (
    brute_force_best,
    decision_surplus,
    dp_solve,
    gap_bound,
    refine_instance,
    sample_fractional_decision,
    solve_bs,
)

grid = SlotGrid(delta_t=1.0, horizon=3)
offer = ResourceOffer(bs_id=1, posted_at=0,
                      capacity=(4.0, 4.0, 4.0), price=(1.0, 3.0, 1.0))
tasks = [
    OffloadRequest(task_id=i, origin_bs=2, posted_at=0, workload=4.0,
                   max_utility=100.0, latency_penalty=10.0)
    for i in (1, 2)
]

print("== sequential DP vs. exhaustive search ==")
plan = dp_solve(tasks, offer, grid)
best = brute_force_best(tasks, offer, grid)
print(f"dp surplus     {plan.total_surplus:.6f}")
print(f"oracle surplus {best.total_surplus:.6f}")
for ex in plan.executions:
    print(f"  task {ex.task.task_id}: freq {[float(f) for f in ex.freq]}, "
          f"ends slot {ex.end_offset}, surplus {ex.surplus_value:.1f}")
print("note: the second task pays the pricey slot 1 instead of waiting")
print("for cheap slot 2; one saved latency step is worth more here.")

print("\n== ordering is part of the problem ==")
reverse = solve_bs(tasks, offer, grid,
                   order_provider=lambda t, o, g: (1, 0))
print(f"reversed order surplus {reverse.total_surplus:.6f} "
      f"(symmetric tasks, so no change)")
lopsided = [
    OffloadRequest(task_id=1, origin_bs=2, posted_at=0, workload=8.0,
                   max_utility=100.0, latency_penalty=5.0),
    OffloadRequest(task_id=2, origin_bs=2, posted_at=0, workload=2.0,
                   max_utility=100.0, latency_penalty=50.0),
]
for order in ((0, 1), (1, 0)):
    s = solve_bs(lopsided, offer, grid,
                 order_provider=lambda t, o, g, order=order: order)
    print(f"  order {order}: surplus {s.total_surplus:.1f}")
print(f"  oracle: {brute_force_best(lopsided, offer, grid).total_surplus:.1f}")

print("\n== the binary restriction has a bounded price ==")
bound = gap_bound(tasks, offer)
print(f"gap bound = |T| * C_max * p_max = {bound:.1f}")
rng = np.random.default_rng(0)
worst = -np.inf
for _ in range(200):
    freqs = sample_fractional_decision(tasks, offer, grid, rng)
    worst = max(worst, decision_surplus(tasks, offer, freqs, grid))
print(f"best of 200 random fractional decisions: {worst:.3f}")
print(f"binary optimum + bound covers it: "
      f"{best.total_surplus + bound:.1f} >= {worst:.3f}")

print("\n== refining the grid halves the bound ==")
g, o, t = grid, offer, tuple(tasks)
surplus_before = brute_force_best(list(t), o, g).total_surplus
for level in range(3):
    g, o, t = refine_instance(g, o, t)
    b = gap_bound(t, o)
    s = dp_solve(list(t), o, g).total_surplus
    print(f"  {g.horizon} slots of {g.delta_t}s: gap bound {b:7.3f}, "
          f"dp surplus {s:.3f}")
print("the bound halves each split while the binary surplus never drops,")
print(f"so the sequential solution converges on the unrestricted optimum "
      f"(started at {surplus_before:.1f}).")
