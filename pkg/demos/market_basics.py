"""A guided tour of the market's vocabulary on one tiny instance.

One idle station posts three slots of spare capacity; one overloaded
station needs 4e6 cycles done. We price the trade by hand, book it,
and let the validator audit the books.
"""
import numpy as np

from cecsched.core import (
    OffloadRequest,
    ResourceOffer,
    SchedulingScheme,
    SlotAction,
    SlotGrid,
    SystemState,
    ending_slot,
    instance_to_json,
    slot_reward,
    surplus,
    utility,
    validate_action,
)

grid = SlotGrid(delta_t=1e-3, horizon=3)
offer = ResourceOffer(bs_id=1, posted_at=0,
                      capacity=(3e9, 3e9, 3e9),
                      price=(4e-9, 2e-9, 4e-9))
request = OffloadRequest(task_id=7, origin_bs=2, posted_at=0,
                         workload=4e6, max_utility=300.0,
                         latency_penalty=40.0)

print("== the two sides of one trade ==")
print(f"station {offer.bs_id} posts {grid.horizon} slots of "
      f"{offer.capacity[0]:.0e} Hz at prices "
      f"{[float(p) for p in offer.price]}")
print(f"station {request.origin_bs} asks for {request.workload:.0e} cycles, "
      f"worth {request.max_utility} up front, "
      f"-{request.latency_penalty} per slot of delay")

print("\n== what finishing later costs ==")
for latency in range(3):
    print(f"  finish {latency} slot(s) after posting -> "
          f"utility {utility(request, latency):.0f}")

# greedy would grab the first slot; the cheap middle slot is better here
freq = np.array([1e9, 3e9, 0.0])
done = ending_slot(freq, request.workload, grid)
print("\n== a hand-built execution ==")
print(f"frequency plan {[float(f) for f in freq]} delivers "
      f"{np.sum(freq) * grid.delta_t:.1e} cycles, ends in slot {done}")
r = surplus(request, offer, freq, grid)
print(f"surplus = utility - price*frequency = {r:.2f}")

scheme = SchedulingScheme(task_id=7, target=1, exec_freq=freq)
state = SystemState(offers=(offer,), requests=(request,))
action = SlotAction(schemes=(scheme,))
report = validate_action(state, action)
print("\n== the market audits the action ==")
print(f"validation: {'clean' if report.ok else report.violations}")
print(f"slot reward (sum of scheme surpluses): "
      f"{slot_reward(state, action, grid):.2f}")

# overbooking: quadruple the plan and the capacity check trips
bad = SlotAction(schemes=(
    SchedulingScheme(task_id=7, target=1, exec_freq=freq * 4),
))
report = validate_action(state, bad)
bs, slot, over = report.violations[0]
print(f"oversubscribed variant: station {bs} slot {slot} "
      f"over capacity by {over:.0e} Hz")

print("\n== interchange format ==")
doc = instance_to_json(grid, state)
print(f"offers={doc['offers']}")
print(f"requests={doc['requests']}")
