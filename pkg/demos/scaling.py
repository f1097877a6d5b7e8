"""Wall-clock scaling of the full pipeline as the market grows.

Each additional station means one more potential offer per slot and
more shed requests, but the per-station solver only ever sees its own
batch, so the cost per slot should grow about linearly in N. We time
paired episodes at N in {5, 10, 15, 20} on a deliberately busy desk;
the default market is too thin at small N to hand the solver any
work, and timing an idle loop says nothing. Welfare from the
untrained proposed policy is meaningless here; only the clock
matters, which is why the harness lets timing runs use fresh weights.
"""
from cecsched.bench import (
    default_policy_factory,
    linear_fit,
    paired_spec,
    run_matrix,
)
from cecsched.sim import SimConfig

N_VALUES = [5, 10, 15, 20]
# Overloaded stations shedding multi-slot jobs, so every slot exercises
# the posting, batching, and solving path end to end.
BUSY = dict(delta=4, group_size=2, load_mean=0.95, load_noise=0.2,
            workload_low=3e6, workload_high=10e6)
spec = paired_spec(policies=["proposed", "greedy"], n_values=N_VALUES,
                   seeds=[0, 1], episode_length=60, sim_overrides=BUSY)
factory = default_policy_factory(fresh_proposed=True)

print("timing paired 60-slot episodes (normalized to seconds/200 slots)")
table = run_matrix(spec, SimConfig(), factory,
                   progress=lambda r: print(
                       f"  {r.policy:9s} N={r.n_bs:2d} seed={r.seed}  "
                       f"{r.seconds_per_200:8.4f}s/200"))

print("\n   N    proposed      greedy")
proposed = []
for n in N_VALUES:
    p = table.mean_seconds("proposed", n)
    g = table.mean_seconds("greedy", n)
    proposed.append(p)
    print(f"{n:4d} {p:11.4f} {g:11.4f}")

slope, intercept, r2 = linear_fit(N_VALUES, proposed)
print(f"\nlinear fit for the proposed pipeline: "
      f"{slope:.4f}s per extra station, R^2 = {r2:.3f}")
print("absolute numbers are this machine's; the shape is the claim.")
