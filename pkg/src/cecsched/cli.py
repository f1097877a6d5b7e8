"""Command-line front end.

Five verbs, each a thin wrapper over library calls:

    cecsched oracle check  --instance inst.json
    cecsched train alloc   --config cfg.json --out dir/
    cecsched train order   --config cfg.json --out dir/
    cecsched sim run       --config cfg.json --policy greedy --out dir/
    cecsched bench run     --spec spec.json --out dir/

Config files are JSON, or TOML when the suffix is .toml. Exit status:
0 clean, 1 a check failed or a run aborted, 2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10: same module published as tomli
    import tomli as tomllib

from .bench import (
    ExperimentSpec,
    MissingCheckpoint,
    RandomPolicy,
    default_policy_factory,
    greedy_policy,
    reject_all_policy,
    run_matrix,
    write_cells_csv,
    write_summary_json,
    write_timing_csv,
)
from .core import load_instance
from .ddpg import (
    AllocatorPolicy,
    DdpgConfig,
    load_allocator,
    save_allocator,
    train_allocator,
)
from .execsolve import InstanceTooLarge, brute_force_best, gap_bound, solve_bs
from .orderpolicy import (
    ORDER_FAMILY_SCALES,
    OrderFeatureScales,
    OrderPolicy,
    guarded_order_provider,
    load_order_policy,
    save_order_policy,
    train_order_policy,
)
from .sim import (
    MarketViolation,
    SimConfig,
    run_episode,
    sample_market_instance,
    sample_order_sensitive_instance,
)


class CliError(Exception):
    """A user-facing problem; message printed to stderr, exit 1."""


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from exc


def _out_dir(arg: str) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# oracle check


def cmd_oracle_check(args) -> int:
    grid, state = load_instance(args.instance)
    if not state.offers:
        raise CliError("instance has no offers")
    if args.bs is None:
        if len(state.offers) > 1:
            ids = sorted(o.bs_id for o in state.offers)
            raise CliError(f"instance posts offers from {ids}; pick one "
                           "with --bs")
        offer = state.offers[0]
    else:
        matches = [o for o in state.offers if o.bs_id == args.bs]
        if not matches:
            raise CliError(f"no offer from bs {args.bs} in the instance")
        offer = matches[0]
    tasks = list(state.requests)
    if not tasks:
        raise CliError("instance has no requests")
    try:
        oracle = brute_force_best(tasks, offer, grid)
    except InstanceTooLarge as exc:
        raise CliError(str(exc)) from exc
    dp = solve_bs(tasks, offer, grid)
    bound = gap_bound(tasks, offer)
    # the DP must never beat the oracle, and must reproduce it when
    # handed the oracle's own processing order
    replay = solve_bs(tasks, offer, grid,
                      order_provider=lambda t, o, g: oracle.order)
    dominated = dp.total_surplus <= oracle.total_surplus + args.tol
    matched = abs(replay.total_surplus - oracle.total_surplus) <= args.tol
    print(f"dp surplus      {dp.total_surplus!r}")
    print(f"oracle surplus  {oracle.total_surplus!r}")
    print(f"gap bound       {bound!r}")
    ok = dominated and matched
    print("PASS" if ok else "FAIL")
    if not ok:
        if not dominated:
            print(f"dp exceeds the oracle by "
                  f"{dp.total_surplus - oracle.total_surplus!r}",
                  file=sys.stderr)
        if not matched:
            print(f"dp under the oracle's order differs by "
                  f"{replay.total_surplus - oracle.total_surplus!r}",
                  file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# train alloc


def cmd_train_alloc(args) -> int:
    cfg = load_config(args.config)
    sim_cfg = SimConfig.from_dict(cfg.get("sim", {}))
    ddpg_cfg = DdpgConfig.from_dict(cfg.get("ddpg", {}))
    if "episodes" not in cfg:
        raise CliError("config needs an 'episodes' count")
    episodes = int(cfg["episodes"])
    seed = int(cfg.get("seed", 0))
    out = _out_dir(args.out)
    curve_path = out / "curve.csv"
    ckpt_path = out / "allocator.json"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "ma_welfare", "critic_loss"])

        def progress(row):
            writer.writerow([row.episode, repr(row.moving_avg),
                             repr(row.critic_loss)])
            fh.flush()
            if args.log_every and (row.episode + 1) % args.log_every == 0:
                print(f"episode {row.episode + 1}/{episodes}  "
                      f"ma welfare {row.moving_avg:.3f}  "
                      f"critic loss {row.critic_loss:.5f}")

        allocator, curve = train_allocator(
            sim_cfg, ddpg_cfg, episodes, seed=seed,
            ma_window=int(cfg.get("ma_window", 50)),
            progress=progress)
    save_allocator(ckpt_path, allocator, seed=seed,
                   extra={"episodes": episodes})
    final = curve[-1].moving_avg if curve else float("nan")
    print(f"trained {episodes} episodes  final ma welfare {final:.3f}")
    print(f"checkpoint {ckpt_path}")
    print(f"curve      {curve_path}")
    return 0


# ---------------------------------------------------------------------------
# train order


_DISTRIBUTIONS = {
    "order-sensitive": sample_order_sensitive_instance,
    "market": sample_market_instance,
}


def _order_sampler(cfg: dict):
    name = cfg.get("distribution", "order-sensitive")
    if name not in _DISTRIBUTIONS:
        raise CliError(f"unknown distribution {name!r}; "
                       f"choose from {sorted(_DISTRIBUTIONS)}")
    fn = _DISTRIBUTIONS[name]
    kwargs = dict(cfg.get("distribution_args", {}))
    return name, (lambda rng: fn(rng, **kwargs))


def _order_policy_from_config(cfg: dict, distribution: str) -> OrderPolicy:
    pol = dict(cfg.get("policy", {}))
    if "delta" not in pol:
        raise CliError("config needs policy.delta (offer dimension)")
    allowed = {"delta", "m_max", "hidden", "embed", "seed", "scales"}
    unknown = set(pol) - allowed
    if unknown:
        raise CliError(f"unknown policy keys: {sorted(unknown)}")
    scales = pol.pop("scales", None)
    if scales is None:
        # the two-task family needs its fitted scales to be learnable
        scales = (ORDER_FAMILY_SCALES if distribution == "order-sensitive"
                  else OrderFeatureScales())
    elif isinstance(scales, dict):
        scales = OrderFeatureScales.from_dict(scales)
    else:
        raise CliError("policy.scales must be a table of scale factors")
    if "hidden" in pol:
        pol["hidden"] = tuple(pol["hidden"])
    return OrderPolicy(scales=scales, **pol)


def cmd_train_order(args) -> int:
    cfg = load_config(args.config)
    distribution, sampler = _order_sampler(cfg)
    policy = _order_policy_from_config(cfg, distribution)
    if "steps" not in cfg:
        raise CliError("config needs a 'steps' count")
    steps = int(cfg["steps"])
    out = _out_dir(args.out)
    curve_path = out / "curve.csv"
    ckpt_path = out / "order_policy.json"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ma_cost", "loss"])

        def progress(row):
            writer.writerow([row.step, repr(row.moving_avg), repr(row.loss)])
            fh.flush()
            if args.log_every and (row.step + 1) % args.log_every == 0:
                print(f"step {row.step + 1}/{steps}  "
                      f"ma cost {row.moving_avg:.3f}")

        optimizer, curve = train_order_policy(
            policy, steps=steps,
            batch_size=int(cfg.get("batch_size", 8)),
            seed=int(cfg.get("seed", 0)),
            instance_sampler=sampler,
            lr=float(cfg.get("lr", 1e-3)),
            baseline=cfg.get("baseline", "greedy"),
            ma_window=int(cfg.get("ma_window", 50)),
            progress=progress)
    save_order_policy(ckpt_path, policy, optimizer=optimizer,
                      extra={"steps": steps, "distribution": distribution})
    final = curve[-1].moving_avg if curve else float("nan")
    print(f"trained {steps} steps  final ma cost {final:.3f}")
    print(f"checkpoint {ckpt_path}")
    print(f"curve      {curve_path}")
    return 0


# ---------------------------------------------------------------------------
# sim run


def _load_order_provider(path):
    if path is None:
        return None
    policy, _ = load_order_policy(path)
    return guarded_order_provider(policy)


def cmd_sim_run(args) -> int:
    cfg = load_config(args.config)
    sim_cfg = SimConfig.from_dict(cfg.get("sim", {}))
    seed = int(cfg.get("seed", 0)) if args.seed is None else args.seed
    order_provider = _load_order_provider(args.order_checkpoint)
    if args.policy == "greedy":
        policy = greedy_policy
    elif args.policy == "random":
        policy = RandomPolicy(seed=seed + 1)
    elif args.policy == "reject-all":
        policy = reject_all_policy
    else:
        if args.checkpoint is None:
            raise CliError("--policy proposed needs --checkpoint")
        allocator = load_allocator(args.checkpoint)
        if allocator.sim_cfg.n_bs != sim_cfg.n_bs:
            raise CliError(
                f"checkpoint was trained for N={allocator.sim_cfg.n_bs}, "
                f"config asks for N={sim_cfg.n_bs}")
        policy = AllocatorPolicy(allocator, order_provider=order_provider)
    trace = run_episode(sim_cfg, policy, seed=seed)
    out = _out_dir(args.out)
    trace_path = out / "trace.csv"
    cumulative = 0.0
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "n_requests", "n_accepted", "reward",
                         "cumulative_welfare"])
        for step in trace.steps:
            cumulative += step.reward
            accepted = sum(1 for s in step.action.schemes if not s.rejected)
            writer.writerow([step.slot, len(step.state.requests), accepted,
                             repr(step.reward), repr(cumulative)])
    summary = {
        "policy": args.policy,
        "seed": seed,
        "n_slots": len(trace.steps),
        "welfare": trace.welfare,
        "n_requests": trace.n_requests,
        "n_accepted": trace.n_accepted,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2))
    print(f"welfare {trace.welfare!r}  "
          f"({trace.n_accepted}/{trace.n_requests} requests accepted)")
    print(f"trace   {trace_path}")
    print(f"summary {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# bench run


def cmd_bench_run(args) -> int:
    doc = load_config(args.spec)
    spec = ExperimentSpec.from_dict(doc)
    allocators = {}
    for path in args.checkpoint or []:
        allocator = load_allocator(path)
        allocators[allocator.sim_cfg.n_bs] = allocator
    order_provider = _load_order_provider(args.order_checkpoint)
    factory = default_policy_factory(
        allocators=allocators,
        order_provider=order_provider,
        fresh_proposed=args.fresh_proposed,
        ddpg_seed=args.ddpg_seed)
    base_cfg = SimConfig.from_dict(doc.get("sim", {}))
    out = _out_dir(args.out)

    def progress(result):
        print(f"cell policy={result.policy} N={result.n_bs} "
              f"seed={result.seed}  mean welfare {result.mean:.3f}  "
              f"{result.seconds_per_200:.3f}s/200 slots")

    table = run_matrix(spec, base_cfg, factory,
                       order_provider=order_provider, progress=progress)
    write_cells_csv(out / "cells.csv", table)
    write_timing_csv(out / "timing.csv", table)
    write_summary_json(out / "summary.json", table)
    print(f"wrote {out / 'cells.csv'}")
    print(f"wrote {out / 'timing.csv'}")
    print(f"wrote {out / 'summary.json'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cecsched",
        description="Two-stage edge-resource market: solvers, training, "
                    "simulation and benchmarks.")
    top = ap.add_subparsers(dest="group", required=True)

    oracle = top.add_parser("oracle", help="exact-solver checks")
    oracle_sub = oracle.add_subparsers(dest="verb", required=True)
    check = oracle_sub.add_parser(
        "check", help="compare the DP against the exhaustive oracle "
                      "on one instance")
    check.add_argument("--instance", required=True,
                       help="instance JSON (interchange format)")
    check.add_argument("--bs", type=int, default=None,
                       help="station to solve when several post offers")
    check.add_argument("--tol", type=float, default=1e-9)
    check.set_defaults(fn=cmd_oracle_check)

    train = top.add_parser("train", help="train an agent")
    train_sub = train.add_subparsers(dest="verb", required=True)
    alloc = train_sub.add_parser("alloc", help="train the slot allocator")
    alloc.add_argument("--config", required=True)
    alloc.add_argument("--out", required=True)
    alloc.add_argument("--log-every", type=int, default=0,
                       help="print progress every k episodes (0 = quiet)")
    alloc.set_defaults(fn=cmd_train_alloc)
    order = train_sub.add_parser("order", help="train the ordering policy")
    order.add_argument("--config", required=True)
    order.add_argument("--out", required=True)
    order.add_argument("--log-every", type=int, default=0,
                       help="print progress every k steps (0 = quiet)")
    order.set_defaults(fn=cmd_train_order)

    sim = top.add_parser("sim", help="run market episodes")
    sim_sub = sim.add_subparsers(dest="verb", required=True)
    run = sim_sub.add_parser("run", help="one episode under a policy")
    run.add_argument("--config", required=True)
    run.add_argument("--policy", required=True,
                     choices=["proposed", "greedy", "random", "reject-all"])
    run.add_argument("--checkpoint", default=None,
                     help="allocator checkpoint (proposed policy)")
    run.add_argument("--order-checkpoint", default=None,
                     help="ordering-policy checkpoint; guards against the "
                          "ratio order per station batch")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config's episode seed")
    run.add_argument("--out", required=True)
    run.set_defaults(fn=cmd_sim_run)

    bench = top.add_parser("bench", help="benchmark matrices")
    bench_sub = bench.add_subparsers(dest="verb", required=True)
    brun = bench_sub.add_parser("run", help="run an experiment spec")
    brun.add_argument("--spec", required=True,
                      help="experiment spec JSON/TOML")
    brun.add_argument("--out", required=True)
    brun.add_argument("--checkpoint", action="append", default=None,
                      help="allocator checkpoint; repeat for several "
                           "station counts")
    brun.add_argument("--order-checkpoint", default=None)
    brun.add_argument("--fresh-proposed", action="store_true",
                      help="untrained proposed cells (timing runs only)")
    brun.add_argument("--ddpg-seed", type=int, default=0,
                      help="weight seed for --fresh-proposed")
    brun.set_defaults(fn=cmd_bench_run)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MarketViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
