"""Benchmark scheduler and harness tests.

The greedy and random baselines get exact hand-worked window checks;
the harness tests stay on small markets so the whole file runs in
seconds. Full-scale orderings are the acceptance suite's job.
"""
import json

import numpy as np
import pytest

from cecsched.bench import (
    CellResult,
    ExperimentCell,
    ExperimentSpec,
    MetricTable,
    MissingCheckpoint,
    RandomPolicy,
    Stage1Resolved,
    TimedPolicy,
    default_policy_factory,
    feasible_starts,
    greedy_policy,
    linear_fit,
    moving_average,
    paired_spec,
    random_policy,
    reject_all_policy,
    resolve_stage2,
    run_cell,
    run_matrix,
    trimmed_window_fill,
    write_cells_csv,
    write_summary_json,
    write_timing_csv,
)
from cecsched.core import (
    REJECT,
    OffloadRequest,
    ResourceOffer,
    SlotGrid,
    SystemState,
    scheme_surplus,
    slot_reward,
    validate_action,
)
from cecsched.ddpg import AllocatorPolicy
from cecsched.execsolve import dp_solve
from cecsched.orderpolicy import OrderPolicy, guarded_order_provider
from cecsched.sim import SimConfig, run_episode


GRID = SlotGrid(delta_t=1e-3, horizon=4)


def mk_task(tid, w=8e6, u0=400.0, alpha=10.0):
    return OffloadRequest(task_id=tid, origin_bs=9, posted_at=0,
                          workload=w, max_utility=u0, latency_penalty=alpha)


def mk_offer(bs_id=1, cap=5e9, price=4e-9):
    return ResourceOffer(bs_id=bs_id, posted_at=0,
                         capacity=np.full(4, float(cap)),
                         price=np.full(4, float(price)))


def small_cfg(**kw):
    base = dict(n_bs=3, delta=4, group_size=2, episode_length=10,
                load_mean=0.85, raw_capacity_low=10e9,
                raw_capacity_high=20e9)
    base.update(kw)
    return SimConfig(**base)


def busy_cfg(**kw):
    # higher load churn and smaller tasks keep both market sides alive
    # even with a handful of stations
    base = dict(n_bs=4, delta=4, group_size=2, episode_length=15,
                load_mean=0.95, load_noise=0.2,
                workload_low=3e6, workload_high=10e6)
    base.update(kw)
    return SimConfig(**base)


# ---------------------------------------------------------------------------
# window fills


def test_trimmed_window_fill_trims_final_slot():
    freq = trimmed_window_fill(8e6, np.full(4, 5e9), GRID, start=0)
    np.testing.assert_allclose(freq, [5e9, 3e9, 0.0, 0.0])
    freq = trimmed_window_fill(8e6, np.full(4, 5e9), GRID, start=2)
    np.testing.assert_allclose(freq, [0.0, 0.0, 5e9, 3e9])


def test_trimmed_window_fill_bridges_interior_zeros():
    cap = np.array([5e9, 0.0, 5e9, 5e9])
    freq = trimmed_window_fill(8e6, cap, GRID, start=0)
    np.testing.assert_allclose(freq, [5e9, 0.0, 3e9, 0.0])


def test_trimmed_window_fill_infeasible_cases():
    cap = np.array([0.0, 5e9, 5e9, 5e9])
    assert trimmed_window_fill(8e6, cap, GRID, start=0) is None  # zero start
    assert trimmed_window_fill(8e6, np.full(4, 5e9), GRID, start=3) is None
    assert trimmed_window_fill(1e9, np.full(4, 5e9), GRID, start=0) is None


def test_feasible_starts():
    assert feasible_starts(8e6, np.full(4, 5e9), GRID) == [0, 1, 2]
    assert feasible_starts(8e6, np.zeros(4), GRID) == []


# ---------------------------------------------------------------------------
# greedy


def test_greedy_singleton_uniform_prices_matches_dp():
    task = mk_task(1)
    offer = mk_offer()
    state = SystemState(offers=(offer,), requests=(task,))
    action = greedy_policy(state, GRID)
    scheme = action.schemes[0]
    assert scheme.target == 1
    np.testing.assert_allclose(scheme.exec_freq, [5e9, 3e9, 0.0, 0.0])
    plan = dp_solve([task], offer, GRID)
    np.testing.assert_allclose(slot_reward(state, action, GRID),
                               plan.total_surplus, atol=1e-9)


def test_greedy_singleton_nonuniform_at_most_dp():
    # cheap slots 0 and 2 split by a dear slot: the contiguous-window
    # family cannot reach the solver's non-contiguous optimum
    task = mk_task(1)
    offer = ResourceOffer(bs_id=1, posted_at=0,
                          capacity=np.full(4, 5e9),
                          price=np.array([2e-9, 8e-9, 2e-9, 8e-9]))
    state = SystemState(offers=(offer,), requests=(task,))
    action = greedy_policy(state, GRID)
    got = slot_reward(state, action, GRID)
    best = dp_solve([task], offer, GRID).total_surplus
    assert got <= best + 1e-9
    assert got < best  # strictly, for this construction
    np.testing.assert_allclose(got, 356.0)


def test_greedy_rejects_when_every_surplus_is_negative():
    state = SystemState(offers=(mk_offer(price=1e-6),),
                        requests=(mk_task(1),))
    action = greedy_policy(state, GRID)
    assert action.schemes[0].rejected


def test_greedy_prefers_strictly_cheaper_station():
    cheap = mk_offer(bs_id=1, price=4e-9)
    dear = mk_offer(bs_id=2, price=8e-9)
    state = SystemState(offers=(dear, cheap), requests=(mk_task(1),))
    assert greedy_policy(state, GRID).schemes[0].target == 1


def test_greedy_commits_capacity_between_requests():
    offer = ResourceOffer(bs_id=1, posted_at=0,
                          capacity=np.array([8e9, 0.0, 0.0, 0.0]),
                          price=np.array([4e-9, 0.0, 0.0, 0.0]))
    state = SystemState(offers=(offer,),
                        requests=(mk_task(1), mk_task(2)))
    action = greedy_policy(state, GRID)
    assert action.schemes[0].target == 1
    assert action.schemes[1].rejected  # nothing left on the only slot
    assert validate_action(state, action).ok


def test_greedy_tie_breaks_earliest_window_then_lowest_bs():
    # same surplus everywhere: flat prices, ample capacity, two stations
    a = mk_offer(bs_id=3)
    b = mk_offer(bs_id=7)
    state = SystemState(offers=(b, a), requests=(mk_task(1),))
    scheme = greedy_policy(state, GRID).schemes[0]
    assert scheme.target == 3
    assert scheme.exec_freq[0] > 0


# ---------------------------------------------------------------------------
# random


def test_random_rejects_on_zero_capacity():
    offer = ResourceOffer(bs_id=1, posted_at=0, capacity=np.zeros(4),
                          price=np.zeros(4))
    state = SystemState(offers=(offer,), requests=(mk_task(1), mk_task(2)))
    action = random_policy(state, GRID, np.random.default_rng(0))
    assert all(s.rejected for s in action.schemes)


def test_random_single_feasible_window_is_forced():
    offer = ResourceOffer(bs_id=1, posted_at=0,
                          capacity=np.array([4e9, 0.0, 0.0, 0.0]),
                          price=np.array([4e-9, 0.0, 0.0, 0.0]))
    state = SystemState(offers=(offer,), requests=(mk_task(1, w=4e6),))
    for seed in range(20):
        action = random_policy(state, GRID, np.random.default_rng(seed))
        np.testing.assert_allclose(action.schemes[0].exec_freq,
                                   [4e9, 0.0, 0.0, 0.0])


def test_random_reproducible_and_valid():
    state = SystemState(
        offers=(mk_offer(bs_id=1), mk_offer(bs_id=2, price=6e-9)),
        requests=tuple(mk_task(i) for i in range(1, 6)))
    a = random_policy(state, GRID, np.random.default_rng(5))
    b = random_policy(state, GRID, np.random.default_rng(5))
    for x, y in zip(a.schemes, b.schemes):
        assert x.target == y.target
        np.testing.assert_array_equal(x.exec_freq, y.exec_freq)
    assert validate_action(state, a).ok
    pol = RandomPolicy(seed=5)
    c = pol(state, GRID)
    for x, y in zip(a.schemes, c.schemes):
        assert x.target == y.target


def test_random_no_surplus_filter():
    # price far above utility: random still books when feasible
    state = SystemState(offers=(mk_offer(price=1e-6),),
                        requests=(mk_task(1),))
    hits = 0
    for seed in range(10):
        action = random_policy(state, GRID, np.random.default_rng(seed))
        hits += not action.schemes[0].rejected
    assert hits == 10
    assert slot_reward(state, action, GRID) < 0


# ---------------------------------------------------------------------------
# stage views


def test_resolve_stage2_singleton_reaches_dp_optimum():
    task = mk_task(1)
    offer = ResourceOffer(bs_id=1, posted_at=0,
                          capacity=np.full(4, 5e9),
                          price=np.array([2e-9, 8e-9, 2e-9, 8e-9]))
    state = SystemState(offers=(offer,), requests=(task,))
    native = greedy_policy(state, GRID)
    resolved = resolve_stage2(state, native, GRID)
    best = dp_solve([task], offer, GRID).total_surplus
    np.testing.assert_allclose(slot_reward(state, resolved, GRID), best,
                               atol=1e-9)
    assert validate_action(state, resolved).ok
    # assignment preserved, only the execution moved
    assert resolved.schemes[0].target == native.schemes[0].target


def test_resolve_stage2_keeps_rejections():
    state = SystemState(offers=(mk_offer(),), requests=(mk_task(1),))
    action = reject_all_policy(state, GRID)
    resolved = resolve_stage2(state, action, GRID)
    assert resolved.schemes[0].rejected


def test_resolve_stage2_on_live_slots():
    # the re-solved action always validates; on stations holding a
    # single task the solver's plan is at least as good as the booked
    # window (multi-task batches can lose: the committed windows may
    # share a slot's capacity fractionally, which the one-task-per-slot
    # solver family cannot express)
    cfg = busy_cfg()
    native = run_episode(cfg, greedy_policy, seed=42)
    singles = 0
    for step in native.steps:
        accepted = [s for s in step.action.schemes if not s.rejected]
        if not accepted:
            continue
        resolved = resolve_stage2(step.state, step.action, step.grid)
        assert validate_action(step.state, resolved).ok
        per_bs = {}
        for s in accepted:
            per_bs.setdefault(s.target, []).append(s)
        res_by_id = {s.task_id: s for s in resolved.schemes}
        for bs, schemes in per_bs.items():
            if len(schemes) != 1:
                continue
            singles += 1
            native_gain = scheme_surplus(schemes[0], step.state, step.grid)
            solved_gain = scheme_surplus(res_by_id[schemes[0].task_id],
                                         step.state, step.grid)
            assert solved_gain >= native_gain - 1e-9
    assert singles > 0


def test_stage1_resolved_episode_runs_clean():
    cfg = busy_cfg()
    trace = run_episode(cfg, Stage1Resolved(greedy_policy), seed=42)
    assert trace.n_requests > 0
    assert trace.n_accepted > 0
    assert np.isfinite(trace.welfare) and trace.welfare > 0


def test_timed_policy_accumulates():
    state = SystemState(offers=(mk_offer(),), requests=(mk_task(1),))
    timed = TimedPolicy(greedy_policy)
    timed(state, GRID)
    timed(state, GRID)
    assert timed.elapsed > 0.0


# ---------------------------------------------------------------------------
# statistics helpers


def test_moving_average_window_arithmetic_exact():
    xs = list(range(1, 61))
    ma = moving_average(xs, window=50)
    assert len(ma) == 60
    np.testing.assert_allclose(ma[10], np.mean(xs[:11]), rtol=1e-12)
    np.testing.assert_allclose(ma[49], np.mean(xs[:50]), rtol=1e-12)
    np.testing.assert_allclose(ma[59], np.mean(xs[10:60]), rtol=1e-12)
    with pytest.raises(ValueError):
        moving_average(xs, window=0)


def test_linear_fit_exact_line_and_noise():
    xs = [5, 10, 15, 20]
    slope, intercept, r2 = linear_fit(xs, [2 * x + 3 for x in xs])
    np.testing.assert_allclose([slope, intercept, r2], [2.0, 3.0, 1.0],
                               atol=1e-12)
    _, _, r2 = linear_fit(xs, [1.0, 1.0, 1.0, 1.0])
    assert r2 == 1.0
    _, _, r2 = linear_fit(xs, [10.0, -3.0, 14.0, 2.0])
    assert r2 < 0.9


# ---------------------------------------------------------------------------
# experiment spec


def test_paired_spec_cross_product_and_validation():
    spec = paired_spec(["greedy", "random"], [3, 5], seeds=[1, 2],
                       episodes=2, episode_length=20)
    assert len(spec.cells) == 8
    with pytest.raises(ValueError):
        ExperimentSpec(cells=(
            ExperimentCell("greedy", 3, seed=1),
            ExperimentCell("random", 3, seed=2),
        ))
    with pytest.raises(ValueError):
        ExperimentSpec(cells=(ExperimentCell("greedy", 3, 1),),
                       sim_overrides={"n_bs": 4})
    with pytest.raises(ValueError):
        ExperimentCell("greedy", 3, seed=1, episodes=0)
    with pytest.raises(ValueError):
        paired_spec(["greedy"], [3], seeds=[])


def test_spec_json_roundtrip():
    spec = paired_spec(["greedy"], [3], seeds=[1], episodes=2,
                       episode_length=25, sim_overrides={"delta": 4})
    back = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back == spec


def test_paired_streams_share_requests():
    # the request stream is exogenous: same seed, different policies,
    # identical task sequences
    cfg = busy_cfg()
    a = run_episode(cfg, reject_all_policy, seed=7)
    b = run_episode(cfg, greedy_policy, seed=7)
    assert a.n_requests > 0
    for sa, sb in zip(a.steps, b.steps):
        assert [r.task_id for r in sa.state.requests] \
            == [r.task_id for r in sb.state.requests]
        for ra, rb in zip(sa.state.requests, sb.state.requests):
            assert ra.workload == rb.workload
            assert ra.max_utility == rb.max_utility


# ---------------------------------------------------------------------------
# factory and matrix


def test_factory_baselines_and_missing_checkpoint():
    cfg = small_cfg()
    cell = ExperimentCell("greedy", 3, seed=1)
    factory = default_policy_factory()
    assert factory("greedy", cfg, cell) is greedy_policy
    assert isinstance(factory("random", cfg, cell), RandomPolicy)
    assert factory("reject-all", cfg, cell) is reject_all_policy
    with pytest.raises(MissingCheckpoint):
        factory("proposed", cfg, cell)
    with pytest.raises(ValueError):
        factory("oracle", cfg, cell)
    fresh = default_policy_factory(fresh_proposed=True)
    assert isinstance(fresh("proposed", cfg, cell), AllocatorPolicy)


def test_factory_rejects_mismatched_allocator():
    from cecsched.ddpg import Allocator, DdpgConfig
    alloc = Allocator(small_cfg(n_bs=2), DdpgConfig(seed=0))
    factory = default_policy_factory(allocators={3: alloc})
    with pytest.raises(MissingCheckpoint):
        factory("proposed", small_cfg(n_bs=3),
                ExperimentCell("proposed", 3, seed=1))


def test_run_matrix_small_market():
    spec = paired_spec(["greedy", "random", "reject-all"], [4],
                       seeds=[1, 2], episodes=2, episode_length=8)
    table = run_matrix(spec, busy_cfg(), default_policy_factory())
    assert len(table.rows) == 6
    for row in table.cells("reject-all"):
        assert row.welfare == (0.0, 0.0)  # the floor sanity line
    # moving-average invariant: recomputed series matches exactly
    for row in table.rows:
        assert row.moving_avg == tuple(moving_average(row.welfare))
        assert row.seconds_per_200 > 0.0
        assert len(row.stage1_welfare) == 2
    assert table.mean_welfare("greedy", 4) > 0.0
    assert table.mean_welfare("greedy", 4) >= table.mean_welfare(
        "reject-all", 4)
    with pytest.raises(KeyError):
        table.mean_welfare("greedy", 99)


def test_run_cell_stage2_view_guard_never_hurts():
    # untrained net behind the guard: learned mean cost can never
    # exceed the fixed-order mean cost on the same batches
    order = OrderPolicy(delta=4, m_max=4, hidden=(8,), embed=6, seed=0)
    provider = guarded_order_provider(order)
    cell = ExperimentCell("greedy", 4, seed=3, episodes=2)
    spec = ExperimentSpec(cells=(cell,), episode_length=10)
    row = run_cell(cell, spec, busy_cfg(), default_policy_factory(),
                   order_provider=provider)
    assert row.stage2_fixed_cost is not None
    assert row.stage2_learned_cost <= row.stage2_fixed_cost + 1e-9


def test_run_matrix_progress_hook():
    spec = paired_spec(["reject-all"], [3], seeds=[1], episode_length=4)
    seen = []
    run_matrix(spec, small_cfg(), default_policy_factory(),
               progress=seen.append)
    assert len(seen) == 1 and seen[0].policy == "reject-all"


# ---------------------------------------------------------------------------
# artifacts


def test_csv_and_json_artifacts(tmp_path):
    spec = paired_spec(["greedy", "reject-all"], [3], seeds=[1],
                       episodes=2, episode_length=6)
    table = run_matrix(spec, small_cfg(), default_policy_factory())
    cells_csv = tmp_path / "cells.csv"
    timing_csv = tmp_path / "timing.csv"
    summary = tmp_path / "summary.json"
    write_cells_csv(cells_csv, table)
    write_timing_csv(timing_csv, table)
    write_summary_json(summary, table)

    lines = cells_csv.read_text().strip().splitlines()
    assert lines[0] == ("policy,n_bs,seed,episode,welfare,"
                        "stage1_welfare,moving_avg")
    assert len(lines) == 1 + 2 * 2  # two cells, two episodes each

    lines = timing_csv.read_text().strip().splitlines()
    assert lines[0] == "policy,n=3"
    assert {l.split(",")[0] for l in lines[1:]} == {"greedy", "reject-all"}

    doc = json.loads(summary.read_text())
    assert {d["policy"] for d in doc} == {"greedy", "reject-all"}
    for d in doc:
        assert set(d) >= {"mean", "min", "max", "stage1_mean",
                          "seconds_per_200"}


def test_greedy_beats_random_on_paired_seeds():
    # qualitative ordering at desk scale; acceptance re-checks at N=5,10
    spec = paired_spec(["greedy", "random"], [4], seeds=[1, 2, 3, 4, 5],
                       episodes=1, episode_length=15)
    table = run_matrix(spec, busy_cfg(), default_policy_factory())
    greedy = table.mean_welfare("greedy", 4)
    random_ = table.mean_welfare("random", 4)
    assert greedy > 0.0
    assert greedy > random_
