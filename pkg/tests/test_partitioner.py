import math
from dataclasses import replace

import pytest

from Planner.graphCore import serial_decompose
from Planner.partitioner import (PartitionSearch, balance_microbatches, objective_value, partition_search,
                                 relaxed_comm_time)
from Planner.planModel import Plan, PlanMetrics, Stage, validate_plan
from Utility.errors import InputError, NoFeasiblePlan
import randomInstances


@pytest.mark.parametrize('latencies, total, expected', [
    ([1.0, 1.0], 3, [2, 1]),
    ([1.0, 2.0], 3, [2, 1]),
    ([2.0, 1.0], 4, [1, 3]),
    ([1.0, 1.0, 1.0], 1, [1, 0, 0]),
    ([0.5], 4, [4]),
])
def test_balance_microbatches(latencies, total, expected):
    counts = balance_microbatches(latencies, total)
    assert counts == expected
    assert sum(counts) == total


def test_balance_rejects_bad_input():
    with pytest.raises(InputError):
        balance_microbatches([1.0, 0.0], 2)
    with pytest.raises(InputError):
        balance_microbatches([1.0], 0)


def test_objective_value(make_qoe):
    plan = Plan((), metrics=PlanMetrics(5.0, {'A': 3.0, 'B': 4.0}))
    assert objective_value(plan, make_qoe(t_qoe=4.0, lam=2.0)) == pytest.approx(9.0)
    assert objective_value(plan, make_qoe(t_qoe=6.0, lam=2.0)) == pytest.approx(7.0)
    infeasible = Plan((), metrics=PlanMetrics(1.0, {'A': 1.0}, feasible=False))
    assert math.isinf(objective_value(infeasible, make_qoe()))


def test_relaxed_comm_time(make_env):
    env = make_env({('l0', 'A'): (1, 1), ('l0', 'B'): (1, 1)}, bw=100e6)
    src, dst = Stage('s0', ('l0',), ('A',)), Stage('s1', ('l1',), ('B',))
    assert relaxed_comm_time(src, dst, 12.5e6, env.topology) == pytest.approx(1.0)
    assert relaxed_comm_time(src, src, 12.5e6, env.topology) == 0.0


def test_fastest_device_alone(chain_model, make_env, make_qoe):
    g = chain_model([10, 10], [1e6, 1e6])
    env = make_env({('l0', 'A'): (1.0, 0.0), ('l1', 'A'): (1.0, 0.0),
                    ('l0', 'B'): (2.0, 0.0), ('l1', 'B'): (2.0, 0.0)}, energy_per_second=1.0)
    qoe = make_qoe(microbatches=1, units=1, training=False)
    plans = partition_search(serial_decompose(g), env, g, qoe, k=3)
    best = plans[0]
    assert [(s.nodes, s.devices) for s in best.stages] == [(('l0', 'l1'), ('A',))]
    assert best.metrics.t_est == pytest.approx(2.0)
    assert len(plans) <= 3


def test_k_must_be_positive(chain_model, make_env, make_qoe):
    g = chain_model([1])
    env = make_env({('l0', 'A'): (1.0, 1.0)})
    with pytest.raises(InputError):
        PartitionSearch(serial_decompose(g), env, g, make_qoe(), k=0)


def test_nothing_fits_in_memory(chain_model, make_env, make_qoe):
    g = chain_model([100, 100])
    env = make_env({('l0', 'A'): (1.0, 1.0), ('l1', 'A'): (1.0, 1.0)}, mem=50)
    with pytest.raises(NoFeasiblePlan):
        partition_search(serial_decompose(g), env, g, make_qoe())


def test_tensor_parallel_devices(chain_model, make_env, make_qoe):
    g = chain_model([10])
    env = make_env({('l0', 'A'): (1.0, 2.0)},
                   accelerators={'A': {'accelerators': 2, 'tp_speedup': 2.0, 'tp_mem_divisor': 2.0}})
    plan = partition_search(serial_decompose(g), env, g, make_qoe(microbatches=2))[0]
    assert plan.stages[0].tp_degree == 2
    # 0.5 s forward and 1 s backward per microbatch after the speedup
    assert plan.metrics.t_est == pytest.approx(3.0)


def test_offline_devices_are_skipped(chain_model, make_env, make_qoe):
    g = chain_model([10, 10], [1e3, 1e3])
    env = make_env({(f'l{i}', d): (1.0, 1.0) for i in range(2) for d in 'ABC'})
    env = replace(env, offline=frozenset({'A'}))
    plans = partition_search(serial_decompose(g), env, g, make_qoe(microbatches=4), k=None)
    assert all('A' not in p.devices for p in plans)


def test_branching_model_plans_cover_every_node(make_qoe):
    rng = randomInstances.make_rng(7)
    g = randomInstances.random_dag_model(rng, 6, edge_prob=0.4)
    env = randomInstances.random_environment(rng, g, 3)
    qoe = make_qoe(microbatches=6, units=2)
    plans = partition_search(serial_decompose(g), env, g, qoe, k=5)
    assert plans
    for plan in plans:
        validate_plan(plan, g, qoe.workload)
    objectives = [objective_value(p, qoe) for p in plans]
    assert objectives == sorted(objectives)


def brute_force_best(g, env, qoe):
    return min((objective_value(plan, qoe) for plan, _ in randomInstances.every_chain_plan(g, env, qoe)),
               default=math.inf)


@pytest.mark.parametrize('seed', range(25))
def test_exhaustive_search_matches_brute_force(seed, make_qoe):
    rng = randomInstances.make_rng(seed)
    g = randomInstances.random_chain_model(rng, int(rng.integers(2, 5)))
    env = randomInstances.random_environment(rng, g, int(rng.integers(2, 4)))
    qoe = make_qoe(t_qoe=0.01, lam=10.0, microbatches=int(rng.integers(3, 6)), units=2)

    expected = brute_force_best(g, env, qoe)
    plans = partition_search(serial_decompose(g), env, g, qoe, k=None)
    assert objective_value(plans[0], qoe) == pytest.approx(expected, rel=1e-12)

    # pruned searches never beat the full one
    for k in (1, 5):
        pruned = partition_search(serial_decompose(g), env, g, qoe, k=k)
        assert objective_value(pruned[0], qoe) >= expected - 1e-9


@pytest.mark.parametrize('seed', range(200))
def test_single_candidate_search_is_exact(seed, make_qoe):
    rng = randomInstances.make_rng(500 + seed)
    g = randomInstances.random_chain_model(rng, int(rng.integers(2, 7)))
    env = randomInstances.random_environment(rng, g, int(rng.integers(2, 5)))
    # up to 4 microbatches fill at most two stages, where every one-stage prefix is kept
    qoe = make_qoe(t_qoe=0.01, lam=float(rng.uniform(0.1, 10.0)), microbatches=int(rng.integers(3, 5)), units=2)
    plans = partition_search(serial_decompose(g), env, g, qoe, k=1, max_stages=3)
    assert objective_value(plans[0], qoe) == brute_force_best(g, env, qoe)
