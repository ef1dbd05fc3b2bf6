import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from Planner.envModel import apply_event
from Planner.graphCore import serial_decompose
from Planner.partitioner import partition_search
from Planner.planEstimator import estimate_plan
from RuntimeAdapter import runtimeAdapter
from RuntimeAdapter.runtimeAdapter import (REPLAN, RESCHEDULE, Deployment, HorizonState, MixDecision, PlanProfile,
                                           adapt_report_to_document, classify_event, default_horizon, execution_order,
                                           expected_progress, full_reload_bytes, handle_event, mix_plans,
                                           pareto_front, profile_plan, run_adaptation, switching_overhead)
from Simulator.simEngine import DynamicsTrace, TraceEvent
from Utility.errors import DeadlinePassed, InputError, NoFeasiblePlan
import randomInstances


def test_expected_progress():
    assert expected_progress(HorizonState(100.0, 50.0, 10.0)) == pytest.approx(20.0)
    # the last horizon takes whatever is left
    assert expected_progress(HorizonState(100.0, 5.0, 10.0)) == pytest.approx(100.0)
    assert expected_progress(HorizonState(0.0, 0.0, 10.0)) == 0.0
    with pytest.raises(DeadlinePassed):
        expected_progress(HorizonState(1.0, 0.0, 10.0))


@pytest.mark.parametrize('d_rem, expected', [(3600.0, 180.0), (600.0, 60.0), (100000.0, 1800.0), (30.0, 30.0)])
def test_default_horizon(d_rem, expected):
    assert default_horizon(d_rem) == pytest.approx(expected)


def test_mix_of_two_plans():
    profiles = [PlanProfile('A', 5.0, 10.0), PlanProfile('B', 10.0, 40.0)]
    decision = mix_plans(profiles, HorizonState(7.0, 1.0, 1.0))
    assert [p for p, _ in decision.allocations] == ['A', 'B']
    assert [x for _, x in decision.allocations] == pytest.approx([0.6, 0.4])
    # B alone would cost 0.7 * 40 = 28
    assert decision.energy == pytest.approx(22.0)
    assert decision.progress == pytest.approx(7.0)
    assert decision.feasible


def test_mix_without_a_fast_enough_plan():
    profiles = [PlanProfile('A', 5.0, 10.0), PlanProfile('B', 10.0, 40.0)]
    fastest = mix_plans(profiles, HorizonState(12.0, 1.0, 1.0))
    assert not fastest.feasible
    assert fastest.allocations == (('B', 1.0),)
    assert fastest.progress == pytest.approx(10.0)
    cheapest = mix_plans(profiles, HorizonState(12.0, 1.0, 1.0), weight=0.0)
    assert cheapest.allocations == (('A', 1.0),)
    with pytest.raises(InputError):
        mix_plans([], HorizonState(1.0, 1.0, 1.0))


def test_switch_cost_eats_into_the_horizon():
    profiles = [PlanProfile('A', 5.0, 10.0, switch_cost=0.5)]
    decision = mix_plans(profiles, HorizonState(2.0, 1.0, 1.0))
    assert decision.allocations == (('A', pytest.approx(0.8)),)
    assert not mix_plans(profiles, HorizonState(3.0, 1.0, 1.0)).feasible


def best_mix_on_a_grid(profiles, target, steps=1000):
    best = math.inf
    x_p = np.linspace(0.0, 1.0, steps + 1)
    for p, q in itertools.permutations(profiles, 2):
        x_q = np.maximum(0.0, (target - x_p * p.rate) / q.rate)
        fits = x_p + x_q <= 1.0 + 1e-12
        if fits.any():
            best = min(best, float(np.min((x_p * p.power + x_q * q.power)[fits])))
    return best


@pytest.mark.parametrize('seed', range(100))
def test_mix_against_a_grid(seed):
    rng = randomInstances.make_rng(seed)
    profiles = randomInstances.random_plan_profiles(rng, int(rng.integers(2, 5)))
    target = rng.uniform(0.2, 0.95) * max(p.rate for p in profiles)
    decision = mix_plans(profiles, HorizonState(target, 1.0, 1.0))
    assert decision.feasible
    assert len(decision.allocations) <= 2
    assert sum(x for _, x in decision.allocations) <= 1.0 + 1e-9
    rates = {p.plan_id: p.rate for p in profiles}
    assert sum(x * rates[p] for p, x in decision.allocations) == pytest.approx(target)
    grid = best_mix_on_a_grid(profiles, target)
    assert decision.energy <= grid + 1e-9
    # one grid step of the most power hungry plan
    assert grid - decision.energy <= 1e-3 * max(p.power for p in profiles) + 1e-9


@pytest.fixture
def shared_env(make_env):
    times = {(f'l{i}', d): (1.0, 2.0) for i in range(3) for d in 'ABC'}
    return make_env(times, bw=100e6, shared=True)


def test_classify_event(shared_env):
    assert classify_event(TraceEvent(0.0, 'bw_change', 'shared', 95e6), shared_env) == RESCHEDULE
    assert classify_event(TraceEvent(0.0, 'bw_change', 'shared', 50e6), shared_env) == REPLAN
    assert classify_event(TraceEvent(0.0, 'compute_scale', 'A', 0.95), shared_env) == RESCHEDULE
    assert classify_event(TraceEvent(0.0, 'compute_scale', 'A', 1.1), shared_env) == RESCHEDULE
    assert classify_event(TraceEvent(0.0, 'compute_scale', 'A', 1.5), shared_env) == REPLAN
    assert classify_event(TraceEvent(0.0, 'device_leave', 'A'), shared_env) == REPLAN
    assert classify_event(TraceEvent(0.0, 'device_join', 'A'), shared_env) == REPLAN


@pytest.fixture
def moved_layer(chain_model, make_env, make_plan):
    g = chain_model([12.5e6, 12.5e6])
    env = make_env({(f'l{i}', d): (1.0, 1.0) for i in range(2) for d in 'AB'}, bw=100e6)
    old = make_plan(g, [(('l0',), ('A',), {'A': 1}), (('l1',), ('B',), {'B': 1})])
    new = make_plan(g, [(('l0', 'l1'), ('A',), {'A': 1})])
    return g, env, old, new


def test_switching_moves_only_new_weights(moved_layer):
    g, env, old, new = moved_layer
    switch = switching_overhead(old, new, env, g)
    # 100 Mbit of l1 over a 100 Mbps link
    assert switch.stall == pytest.approx(1.0)
    assert switch.bytes_moved == pytest.approx(12.5e6)
    assert switch.per_device == {'A': pytest.approx(12.5e6)}
    assert switching_overhead(new, new, env, g).stall == 0.0
    assert switching_overhead(None, new, env, g).stall == pytest.approx(2.0)
    assert full_reload_bytes(new, g) == pytest.approx(25e6)


def test_immutable_state_overlaps_the_switch(moved_layer):
    g, env, old, new = moved_layer
    assert switching_overhead(old, new, env, g, mutable_state=False, overlap_window=0.4).stall == pytest.approx(0.6)
    assert switching_overhead(old, new, env, g, mutable_state=False, overlap_window=5.0).stall == 0.0


def test_profile_plan():
    profile = profile_plan('p', 2.0, 10.0, switch_cost=1.0)
    assert profile.rate == pytest.approx(0.5)
    assert profile.power == pytest.approx(5.0)
    assert profile.switch_cost == 1.0
    with pytest.raises(InputError):
        profile_plan('p', 0.0, 10.0)
    with pytest.raises(InputError):
        profile_plan('p', math.inf, 10.0)
    with pytest.raises(InputError):
        PlanProfile('p', -1.0, 1.0)


def test_pareto_front():
    points = [(1.0, 10.0, 'a'), (2.0, 5.0, 'b'), (3.0, 6.0, 'c'), (2.0, 8.0, 'd'), (4.0, 1.0, 'e')]
    assert [item for _, _, item in pareto_front(points)] == ['a', 'b', 'e']
    assert pareto_front([]) == []


@pytest.fixture
def deployed(chain_model, make_env, make_qoe):
    g = chain_model([1e6] * 3, [1e6, 1e6, 0])
    times = {(f'l{i}', d): (s, 2 * s) for i in range(3) for d, s in zip('ABC', (1.0, 1.5, 2.0))}
    env = make_env(times, bw=100e6, shared=True, energy_per_second=2.0)
    qoe = make_qoe(t_qoe=1e6, lam=1.0, microbatches=8, units=2)
    components = serial_decompose(g)
    plans = partition_search(components, env, g, qoe, k=5)
    return g, env, qoe, components, plans


def test_small_change_only_reschedules(deployed):
    g, env, qoe, components, plans = deployed
    current = Deployment(plans[0])
    action = handle_event(TraceEvent(0.0, 'bw_change', 'shared', 95e6), current, env, g, components, qoe)
    assert action.kind == RESCHEDULE
    assert action.plan is current.plan
    assert action.env.topology.domain('shared').capacity == pytest.approx(95e6)
    assert env.topology.domain('shared').capacity == pytest.approx(100e6)


def test_missed_target_after_rescheduling_replans(deployed, make_qoe):
    g, env, _, components, plans = deployed
    tight = make_qoe(t_qoe=1e-3, microbatches=8, units=2)
    action = handle_event(TraceEvent(0.0, 'bw_change', 'shared', 95e6), Deployment(plans[0]), env, g, components,
                          tight)
    assert action.kind == REPLAN
    assert 'misses' in action.reason


def test_device_leave_replans_without_the_device(deployed):
    g, env, qoe, components, plans = deployed
    current = Deployment(plans[0])
    gone = current.plan.devices[0]
    action = handle_event(TraceEvent(0.0, 'device_leave', gone), current, env, g, components, qoe)
    assert action.kind == REPLAN
    assert gone not in action.plan.devices
    assert gone in action.env.offline
    assert action.switch.stall >= 0.0
    assert action.schedule.makespan > 0


def pool_and_deadline(g, env, qoe, plans, work, slack=3.0):
    pool = [(f'p{i}', plan) for i, plan in enumerate(plans)]
    slowest = max(estimate_plan(plan, env, g, qoe.workload, relaxed=False).t_latency for plan in plans)
    return pool, slack * work * slowest


def test_run_adaptation_finishes(deployed):
    g, env, qoe, _, plans = deployed
    pool, deadline = pool_and_deadline(g, env, qoe, plans, 100)
    report = run_adaptation(pool, env, g, qoe, 100, deadline)
    assert report.finished
    assert report.finish_time <= deadline + 1e-6
    assert report.energy > 0
    assert all(h.decision.feasible for h in report.horizons)
    assert report.horizons[-1].w_rem == pytest.approx(0.0, abs=1e-6)
    doc = adapt_report_to_document(report)
    assert doc['schema'] == 'adapt_report'
    assert len(doc['horizons']) == len(report.horizons)


def test_run_adaptation_rejects_bad_input(deployed):
    g, env, qoe, _, plans = deployed
    with pytest.raises(InputError):
        run_adaptation([('p0', plans[0])], env, g, qoe, 0, 100.0)


def test_run_adaptation_without_a_usable_plan(deployed, make_plan):
    g, env, qoe, _, _ = deployed
    only_a = make_plan(g, [(('l0', 'l1', 'l2'), ('A',), {'A': 1})])
    trace = DynamicsTrace((TraceEvent(0.0, 'device_leave', 'A'),))
    with pytest.raises(NoFeasiblePlan):
        run_adaptation([('p0', only_a)], env, g, qoe, 10, 1e5, trace=trace)


@pytest.mark.parametrize('seed', range(50))
def test_deadline_met_under_small_perturbations(seed, deployed):
    g, env, qoe, _, plans = deployed
    rng = randomInstances.make_rng(seed)
    work = int(rng.integers(20, 200))
    pool, deadline = pool_and_deadline(g, env, qoe, plans, work)
    trace = randomInstances.random_trace(rng, env, deadline, int(rng.integers(1, 6)), max_change=0.09)
    report = run_adaptation(pool, env, g, qoe, work, deadline, trace=trace)
    assert report.finished
    assert report.finish_time <= deadline + 1e-6
    assert all(h.decision.feasible for h in report.horizons)


def test_replan_joins_the_pool(deployed):
    g, env, qoe, components, plans = deployed
    pool, deadline = pool_and_deadline(g, env, qoe, plans, 50, slack=10.0)
    trace = DynamicsTrace((TraceEvent(0.0, 'device_leave', 'A'),))
    report = run_adaptation(pool, env, g, qoe, 50, deadline, trace=trace, components=components)
    assert report.finished
    assert report.horizons[0].actions == (('device_leave', 'A', REPLAN),)
    used = {p for h in report.horizons for p, _ in h.decision.allocations}
    assert used
    survivors = {plan_id for plan_id, plan in pool if 'A' not in plan.devices}
    assert used <= survivors | {f'replan_{len(pool)}'}


def test_switch_weights_come_from_their_old_hosts(chain_model, make_env, make_plan):
    g = chain_model([12.5e6, 12.5e6])
    env = make_env({(f'l{i}', d): (1.0, 1.0) for i in range(2) for d in 'ABC'}, bw=100e6)
    peak_bw = dict(env.topology.peak_bw)
    peak_bw[('B', 'A')] = 25e6
    peak_bw[('C', 'A')] = 400e6
    env = replace(env, topology=replace(env.topology, peak_bw=peak_bw))
    old = make_plan(g, [(('l0',), ('A',), {'A': 1}), (('l1',), ('B',), {'B': 1})])
    new = make_plan(g, [(('l0', 'l1'), ('A',), {'A': 1})])
    # C has the fast link but never held l1
    assert switching_overhead(old, new, env, g).stall == pytest.approx(4.0)
    left = apply_event(env, TraceEvent(0.0, 'device_leave', 'B'))
    assert switching_overhead(old, new, left, g).stall == pytest.approx(0.25)


@pytest.mark.parametrize('training', [True, False])
def test_replan_overlaps_inference_switches(deployed, make_qoe, training):
    g, env, _, components, _ = deployed
    qoe = make_qoe(t_qoe=1e6, lam=1.0, microbatches=8, units=2, training=training)
    plans = partition_search(components, env, g, qoe, k=5)
    current = Deployment(plans[0])
    event = TraceEvent(0.0, 'device_leave', current.plan.devices[0])
    action = handle_event(event, current, env, g, components, qoe, overlap_window=0.01)
    full = switching_overhead(current.plan, action.plan, action.env, g).stall
    expected = full if training else max(0.0, full - 0.01)
    assert action.switch.stall == pytest.approx(expected)


def test_closed_loop_inference_overlaps_one_horizon(deployed, make_qoe, monkeypatch):
    g, env, _, components, _ = deployed
    qoe = make_qoe(t_qoe=1e6, lam=1.0, microbatches=8, units=2, training=False)
    plans = partition_search(components, env, g, qoe, k=5)
    pool, deadline = pool_and_deadline(g, env, qoe, plans, 50, slack=10.0)
    calls = []
    original = runtimeAdapter.switching_overhead

    def recording(*args, **kwargs):
        calls.append((kwargs.get('mutable_state'), kwargs.get('overlap_window')))
        return original(*args, **kwargs)

    monkeypatch.setattr(runtimeAdapter, 'switching_overhead', recording)
    trace = DynamicsTrace((TraceEvent(0.0, 'device_leave', 'A'),))
    report = run_adaptation(pool, env, g, qoe, 50, deadline, trace=trace, components=components,
                            horizon=deadline / 4)
    assert report.finished
    assert calls
    deltas = {h.delta for h in report.horizons}
    assert all(mutable is False and window in deltas for mutable, window in calls)


def test_every_event_goes_through_the_reaction_rules(deployed, make_qoe):
    g, env, _, components, plans = deployed
    tight = make_qoe(t_qoe=1e-3, microbatches=8, units=2)
    pool, deadline = pool_and_deadline(g, env, tight, plans, 50, slack=10.0)
    trace = DynamicsTrace((TraceEvent(0.0, 'bw_change', 'shared', 95e6),))
    # the rescheduled plan misses the latency target
    report = run_adaptation(pool, env, g, tight, 50, deadline, trace=trace, components=components)
    assert report.horizons[0].actions == (('bw_change', 'shared', REPLAN),)
    plain = run_adaptation(pool, env, g, tight, 50, deadline, trace=trace)
    assert plain.horizons[0].actions == (('bw_change', 'shared', RESCHEDULE),)


@pytest.mark.parametrize('seed', range(20))
def test_small_perturbations_reschedule(seed, deployed):
    g, env, qoe, components, plans = deployed
    rng = randomInstances.make_rng(seed)
    pool, deadline = pool_and_deadline(g, env, qoe, plans, 50)
    trace = randomInstances.random_trace(rng, env, 1.0, 1, max_change=0.1)
    event = trace.events[0]
    assert classify_event(event, env) == RESCHEDULE
    shifted = DynamicsTrace((replace(event, t=0.0),))
    report = run_adaptation(pool, env, g, qoe, 50, deadline, trace=shifted, components=components)
    assert report.finished
    assert report.horizons[0].actions == ((event.kind, event.target, RESCHEDULE),)


def test_execution_order_starts_with_the_active_plan():
    decision = MixDecision((('A', 0.6), ('B', 0.4)), 22.0, 7.0)
    assert execution_order(decision) == (('A', 0.6), ('B', 0.4))
    assert execution_order(decision, 'B') == (('B', 0.4), ('A', 0.6))
    assert execution_order(decision, 'C') == (('A', 0.6), ('B', 0.4))


def test_next_horizon_continues_with_the_plan_that_ran_last(deployed):
    g, env, qoe, _, plans = deployed
    pool, deadline = pool_and_deadline(g, env, qoe, plans, 100)
    report = run_adaptation(pool, env, g, qoe, 100, deadline)
    for before, after in zip(report.horizons, report.horizons[1:]):
        assert set(after.order) == {p for p, _ in after.decision.allocations}
        if before.order and before.order[-1] in after.order:
            assert after.order[0] == before.order[-1]
    doc = adapt_report_to_document(report)
    assert [h['order'] for h in doc['horizons']] == [list(h.order) for h in report.horizons]
