"""Analytic pipeline latency and energy estimates.

Every stage runs its microbatches in one-forward-one-backward order: after
``depth`` warm-up forwards (its distance in stages to the pipeline end) it
alternates a forward and the oldest pending backward. Each transfer direction
carries one microbatch at a time, oldest first. With those two rules the
latency of an iteration is a max-plus recurrence over the stage graph, and the
CEP graph the simulator runs encodes the very same order.

A chain plan also flattens into alternating compute and transfer steps, which
the closed-form fill, steady state and drain phases describe.
"""
import functools
import logging
from dataclasses import dataclass, field

from Planner.envModel import stage_cost
from Planner.planModel import transfer_pair, transfer_bytes
from Utility.errors import InputError, NonChainPlan, PipelineTooDeep

logger = logging.getLogger(__name__)

FWD = 'fwd'
BWD = 'bwd'


@dataclass(frozen=True)
class Cost:
    t: float = 0.0
    e: float = 0.0


@dataclass(frozen=True)
class Step:
    fwd: Cost = Cost()
    bwd: Cost = Cost()
    gather: Cost = Cost()
    # energy per device for one microbatch, and for the gathering at the end
    fwd_energy: dict = field(default_factory=dict)
    bwd_energy: dict = field(default_factory=dict)
    gather_energy: dict = field(default_factory=dict)
    # compute seconds per device for one forward and one backward
    busy: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Estimate:
    t_latency: float
    e_consumption: float
    objective: float
    per_device: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhaseBreakdown:
    bottleneck: int
    fill: float
    steady: float
    drain: float

    @property
    def total(self):
        return self.fill + self.steady + self.drain


def bottleneck_index(steps):
    totals = [s.fwd.t + s.bwd.t for s in steps]
    return totals.index(max(totals))


def _phase_time(first, second, d, lo):
    # first-direction tasks up to the peak step, the peak repeated for the remaining steps,
    # then second-direction tasks from the peak back down to d+1
    size = len(first)
    best = 0.0
    for p in range(lo, size):
        t = sum(first[:p + 1]) + (size - 1 - p) * max(first[:p + 1]) + sum(second[d + 1:p + 1])
        best = max(best, t)
    return best


def start_phase_time(steps, d):
    return _phase_time([s.fwd.t for s in steps], [s.bwd.t for s in steps], d, d)


def end_phase_time(steps, d):
    fwd = [s.fwd.t for s in steps]
    bwd = [s.bwd.t for s in steps]
    return [_phase_time(bwd, fwd, d, max(s, d)) for s in range(len(steps))]


def phase_breakdown(steps, microbatches):
    """Closed-form fill, bottleneck steady state and drain (with gathering) of a step list."""
    _check_steps(steps, microbatches)
    d = bottleneck_index(steps)
    steady = (microbatches - len(steps) + d) * (steps[d].fwd.t + steps[d].bwd.t)
    drain = max(t + s.gather.t for t, s in zip(end_phase_time(steps, d), steps))
    return PhaseBreakdown(d, start_phase_time(steps, d), steady, drain)


def pipeline_order(depth, microbatches, training=True):
    """Task order of a stage ``depth`` stages away from the pipeline end, as (direction, microbatch)."""
    if not training:
        return [(FWD, j) for j in range(microbatches)]
    warmup = min(depth, microbatches)
    order = [(FWD, j) for j in range(warmup)]
    for j in range(microbatches - warmup):
        order += [(FWD, warmup + j), (BWD, j)]
    order += [(BWD, j) for j in range(microbatches - warmup, microbatches)]
    return order


def stage_depths(stage_ids, edges):
    """Longest distance, in edges, from every stage to a stage without successors."""
    succs = {s: [] for s in stage_ids}
    for u, v in edges:
        succs[u].append(v)
    depth = {}

    def visit(s):
        if s not in depth:
            depth[s] = max((visit(v) + 1 for v in succs[s]), default=0)
        return depth[s]

    for s in stage_ids:
        visit(s)
    return depth


@functools.lru_cache(maxsize=512)
def _pipeline_program(stage_ids, edges, microbatches, training):
    """Tasks of one iteration in dependency order, each as (duration slot, dependency positions).

    A duration slot is ('compute', stage, direction) or ('link', edge, direction).
    Also returns the position of every stage's last task.
    """
    m = microbatches
    preds = {s: [] for s in stage_ids}
    succs = {s: [] for s in stage_ids}
    for u, v in edges:
        succs[u].append(v)
        preds[v].append(u)
    depths = stage_depths(stage_ids, edges)
    orders = {s: pipeline_order(depths[s], m, training) for s in stage_ids}
    position = dict.fromkeys(stage_ids, 0)
    program = []
    index = {}

    def add(task, slot, deps):
        index[task] = len(program)
        program.append((slot, tuple(index[d] for d in deps)))

    def links_of(s, direction, j):
        if direction == FWD:
            return [((u, s), ('compute', u, FWD, j)) for u in preds[s]]
        return [((s, v), ('compute', v, BWD, j)) for v in succs[s]]

    moved = True
    while moved:
        moved = False
        for s in stage_ids:
            order = orders[s]
            while position[s] < len(order):
                direction, j = order[position[s]]
                links = links_of(s, direction, j)
                if any(sender not in index for _, sender in links):
                    break
                deps = []
                for edge, sender in links:
                    link = ('link', edge, direction, j)
                    if link not in index:
                        previous = [('link', edge, direction, j - 1)] if j > 0 else []
                        add(link, ('link', edge, direction), [sender] + previous)
                    deps.append(link)
                if position[s] > 0:
                    before, i = order[position[s] - 1]
                    deps.append(('compute', s, before, i))
                add(('compute', s, direction, j), ('compute', s, direction), deps)
                position[s] += 1
                moved = True

    stuck = [s for s in stage_ids if position[s] < len(orders[s])]
    if stuck:
        raise InputError(f'Stages {stuck} wait on each other, the stage graph has a cycle')
    last = {s: index[('compute', s) + orders[s][-1]] for s in stage_ids}
    return tuple(program), last


def pipeline_latency(stage_ids, edges, compute, comm, microbatches, training=True):
    """Finish time of one iteration over a stage DAG.

    ``compute`` maps stages and ``comm`` maps stage edges to their steps. Data-parallel
    stages gather their weights after their last backward.
    """
    program, last = _pipeline_program(tuple(stage_ids), tuple(tuple(e) for e in edges), microbatches, training)
    duration = {}
    for s, step in compute.items():
        duration['compute', s, FWD] = step.fwd.t
        duration['compute', s, BWD] = step.bwd.t
    for edge, step in comm.items():
        duration['link', edge, FWD] = step.fwd.t
        duration['link', edge, BWD] = step.bwd.t
    finish = []
    for slot, deps in program:
        start = 0.0
        for d in deps:
            if finish[d] > start:
                start = finish[d]
        finish.append(start + duration[slot])
    return max(finish[last[s]] + (compute[s].gather.t if training else 0.0) for s in stage_ids)


def _check_steps(steps, microbatches):
    if len(steps) % 2 == 0:
        raise InputError('Step lists alternate compute and transfer steps and have an odd length')
    if microbatches < len(steps):
        raise PipelineTooDeep(microbatches, len(steps))


def steps_latency(steps, microbatches, training=True):
    _check_steps(steps, microbatches)
    stage_ids = list(range(0, len(steps), 2))
    edges = [(i, i + 2) for i in stage_ids[:-1]]
    compute = {i: steps[i] for i in stage_ids}
    comm = {(i, i + 2): steps[i + 1] for i in stage_ids[:-1]}
    return pipeline_latency(stage_ids, edges, compute, comm, microbatches, training)


def steps_energy(steps, microbatches):
    return sum(microbatches * (s.fwd.e + s.bwd.e) + s.gather.e for s in steps)


# Estimate a bare step list: latency, energy and the weighted objective T + weight * E
def estimate_steps(steps, microbatches, weight=0.0, training=True):
    t = steps_latency(steps, microbatches, training)
    e = steps_energy(steps, microbatches)
    return Estimate(t, e, t + weight * e)


def gathering_time(stage, env, model_graph):
    """Ring all-reduce of the stage weights over the slowest link in the group."""
    x = len(stage.devices)
    if x < 2:
        return Cost()
    bits = model_graph.param_bytes_of(stage.nodes) * 8
    slowest = min(env.topology.peak(a, b) for a in stage.devices for b in stage.devices if a != b)
    t = 2 * (x - 1) / x * bits / slowest
    return Cost(t, t * sum(env.device(d).comm_power for d in stage.devices))


def _transfer_pairs(plan, env, training):
    pairs = []
    for u, v in plan.edges:
        pair = transfer_pair(plan.stage(u).devices, plan.stage(v).devices, env.topology)
        if pair is not None:
            pairs.append(pair)
            if training:
                pairs.append(pair[::-1])
    return pairs


# Bandwidth a pair gets: its peak, or under contention an equal share of its domain
def _pair_bandwidth(pair, env, shares):
    peak = env.topology.peak(*pair)
    if shares is None:
        return peak
    domain = env.topology.domain_of(*pair)
    if domain is None:
        return peak
    return min(peak, domain.capacity / shares[domain.id])


def _comm_step(src, dst, plan, env, model_graph, workload, shares):
    pair = transfer_pair(src.devices, dst.devices, env.topology)
    num_bytes = transfer_bytes(src, dst, model_graph, workload.microbatch_units)
    if pair is None or num_bytes == 0:
        return Step()

    def cost(a, b):
        bw = _pair_bandwidth((a, b), env, shares)
        t = num_bytes * 8 / bw if bw > 0 else float('inf')
        powers = {a: t * env.device(a).comm_power, b: t * env.device(b).comm_power}
        return Cost(t, sum(powers.values())), powers

    fwd, fwd_energy = cost(*pair)
    if not workload.training:
        return Step(fwd=fwd, fwd_energy=fwd_energy)
    bwd, bwd_energy = cost(pair[1], pair[0])
    return Step(fwd=fwd, bwd=bwd, fwd_energy=fwd_energy, bwd_energy=bwd_energy)


def _compute_step(stage, env, model_graph, workload):
    cost = stage_cost(stage.nodes, stage.devices, stage.batch_alloc, env, model_graph,
                      tp_degree=stage.tp_degree, training=workload.training)
    gather, gather_energy = Cost(), {}
    if workload.training and stage.is_data_parallel:
        gather = gathering_time(stage, env, model_graph)
        gather_energy = {d: gather.t * env.device(d).comm_power for d in stage.devices}
    return Step(fwd=Cost(cost.fwd_time, cost.fwd_energy), bwd=Cost(cost.bwd_time, cost.bwd_energy),
                gather=gather, gather_energy=gather_energy,
                fwd_energy={d: c.fwd_energy for d, c in cost.per_device.items()},
                bwd_energy={d: c.bwd_energy for d, c in cost.per_device.items()},
                busy={d: c.fwd_time + c.bwd_time for d, c in cost.per_device.items()})


def _domain_shares(plan, env, workload):
    shares = {}
    for pair in set(_transfer_pairs(plan, env, workload.training)):
        domain = env.topology.domain_of(*pair)
        if domain is not None:
            shares[domain.id] = shares.get(domain.id, 0) + 1
    return shares


def _stage_key(stage):
    return stage.nodes, stage.devices, tuple(sorted(stage.batch_alloc.items())), stage.tp_degree


class _StepCache:
    """Steps of one plan. ``memo`` shares steps between plans of one environment and workload."""

    def __init__(self, plan, env, model_graph, workload, shares, memo=None):
        self.plan = plan
        self.env = env
        self.model_graph = model_graph
        self.workload = workload
        self.shares = shares
        self.shares_key = tuple(sorted(shares.items())) if shares is not None else None
        self.memo = {} if memo is None else memo
        self.compute = {}
        self.comm = {}

    def compute_step(self, stage_id):
        if stage_id not in self.compute:
            stage = self.plan.stage(stage_id)
            key = ('compute', _stage_key(stage))
            if key not in self.memo:
                self.memo[key] = _compute_step(stage, self.env, self.model_graph, self.workload)
            self.compute[stage_id] = self.memo[key]
        return self.compute[stage_id]

    def comm_step(self, u, v):
        if (u, v) not in self.comm:
            src, dst = self.plan.stage(u), self.plan.stage(v)
            key = ('comm', _stage_key(src), _stage_key(dst), self.shares_key)
            if key not in self.memo:
                self.memo[key] = _comm_step(src, dst, self.plan, self.env, self.model_graph, self.workload,
                                            self.shares)
            self.comm[u, v] = self.memo[key]
        return self.comm[u, v]


def build_step_list(plan, env, model_graph, workload, relaxed=True):
    if not plan.is_chain():
        raise NonChainPlan('Step lists need a chain of stages, estimate graph-shaped plans with estimate_plan')
    cache = _StepCache(plan, env, model_graph, workload, None if relaxed else _domain_shares(plan, env, workload))
    path = plan.chain_order()
    steps = []
    for i, stage_id in enumerate(path):
        if i > 0:
            steps.append(cache.comm_step(path[i - 1], stage_id))
        steps.append(cache.compute_step(stage_id))
    return steps


def estimate_plan(plan, env, model_graph, workload, weight=0.0, relaxed=True, memo=None):
    """Latency and energy of one training (or inference) iteration of ``workload.microbatches``.

    Every task's energy is counted once. Idle power covers the time a device is not
    computing. ``memo`` reuses steps across calls on the same environment and workload.
    """
    shares = None if relaxed else _domain_shares(plan, env, workload)
    cache = _StepCache(plan, env, model_graph, workload, shares, memo)
    stage_ids = [s.id for s in plan.stages]
    edges = list(plan.edges)
    m = workload.microbatches
    depth = max(stage_depths(stage_ids, edges).values(), default=0)
    if m < 2 * depth + 1:
        raise PipelineTooDeep(m, 2 * depth + 1)
    compute = {s: cache.compute_step(s) for s in stage_ids}
    comm = {(u, v): cache.comm_step(u, v) for u, v in edges}
    latency = pipeline_latency(stage_ids, edges, compute, comm, m, workload.training)

    per_device = {d: 0.0 for d in plan.devices}
    for step in list(compute.values()) + list(comm.values()):
        for d, e in step.fwd_energy.items():
            per_device[d] += m * e
        for d, e in step.bwd_energy.items():
            per_device[d] += m * e
        for d, e in step.gather_energy.items():
            per_device[d] += e
    for step in compute.values():
        for d, busy in step.busy.items():
            idle_power = env.device(d).idle_power
            if idle_power:
                per_device[d] += idle_power * max(0.0, latency - m * busy)

    energy = sum(per_device.values())
    return Estimate(latency, energy, latency + weight * energy, per_device)
