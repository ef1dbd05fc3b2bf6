"""Heterogeneity and QoE aware search over pipeline partitions.

Chains of the serially decomposed model are visited in order. A stage holds
either a contiguous segment of one chain or several whole chains, and runs on
the next contiguous window of ranked devices. Every DP cell keeps its best K
partial plans, scored with the contention-free estimate.
"""
import logging
import math
from dataclasses import dataclass, field

from Planner.envModel import per_microbatch_latency, stage_cost
from Planner.planEstimator import estimate_plan
from Planner.planModel import Plan, PlanMetrics, Stage, stage_edges, transfer_pair
from Utility.errors import EdgePlanError, InputError, NoFeasiblePlan

logger = logging.getLogger(__name__)


def objective_value(plan, qoe):
    metrics = plan.require_metrics()
    if not metrics.feasible:
        return math.inf
    return metrics.total_energy + qoe.lam * max(0.0, metrics.t_est - qoe.t_qoe)


# Transfer time ignoring contention, at the peak bandwidth of the carrying pair
def relaxed_comm_time(src_stage, dst_stage, num_bytes, topology):
    if num_bytes == 0:
        return 0.0
    pair = transfer_pair(src_stage.devices, dst_stage.devices, topology)
    if pair is None:
        return 0.0
    return num_bytes * 8 / topology.peak(*pair)


def balance_microbatches(per_device_latency, total):
    """Split ``total`` microbatch units proportionally to device speed, rounding by largest remainder."""
    if total < 1 or not per_device_latency or any(t <= 0 for t in per_device_latency):
        raise InputError('balance_microbatches needs positive latencies and at least one unit')
    speeds = [1.0 / t for t in per_device_latency]
    targets = [s / sum(speeds) * total for s in speeds]
    counts = [math.floor(t) for t in targets]
    order = sorted(range(len(targets)), key=lambda i: (-(targets[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class DpTable:
    q: dict = field(default_factory=dict)
    q1: dict = field(default_factory=dict)
    q2: dict = field(default_factory=dict)

    def sizes(self):
        return len(self.q), len(self.q1), len(self.q2)


@dataclass(frozen=True)
class _Partial:
    stages: tuple
    objective: float
    plan: Plan

    def key(self):
        return self.objective, self.plan.sort_key()


class PartitionSearch:

    def __init__(self, components, env, model_graph, qoe, k=5, max_stages=0):
        if k is not None and k < 1:
            raise InputError('K must be at least 1')
        self.env = env
        self.model_graph = model_graph
        self.qoe = qoe
        self.workload = qoe.workload
        self.k = k
        self.chains = [chain for component in components for chain in component.chains]
        self.devices = [d.id for d in env.online_devices]
        self.max_stages = max_stages or len(self.devices)
        self.table = DpTable()
        self._stage_memo = {}
        self._step_memo = {}

    def _top(self, partials):
        unique = {}
        for p in partials:
            unique.setdefault(tuple((s.nodes, s.devices) for s in p.stages), p)
        ranked = sorted(unique.values(), key=_Partial.key)
        return ranked if self.k is None else ranked[:self.k]

    # Build (and memoize) the stage for a node block on a device window, None when it cannot be hosted
    def _stage(self, nodes, devices):
        key = (nodes, devices)
        if key in self._stage_memo:
            return self._stage_memo[key]
        stage = None
        try:
            accelerators = min(self.env.device(d).accelerators for d in devices)
            tp_degree = accelerators if accelerators > 1 else 1
            latencies = []
            for d in devices:
                t = per_microbatch_latency(nodes, d, self.env, self.model_graph, self.workload.training)
                if tp_degree > 1:
                    t /= self.env.device(d).tp_speedup
                latencies.append(t if t > 0 else 1e-12)
            counts = balance_microbatches(latencies, self.workload.microbatch_units)
            alloc = dict(zip(devices, counts))
            cost = stage_cost(nodes, devices, alloc, self.env, self.model_graph, tp_degree=tp_degree,
                              training=self.workload.training)
            if all(cost.mem[d] <= self.env.device(d).mem_capacity for d in devices):
                stage = Stage(id='', nodes=nodes, devices=devices, batch_alloc=alloc, tp_degree=tp_degree)
        except EdgePlanError as e:
            logger.debug('Stage %s on %s rejected: %s', nodes, devices, e)
        self._stage_memo[key] = stage
        return stage

    def _extend(self, partial, nodes, devices, provenance):
        stage = self._stage(nodes, devices)
        if stage is None:
            return None
        stages = partial.stages + (stage,)
        named = tuple(Stage(f's{i}', s.nodes, s.devices, s.batch_alloc, s.tp_degree) for i, s in enumerate(stages))
        plan = Plan(named, stage_edges(named, self.model_graph), provenance=provenance)
        try:
            estimate = estimate_plan(plan, self.env, self.model_graph, self.workload, memo=self._step_memo)
        except EdgePlanError as e:
            logger.debug('Partial plan rejected: %s', e)
            return None
        plan = plan.with_metrics(PlanMetrics(estimate.t_latency, estimate.per_device))
        return _Partial(stages, objective_value(plan, self.qoe), plan)

    def _q(self, j, s, n):
        return self.table.q.get((j, s, n), [])

    def _q1(self, j, l, s, n):
        if l == 0:
            return self._q(j - 1, s, n)
        return self.table.q1.get((j, l, s, n), [])

    def run(self):
        n_devices = len(self.devices)
        empty = Plan(())
        self.table.q[(0, 0, 0)] = [_Partial((), 0.0, empty)]

        for j in range(1, len(self.chains) + 1):
            chain = self.chains[j - 1]
            length = len(chain)
            for s in range(1, self.max_stages + 1):
                for n in range(s, n_devices + 1):
                    # a new stage holding chain j nodes l'..l on devices n'+1..n
                    for l in range(1, length + 1):
                        candidates = []
                        for l_prev in range(l):
                            for n_prev in range(s - 1, n):
                                window = tuple(self.devices[n_prev:n])
                                for partial in self._q1(j, l_prev, s - 1, n_prev):
                                    extended = self._extend(partial, tuple(chain[l_prev:l]), window, (j, s, n))
                                    if extended is not None:
                                        candidates.append(extended)
                        if candidates:
                            self.table.q1[(j, l, s, n)] = self._top(candidates)

                    # a new stage holding whole chains k..j
                    for k in range(1, j):
                        nodes = tuple(node for c in self.chains[k - 1:j] for node in c)
                        candidates = []
                        for n_prev in range(s - 1, n):
                            window = tuple(self.devices[n_prev:n])
                            for partial in self._q(k - 1, s - 1, n_prev):
                                extended = self._extend(partial, nodes, window, (j, s, n))
                                if extended is not None:
                                    candidates.append(extended)
                        if candidates:
                            self.table.q2[(j, k, s, n)] = self._top(candidates)

                    merged = list(self.table.q1.get((j, length, s, n), []))
                    for k in range(1, j):
                        merged.extend(self.table.q2.get((j, k, s, n), []))
                    if merged:
                        self.table.q[(j, s, n)] = self._top(merged)
            logger.debug('Chain %d/%d done, table sizes %s', j, len(self.chains), self.table.sizes())

        final = []
        for s in range(1, self.max_stages + 1):
            for n in range(s, n_devices + 1):
                final.extend(self._q(len(self.chains), s, n))
        final = [p for p in self._top(final) if math.isfinite(p.objective)]
        if not final:
            raise NoFeasiblePlan('No partition fits the devices memory and pipeline depth')
        return [p.plan for p in final]


def partition_search(components, env, model_graph, qoe, k=5, max_stages=0):
    return PartitionSearch(components, env, model_graph, qoe, k=k, max_stages=max_stages).run()
