import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import networkx as nx

from Utility.documents import make_document, check_document, require
from Utility.errors import InputError, MissingMetrics, NoRoute


@dataclass(frozen=True)
class Stage:
    """Contiguous model subgraph replicated over a device group (data parallel when the group has several devices)."""
    id: str
    nodes: tuple
    devices: tuple
    batch_alloc: dict = field(default_factory=dict)
    tp_degree: int = 1

    @property
    def is_data_parallel(self):
        return len(self.devices) > 1

    @property
    def units(self):
        return sum(self.batch_alloc.values())


@dataclass(frozen=True)
class PlanMetrics:
    t_est: float
    e_est: dict
    feasible: bool = True

    @property
    def total_energy(self):
        return sum(self.e_est.values())


@dataclass(frozen=True)
class Plan:
    stages: tuple
    edges: tuple = ()
    metrics: PlanMetrics = None
    provenance: tuple = ()

    @cached_property
    def nx_graph(self):
        g = nx.DiGraph()
        g.add_nodes_from(s.id for s in self.stages)
        g.add_edges_from(self.edges)
        return g

    @cached_property
    def _by_id(self):
        return {s.id: s for s in self.stages}

    def stage(self, stage_id):
        return self._by_id[stage_id]

    @property
    def devices(self):
        return [d for s in self.stages for d in s.devices]

    @property
    def num_devices(self):
        return len(self.devices)

    # Node ids hosted by every device of the plan
    def assignment(self):
        hosted = {}
        for s in self.stages:
            for d in s.devices:
                hosted.setdefault(d, set()).update(s.nodes)
        return hosted

    def is_chain(self):
        g = self.nx_graph
        return nx.is_directed_acyclic_graph(g) and all(g.in_degree(s) <= 1 and g.out_degree(s) <= 1 for s in g) \
            and nx.number_weakly_connected_components(g) <= 1

    def chain_order(self):
        return list(nx.topological_sort(self.nx_graph))

    def require_metrics(self):
        if self.metrics is None:
            raise MissingMetrics('Plan has no metrics, estimate or refine it first')
        return self.metrics

    def with_metrics(self, metrics):
        return replace(self, metrics=metrics)

    # Deterministic tie-breaking among equal objectives
    def sort_key(self):
        return len(self.stages), self.num_devices, tuple(s.nodes for s in self.stages)


def stage_edges(stages, model_graph):
    owner = {n: s.id for s in stages for n in s.nodes}
    edges = []
    for u, v in model_graph.edges:
        if u in owner and v in owner and owner[u] != owner[v]:
            edges.append((owner[u], owner[v]))
    return tuple(dict.fromkeys(edges))


# Pair carrying an inter-stage transfer: the slowest peak link between the two groups, ties by ids
def transfer_pair(src_devices, dst_devices, topology):
    if set(src_devices) & set(dst_devices):
        return None
    pairs = [(a, b) for a in src_devices for b in dst_devices]
    return min(pairs, key=lambda p: (topology.peak(*p), p))


def transfer_bytes(src_stage, dst_stage, model_graph, units):
    dst_nodes = set(dst_stage.nodes)
    boundary = [n for n in src_stage.nodes if any(v in dst_nodes for v in model_graph.successors(n))]
    return sum(model_graph.node(n).activation_bytes for n in boundary) * units


def validate_plan(plan, model_graph, workload=None):
    covered = [n for s in plan.stages for n in s.nodes]
    expected = {n.id for n in model_graph.nodes if not n.is_virtual}
    if len(covered) != len(set(covered)) or set(covered) != expected:
        raise InputError('Plan stages must partition the model nodes')
    devices = plan.devices
    if len(devices) != len(set(devices)):
        raise InputError('Plan stages must use disjoint device groups')
    if not nx.is_directed_acyclic_graph(plan.nx_graph):
        raise InputError('Plan stage graph has a cycle')
    for s in plan.stages:
        if not s.devices or set(s.batch_alloc) - set(s.devices):
            raise InputError(f'Stage {s.id} has an invalid device allocation')
        if workload is not None and s.units != workload.microbatch_units:
            raise InputError(f'Stage {s.id} allocates {s.units} units, expected {workload.microbatch_units}')
    return plan


def check_routes(plan, topology):
    for u, v in plan.edges:
        transfer_pair(plan.stage(u).devices, plan.stage(v).devices, topology)
    for s in plan.stages:
        for a in s.devices:
            for b in s.devices:
                if a != b and not topology.has_route(a, b):
                    raise NoRoute(a, b)


def _number(value):
    return value if math.isfinite(value) else None


def plan_to_document(plan):
    body = {'stages': [{'id': s.id, 'nodes': list(s.nodes), 'devices': list(s.devices),
                        'batch_alloc': dict(s.batch_alloc), 'tp_degree': s.tp_degree} for s in plan.stages],
            'edges': [list(e) for e in plan.edges],
            'provenance': list(plan.provenance)}
    if plan.metrics is not None:
        body['metrics'] = {'t_est': _number(plan.metrics.t_est), 'e_est': dict(plan.metrics.e_est),
                           'feasible': plan.metrics.feasible}
    return make_document('plan', body)


def plan_from_document(doc):
    check_document(doc, 'plan')
    stages = tuple(Stage(id=str(require(s, 'id', 'stage')), nodes=tuple(require(s, 'nodes', 'stage')),
                         devices=tuple(require(s, 'devices', 'stage')),
                         batch_alloc={d: int(c) for d, c in s.get('batch_alloc', {}).items()},
                         tp_degree=int(s.get('tp_degree', 1)))
                   for s in require(doc, 'stages', 'plan'))
    metrics = None
    if doc.get('metrics'):
        m = doc['metrics']
        t_est = math.inf if m.get('t_est') is None else float(m['t_est'])
        metrics = PlanMetrics(t_est, {d: float(e) for d, e in m.get('e_est', {}).items()}, bool(m.get('feasible', True)))
    return Plan(stages, tuple(tuple(e) for e in doc.get('edges', ())), metrics, tuple(doc.get('provenance', ())))
