import logging
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx

from Planner.envModel import stage_cost
from Planner.planEstimator import FWD, pipeline_order, stage_depths
from Planner.planModel import transfer_bytes, transfer_pair

logger = logging.getLogger(__name__)

COMPUTE = 'compute'
COMM = 'comm'


@dataclass(frozen=True)
class CepTask:
    id: str
    kind: str
    stage: str = ''
    microbatch: int = 0
    direction: str = 'fwd'
    duration: float = 0.0
    bytes: float = 0.0
    src: str = None
    dst: str = None
    domain: str = None
    # compute only: nominal seconds and joules per replica device
    work: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    # comm only: devices drawing communication power while the transfer is active
    parties: tuple = ()

    @property
    def is_comm(self):
        return self.kind == COMM

    @property
    def bw_demand(self):
        if not self.is_comm or self.duration <= 0:
            return 0.0
        return self.bytes * 8 / self.duration


@dataclass
class CepGraph:
    tasks: dict
    deps: list

    @cached_property
    def nx_graph(self):
        g = nx.DiGraph()
        g.add_nodes_from(self.tasks)
        g.add_edges_from(self.deps)
        return g

    def task(self, task_id):
        return self.tasks[task_id]

    def predecessors(self, task_id):
        return list(self.nx_graph.predecessors(task_id))

    def successors(self, task_id):
        return list(self.nx_graph.successors(task_id))

    def comm_tasks(self):
        return [t for t in self.tasks.values() if t.is_comm]

    def compute_tasks(self):
        return [t for t in self.tasks.values() if not t.is_comm]

    @property
    def devices(self):
        found = {}
        for t in self.tasks.values():
            for d in list(t.work) + list(t.parties):
                found[d] = None
        return list(found)

    # Longest duration-weighted path from each task to any sink, the task included
    def critical_path(self):
        g = self.nx_graph
        length = {}
        for task_id in reversed(list(nx.topological_sort(g))):
            tail = max((length[s] for s in g.successors(task_id)), default=0.0)
            length[task_id] = self.tasks[task_id].duration + tail
        return length


def full_rate(topology, src, dst):
    peak = topology.peak(src, dst)
    domain = topology.domain_of(src, dst)
    if domain is not None and domain.capacity > 0:
        return min(peak, domain.capacity)
    return peak


def comm_task(task_id, num_bytes, src, dst, topology, parties=None, **kwargs):
    domain = topology.domain_of(src, dst)
    duration = num_bytes * 8 / full_rate(topology, src, dst) if num_bytes else 0.0
    return CepTask(task_id, COMM, duration=duration, bytes=num_bytes, src=src, dst=dst,
                   domain=domain.id if domain is not None else None,
                   parties=tuple(parties) if parties else (src, dst), **kwargs)


def _compute_task(task_id, stage, j, direction, cost):
    if direction == 'fwd':
        work = {d: c.fwd_time for d, c in cost.per_device.items()}
        energy = {d: c.fwd_energy for d, c in cost.per_device.items()}
    else:
        work = {d: c.bwd_time for d, c in cost.per_device.items()}
        energy = {d: c.bwd_energy for d, c in cost.per_device.items()}
    return CepTask(task_id, COMPUTE, stage=stage.id, microbatch=j, direction=direction,
                   duration=max(work.values(), default=0.0), work=work, energy=energy)


def build_cep_graph(plan, env, model_graph, workload):
    """Expand a plan into per-microbatch compute tasks and explicit transfer tasks.

    Each stage's tasks are chained in pipeline order and each transfer direction
    carries its microbatches in order, the same rules ``estimate_plan`` assumes.
    """
    m = workload.microbatches
    training = workload.training
    tasks = {}
    deps = []

    depths = stage_depths([s.id for s in plan.stages], plan.edges)
    for stage_id in plan.chain_order():
        stage = plan.stage(stage_id)
        cost = stage_cost(stage.nodes, stage.devices, stage.batch_alloc, env, model_graph,
                          tp_degree=stage.tp_degree, training=training)
        previous = None
        for direction, j in pipeline_order(depths[stage_id], m, training):
            task_id = f'{"F" if direction == FWD else "B"}:{stage_id}:{j}'
            tasks[task_id] = _compute_task(task_id, stage, j, direction, cost)
            if previous is not None:
                deps.append((previous, task_id))
            previous = task_id

    for u, v in plan.edges:
        src, dst = plan.stage(u), plan.stage(v)
        pair = transfer_pair(src.devices, dst.devices, env.topology)
        num_bytes = transfer_bytes(src, dst, model_graph, workload.microbatch_units)
        for j in range(m):
            if pair is None:
                deps.append((f'F:{u}:{j}', f'F:{v}:{j}'))
                if training:
                    deps.append((f'B:{v}:{j}', f'B:{u}:{j}'))
                continue
            act = f'A:{u}>{v}:{j}'
            tasks[act] = comm_task(act, num_bytes, pair[0], pair[1], env.topology, stage=u, microbatch=j)
            deps.extend([(f'F:{u}:{j}', act), (act, f'F:{v}:{j}')])
            if j > 0:
                deps.append((f'A:{u}>{v}:{j - 1}', act))
            if training:
                grad = f'G:{v}>{u}:{j}'
                tasks[grad] = comm_task(grad, num_bytes, pair[1], pair[0], env.topology, stage=v,
                                        microbatch=j, direction='bwd')
                deps.extend([(f'B:{v}:{j}', grad), (grad, f'B:{u}:{j}')])
                if j > 0:
                    deps.append((f'G:{v}>{u}:{j - 1}', grad))

    if training:
        for stage in plan.stages:
            if not stage.is_data_parallel:
                continue
            x = len(stage.devices)
            num_bytes = 2 * (x - 1) / x * model_graph.param_bytes_of(stage.nodes)
            pairs = [(a, b) for a in stage.devices for b in stage.devices if a != b]
            slowest = min(pairs, key=lambda p: (env.topology.peak(*p), p))
            gather = f'R:{stage.id}'
            tasks[gather] = comm_task(gather, num_bytes, slowest[0], slowest[1], env.topology,
                                      parties=stage.devices, stage=stage.id, microbatch=m - 1,
                                      direction='sync')
            deps.append((f'B:{stage.id}:{m - 1}', gather))

    graph = CepGraph(tasks, deps)
    logger.debug('CEP graph: %d tasks, %d deps', len(tasks), len(deps))
    return graph


def cep_graph_to_document_body(graph):
    tasks = []
    for t in graph.tasks.values():
        entry = {'id': t.id, 'kind': t.kind, 'stage': t.stage, 'microbatch': t.microbatch,
                 'direction': t.direction, 'duration': t.duration}
        if t.is_comm:
            entry.update(bytes=t.bytes, src=t.src, dst=t.dst, domain=t.domain, parties=list(t.parties))
        else:
            entry.update(work=dict(t.work), energy=dict(t.energy))
        tasks.append(entry)
    return {'tasks': tasks, 'deps': [list(d) for d in graph.deps]}


def cep_graph_from_document_body(body):
    tasks = {}
    for entry in body['tasks']:
        task = CepTask(entry['id'], entry['kind'], stage=entry.get('stage', ''),
                       microbatch=int(entry.get('microbatch', 0)), direction=entry.get('direction', 'fwd'),
                       duration=float(entry.get('duration', 0.0)), bytes=float(entry.get('bytes', 0.0)),
                       src=entry.get('src'), dst=entry.get('dst'), domain=entry.get('domain'),
                       work={d: float(v) for d, v in entry.get('work', {}).items()},
                       energy={d: float(v) for d, v in entry.get('energy', {}).items()},
                       parties=tuple(entry.get('parties', ())))
        tasks[task.id] = task
    return CepGraph(tasks, [tuple(d) for d in body['deps']])
