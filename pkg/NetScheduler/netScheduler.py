import itertools
import logging
import math
import queue
import threading
from dataclasses import dataclass, field

from NetScheduler.cepGraph import (CepGraph, CepTask, build_cep_graph, full_rate, cep_graph_from_document_body,
                                   cep_graph_to_document_body)
from Planner.partitioner import objective_value
from Planner.planModel import PlanMetrics
from Simulator.simEngine import FluidEngine
from Utility.documents import make_document, check_document, require
from Utility.errors import EdgePlanError, InputError, NoFeasiblePlan, UnschedulableTask

logger = logging.getLogger(__name__)

CRITICAL_PATH = 'critical_path'
FAIR_SHARE = 'fair_share'
TOLERANCE = 1e-9
# simulations one schedule may spend on transfer orders
SEARCH_BUDGET = 120


@dataclass
class Schedule:
    graph: CepGraph
    intervals: dict
    bw: dict
    makespan: float
    priority: dict = None
    # chunks per transfer, 0 for a fluid schedule
    chunks: int = 0
    energy: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    at: float
    message: str


@dataclass(frozen=True)
class RankedPlan:
    plan: object
    schedule: Schedule
    objective: float
    qoe_ok: bool


@dataclass
class Selection:
    best: object
    schedule: Schedule
    ranking: list


def _check_capacities(graph, env):
    for task in graph.comm_tasks():
        if task.domain is not None and task.bytes > 0 and env.topology.domain(task.domain).capacity <= 0:
            raise UnschedulableTask(task.id, task.domain)


def _run(graph, env, priority, nonpreemptive=False, chunks=0):
    engine = FluidEngine(env)
    result = engine.simulate(graph, priority, nonpreemptive)
    record = result.iterations[0]
    intervals = {t: tuple(v) for t, v in record.intervals.items()}
    bw = {t: [tuple(s) for s in segments] for t, segments in record.segments.items()}
    return Schedule(graph, intervals, bw, result.makespan, priority, chunks, result.energy)


def _priority(comm_order, graph, length):
    rest = sorted((t for t in graph.tasks if not graph.task(t).is_comm), key=lambda t: (-length[t], t))
    return {t: i for i, t in enumerate(list(comm_order) + rest)}


def _comm_orders(graph, length, budget):
    """Transfer orders worth simulating: every permutation of a few transfers, else a few rules."""
    comm = sorted((t.id for t in graph.comm_tasks()), key=lambda t: (-length[t], t))
    if math.factorial(len(comm)) <= budget:
        yield from itertools.permutations(comm)
        return
    yield comm
    yield sorted(comm, key=lambda t: (graph.task(t).microbatch, -length[t], t))
    yield sorted(comm, key=lambda t: (graph.task(t).bytes, -length[t], t))


def solve_schedule(graph, env, policy=CRITICAL_PATH, budget=SEARCH_BUDGET):
    """Event-driven malleable schedule: at every event each domain serves ready transfers by priority.

    The critical-path policy simulates every transfer order when the orders number
    at most ``budget``. Otherwise it tries the critical-path, microbatch and
    smallest-first orders. The shortest schedule is kept.
    The fair-share policy splits every domain max-min.
    """
    _check_capacities(graph, env)
    if policy == FAIR_SHARE:
        return _run(graph, env, None)
    if policy != CRITICAL_PATH:
        raise InputError(f'Unknown scheduling policy {policy}')
    length = graph.critical_path()
    best = None
    evaluated = 0
    for order in _comm_orders(graph, length, budget):
        schedule = _run(graph, env, _priority(order, graph, length))
        evaluated += 1
        if best is None or schedule.makespan < best.makespan - TOLERANCE:
            best = schedule
    logger.debug('Schedule of %d tasks, makespan %.6fs, %d transfer orders tried', len(graph.tasks),
                 best.makespan, evaluated)
    return best


# Time at which a transfer has moved the given number of bits in its fluid schedule
def _progress_time(segments, bits):
    done = 0.0
    for start, end, rate in segments:
        step = (end - start) * rate
        if done + step >= bits - TOLERANCE * max(bits, 1.0):
            return start + max(0.0, bits - done) / rate
        done += step
    return segments[-1][1] if segments else 0.0


def chunkify(schedule, w, env):
    """Replace each transfer by ``w`` sequential chunks, a started chunk keeps its bandwidth.

    Two chunk orders are simulated: chunks inheriting their transfer's fluid
    priority, and chunks ordered by the time the fluid schedule reached their
    share of the transfer. The one closest to the fluid makespan is kept.
    """
    if w < 1:
        raise InputError('chunks per transfer must be at least 1')
    graph = schedule.graph
    tasks = {}
    deps = []
    first, last = {}, {}
    inherited, deadline = {}, {}
    fluid_priority = schedule.priority or {}
    for task in graph.tasks.values():
        rank = fluid_priority.get(task.id, len(fluid_priority))
        if not task.is_comm or task.bytes == 0:
            tasks[task.id] = task
            first[task.id] = last[task.id] = task.id
            inherited[task.id] = (rank, 0)
            deadline[task.id] = schedule.intervals[task.id][1]
            continue
        total_bits = task.bytes * 8
        rate = full_rate(env.topology, task.src, task.dst)
        ids = [f'{task.id}#{k}' for k in range(w)]
        for k, chunk_id in enumerate(ids):
            tasks[chunk_id] = CepTask(chunk_id, task.kind, stage=task.stage, microbatch=task.microbatch,
                                      direction=task.direction, duration=total_bits / w / rate,
                                      bytes=task.bytes / w, src=task.src, dst=task.dst, domain=task.domain,
                                      parties=task.parties)
            inherited[chunk_id] = (rank, k)
            deadline[chunk_id] = _progress_time(schedule.bw.get(task.id, []), total_bits * (k + 1) / w)
            if k > 0:
                deps.append((ids[k - 1], chunk_id))
        first[task.id], last[task.id] = ids[0], ids[-1]
    for u, v in graph.deps:
        deps.append((last[u], first[v]))

    chunk_graph = CepGraph(tasks, deps)
    best = None
    for key in (inherited, deadline):
        ordered = sorted(tasks, key=lambda t: (key[t], t))
        chunked = _run(chunk_graph, env, {t: i for i, t in enumerate(ordered)}, nonpreemptive=True, chunks=w)
        if best is None or abs(chunked.makespan - schedule.makespan) < abs(best.makespan - schedule.makespan):
            best = chunked
    logger.debug('Chunked into %d tasks, makespan %.6fs (fluid %.6fs)', len(tasks), best.makespan,
                 schedule.makespan)
    return best


def check_bandwidth_feasibility(schedule, env):
    violations = []
    points = sorted({t for segments in schedule.bw.values() for s in segments for t in s[:2]})
    for start, end in zip(points, points[1:]):
        if end - start <= TOLERANCE:
            continue
        mid = (start + end) / 2
        load = {}
        for task_id, segments in schedule.bw.items():
            task = schedule.graph.task(task_id)
            for s in segments:
                if s[0] <= mid < s[1]:
                    if s[2] > env.topology.peak(task.src, task.dst) * (1 + TOLERANCE):
                        violations.append(Violation('peak', task_id, mid, f'{task_id} exceeds its peak bandwidth'))
                    if task.domain is not None:
                        load[task.domain] = load.get(task.domain, 0.0) + s[2]
        for domain_id, total in load.items():
            capacity = env.topology.domain(domain_id).capacity
            if total > capacity * (1 + TOLERANCE):
                violations.append(Violation('capacity', domain_id, mid,
                                            f'{domain_id} carries {total:.0f} bps over {capacity:.0f} bps'))
    return violations


def check_dependencies(schedule):
    violations = []
    for u, v in schedule.graph.deps:
        finish = schedule.intervals[u][1]
        start = schedule.intervals[v][0]
        if finish > start + TOLERANCE * max(1.0, abs(start)):
            violations.append(Violation('dependency', f'{u}->{v}', finish, f'{v} starts before {u} finishes'))
    return violations


def schedule_timeline(schedule):
    rows = []
    for task_id, (start, finish) in schedule.intervals.items():
        task = schedule.graph.task(task_id)
        resource = (task.domain or f'{task.src}>{task.dst}') if task.is_comm else task.stage
        rows.append([task_id, resource, start, finish])
    return sorted(rows, key=lambda r: (r[2], r[0]))


def _refine(plan, env, model_graph, qoe, chunks):
    graph = build_cep_graph(plan, env, model_graph, qoe.workload)
    schedule = solve_schedule(graph, env)
    if chunks > 0:
        schedule = chunkify(schedule, chunks, env)
    feasible = plan.metrics.feasible if plan.metrics is not None else True
    refined = plan.with_metrics(PlanMetrics(schedule.makespan, schedule.energy, feasible))
    objective = objective_value(refined, qoe)
    return RankedPlan(refined, schedule, objective, schedule.makespan <= qoe.t_qoe)


def refine_and_select(candidates, env, model_graph, qoe, chunks=0, threads=1):
    """Schedule every candidate under contention and pick the lowest objective.

    Candidates that fail with an ``EdgePlanError`` are dropped; any other error is
    raised again once every worker has stopped.
    """
    if not candidates:
        raise NoFeasiblePlan('No candidate plan to refine')

    jobs = queue.Queue()
    for i, plan in enumerate(candidates):
        jobs.put((i, plan))
    results = {}
    errors = {}

    def worker():
        while True:
            try:
                i, plan = jobs.get_nowait()
            except queue.Empty:
                return
            try:
                results[i] = _refine(plan, env, model_graph, qoe, chunks)
            except Exception as e:
                errors[i] = e
                logger.debug('Candidate %d dropped: %s', i, e)
            jobs.task_done()

    workers = [threading.Thread(target=worker, daemon=True) for _ in range(max(1, threads))]
    for t in workers:
        t.start()
    for t in workers:
        t.join()

    for i in sorted(errors):
        if not isinstance(errors[i], EdgePlanError):
            raise errors[i]
    ranking = sorted((results[i] for i in sorted(results)),
                     key=lambda r: (r.objective, r.plan.sort_key()))
    if not ranking or math.isinf(ranking[0].objective):
        reasons = '; '.join(f'#{i}: {errors[i]}' for i in sorted(errors))
        raise NoFeasiblePlan(f'None of the {len(candidates)} candidates could be scheduled'
                             + (f' ({reasons})' if reasons else ''))
    best = ranking[0]
    return Selection(best.plan, best.schedule, ranking)


def schedule_to_document(schedule):
    body = cep_graph_to_document_body(schedule.graph)
    body.update(intervals={t: list(v) for t, v in schedule.intervals.items()},
                bw={t: [list(s) for s in segments] for t, segments in schedule.bw.items()},
                makespan=schedule.makespan, priority=schedule.priority, chunks=schedule.chunks,
                energy=dict(schedule.energy))
    return make_document('schedule', body)


def schedule_from_document(doc):
    check_document(doc, 'schedule')
    graph = cep_graph_from_document_body(doc)
    priority = doc.get('priority')
    return Schedule(graph,
                    {t: tuple(v) for t, v in require(doc, 'intervals', 'schedule').items()},
                    {t: [tuple(s) for s in segments] for t, segments in doc.get('bw', {}).items()},
                    float(require(doc, 'makespan', 'schedule')),
                    {t: int(p) for t, p in priority.items()} if priority is not None else None,
                    int(doc.get('chunks', 0)),
                    {d: float(e) for d, e in doc.get('energy', {}).items()})
