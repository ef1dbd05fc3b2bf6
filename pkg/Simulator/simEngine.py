"""Deterministic discrete-event execution of CEP task graphs.

Compute tasks occupy their stage; a data-parallel task runs one replica per
device at that device's current speed. Transfers share their contention
domain, either max-min fair or by strict priority when a schedule gives one.
Trace events change capacities and speeds at their timestamp.
"""
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field

import simpy

from NetScheduler.cepGraph import build_cep_graph
from Planner.envModel import apply_event
from Utility.documents import make_document, check_document, require
from Utility.errors import DeadDevice, InputError, UnschedulableTask

logger = logging.getLogger(__name__)

EVENT_KINDS = ('bw_change', 'compute_scale', 'device_leave', 'device_join')
TIME_EPS = 1e-12


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: str
    target: str
    value: float = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise InputError(f'Unknown trace event kind {self.kind}')
        if self.t < 0:
            raise InputError('Trace events need a non-negative time')
        if self.kind == 'compute_scale' and (self.value is None or self.value <= 0):
            raise InputError('compute_scale needs a positive factor')
        if self.kind == 'bw_change' and (self.value is None or self.value < 0):
            raise InputError('bw_change needs a non-negative capacity')


@dataclass(frozen=True)
class DynamicsTrace:
    events: tuple = ()

    def __post_init__(self):
        times = [e.t for e in self.events]
        if times != sorted(times):
            raise InputError('Trace events must be ordered by time')

    def shifted(self, offset):
        return DynamicsTrace(tuple(TraceEvent(max(0.0, e.t - offset), e.kind, e.target, e.value)
                                   for e in self.events if e.t >= offset))


@dataclass(frozen=True)
class TimelineRow:
    task: str
    resource: str
    start_s: float
    finish_s: float
    energy_j: float
    iteration: int = 0


@dataclass
class IterationRecord:
    start: float
    finish: float = math.nan
    intervals: dict = field(default_factory=dict)
    segments: dict = field(default_factory=dict)

    @property
    def latency(self):
        return self.finish - self.start


@dataclass
class SimResult:
    makespan: float
    energy: dict
    latencies: list
    timeline: list
    idle_energy: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    events_applied: list = field(default_factory=list)
    interrupted: bool = False

    @property
    def total_energy(self):
        return sum(self.energy.values())


@dataclass(frozen=True)
class ObjectiveReport:
    value: float
    budget_violations: tuple = ()


class FluidEngine:
    """Event loop on a simpy clock: each timeout lasts until the next completion or trace event."""

    def __init__(self, env, trace=None, replan_hook=None):
        self.env = env
        self.sim = simpy.Environment()
        self.events = deque(trace.events if trace else ())
        self.replan_hook = replan_hook
        self.speed = {d.id: 1.0 for d in env.devices}
        self.busy = defaultdict(float)
        self.energy = defaultdict(float)
        self.timeline = []
        self.applied = []
        self.interrupted = False

    def simulate(self, graph, priority=None, nonpreemptive=False, iterations=1):
        if iterations < 1:
            raise InputError('At least one iteration is needed')
        process = self.sim.process(self._iterations(graph, priority, nonpreemptive, iterations))
        self.sim.run(until=process)
        records = process.value

        makespan = self.sim.now
        idle = {}
        for d in graph.devices:
            idle_power = self.env.device(d).idle_power if d in {x.id for x in self.env.devices} else 0.0
            idle[d] = idle_power * max(0.0, makespan - self.busy[d])
        energy = {d: self.energy[d] + idle[d] for d in graph.devices}
        logger.debug('Simulated %d iterations in %.6fs, %d trace events applied', len(records), makespan,
                     len(self.applied))
        return SimResult(makespan, energy, [r.latency for r in records if not math.isnan(r.finish)],
                         self.timeline, idle, records, list(self.applied), self.interrupted)

    def _iterations(self, graph, priority, nonpreemptive, iterations):
        records = []
        for index in range(iterations):
            record = IterationRecord(self.sim.now)
            records.append(record)
            yield from self._iteration(graph, priority, nonpreemptive, index, record)
            if self.interrupted:
                break
            record.finish = self.sim.now
        return records

    def _apply_due_events(self, graph, unfinished):
        while self.events and self.events[0].t <= self.sim.now + TIME_EPS:
            event = self.events.popleft()
            self.env = apply_event(self.env, event)
            self.applied.append(event)
            logger.debug('t=%.6f %s %s %s', self.sim.now, event.kind, event.target, event.value)
            if event.kind == 'compute_scale':
                self.speed[event.target] = self.speed.get(event.target, 1.0) * event.value
            elif event.kind == 'device_leave' and unfinished and event.target in graph.devices:
                if self.replan_hook is None:
                    raise DeadDevice(event.target, self.sim.now)
                self.replan_hook(event, self.sim.now, self)
                self.interrupted = True
                return

    def _rates(self, graph, active, priority, nonpreemptive, started):
        by_domain = defaultdict(list)
        for task_id in active:
            by_domain[graph.task(task_id).domain].append(task_id)
        capacities = {d.id: d.capacity for d in self.env.topology.domains}

        rates = {}
        for domain_id, task_ids in by_domain.items():
            caps = {t: self.env.topology.peak(graph.task(t).src, graph.task(t).dst) for t in task_ids}
            if domain_id is None:
                rates.update(caps)
                continue
            remaining = capacities[domain_id]
            if priority is None:
                # max-min fair share, each flow capped by its peak
                ordered = sorted(task_ids, key=lambda t: (caps[t], t))
                for i, t in enumerate(ordered):
                    rates[t] = min(caps[t], remaining / (len(ordered) - i))
                    remaining -= rates[t]
            else:
                ordered = sorted(task_ids, key=lambda t: (not (nonpreemptive and t in started), priority[t], t))
                for t in ordered:
                    rates[t] = min(caps[t], remaining)
                    remaining -= rates[t]
        return rates

    def _iteration(self, graph, priority, nonpreemptive, index, record):
        waiting = {t: len(graph.predecessors(t)) for t in graph.tasks}
        queued = defaultdict(list)
        running = {}
        active = {}
        started_comm = set()
        active_time = defaultdict(float)
        replica_finish = {}
        finished = 0

        def release(task_id):
            task = graph.task(task_id)
            if task.is_comm:
                active[task_id] = task.bytes * 8
                record.intervals[task_id] = [None, None]
            else:
                queued[task.stage].append(task_id)

        def complete(task_id):
            nonlocal finished
            finished += 1
            task = graph.task(task_id)
            interval = record.intervals[task_id]
            if interval[0] is None:
                interval[0] = self.sim.now
            interval[1] = self.sim.now
            start = interval[0]
            if task.is_comm:
                energy = active_time[task_id] * sum(self.env.device(p).comm_power for p in task.parties)
                for p in task.parties:
                    self.energy[p] += active_time[task_id] * self.env.device(p).comm_power
                resource = task.domain or f'{task.src}>{task.dst}'
                self.timeline.append(TimelineRow(task_id, resource, start, self.sim.now, energy, index))
            else:
                for d in task.work:
                    self.energy[d] += task.energy.get(d, 0.0)
                    self.timeline.append(TimelineRow(task_id, d, start, replica_finish.get((task_id, d), start),
                                                     task.energy.get(d, 0.0), index))
            for succ in graph.successors(task_id):
                waiting[succ] -= 1
                if waiting[succ] == 0:
                    release(succ)

        for task_id in graph.tasks:
            if waiting[task_id] == 0:
                release(task_id)

        while finished < len(graph.tasks):
            self._apply_due_events(graph, True)
            if self.interrupted:
                return

            progressed = True
            while progressed:
                progressed = False
                for stage, task_ids in queued.items():
                    if stage in running or not task_ids:
                        continue
                    # backward before forward, then the oldest microbatch
                    task_ids.sort(key=lambda t: (graph.task(t).direction != 'bwd', graph.task(t).microbatch, t))
                    task_id = task_ids.pop(0)
                    record.intervals[task_id] = [self.sim.now, None]
                    running[stage] = (task_id, dict(graph.task(task_id).work))
                for stage, (task_id, remaining) in list(running.items()):
                    for d, rem in remaining.items():
                        if rem <= TIME_EPS and (task_id, d) not in replica_finish:
                            replica_finish[(task_id, d)] = self.sim.now
                    if all(rem <= TIME_EPS for rem in remaining.values()):
                        del running[stage]
                        complete(task_id)
                        progressed = True
                for task_id, bits in list(active.items()):
                    if bits <= 0:
                        del active[task_id]
                        complete(task_id)
                        progressed = True
            if finished == len(graph.tasks):
                break

            rates = self._rates(graph, active, priority, nonpreemptive, started_comm)
            dt = math.inf
            for task_id, remaining in running.values():
                for d, rem in remaining.items():
                    if rem > TIME_EPS:
                        dt = min(dt, rem / self.speed.get(d, 1.0))
            for task_id, bits in active.items():
                if rates[task_id] > 0:
                    dt = min(dt, bits / rates[task_id])
            if self.events:
                dt = min(dt, max(0.0, self.events[0].t - self.sim.now))
            if math.isinf(dt):
                stuck = next(iter(active), None)
                if stuck is None:
                    raise RuntimeError('Simulation stalled with no runnable task')
                raise UnschedulableTask(stuck, graph.task(stuck).domain)

            yield self.sim.timeout(dt)

            for task_id, remaining in running.values():
                for d, rem in remaining.items():
                    if rem <= TIME_EPS:
                        continue
                    speed = self.speed.get(d, 1.0)
                    needed = rem / speed
                    if needed <= dt + TIME_EPS:
                        self.busy[d] += needed
                        remaining[d] = 0.0
                        replica_finish[(task_id, d)] = self.sim.now
                    else:
                        self.busy[d] += dt
                        remaining[d] = rem - dt * speed
            for task_id in list(active):
                rate = rates[task_id]
                if rate <= 0:
                    continue
                started_comm.add(task_id)
                active_time[task_id] += dt
                segments = record.segments.setdefault(task_id, [])
                t0 = self.sim.now - dt
                if record.intervals[task_id][0] is None:
                    record.intervals[task_id][0] = t0
                if segments and segments[-1][2] == rate and abs(segments[-1][1] - t0) <= TIME_EPS:
                    segments[-1][1] = self.sim.now
                elif dt > 0:
                    segments.append([t0, self.sim.now, rate])
                needed = active[task_id] / rate
                active[task_id] = 0.0 if needed <= dt + TIME_EPS else active[task_id] - dt * rate


def simulate(plan, schedule, env, model_graph, workload, iterations=1, trace=None, replan_hook=None):
    graph = schedule.graph if schedule is not None else build_cep_graph(plan, env, model_graph, workload)
    priority = schedule.priority if schedule is not None else None
    nonpreemptive = schedule is not None and schedule.chunks > 0
    engine = FluidEngine(env, trace, replan_hook)
    return engine.simulate(graph, priority, nonpreemptive, iterations)


def measure_objective(result, qoe, env):
    violations = tuple(sorted(d for d, e in result.energy.items() if e > env.device(d).energy_budget))
    value = result.total_energy + qoe.lam * max(0.0, result.makespan - qoe.t_qoe)
    return ObjectiveReport(value, violations)


def trace_from_document(doc):
    check_document(doc, 'trace')
    events = tuple(TraceEvent(float(require(e, 't', 'event')), str(require(e, 'kind', 'event')),
                              str(require(e, 'target', 'event')),
                              None if e.get('value') is None else float(e['value']))
                   for e in require(doc, 'events', 'trace'))
    return DynamicsTrace(events)


def trace_to_document(trace):
    return make_document('trace', {'events': [{'t': e.t, 'kind': e.kind, 'target': e.target, 'value': e.value}
                                              for e in trace.events]})


def timeline_rows(result):
    return [[row.task, row.resource, row.start_s, row.finish_s, row.energy_j, row.iteration]
            for row in result.timeline]
