"""Runtime adaptation: uniform progress horizons, plan mixing and switching.

Each horizon must complete its share of the remaining work, proportional to the
horizon length over the remaining time. Within a horizon, up to two plans are
time-shared to meet that share at minimum energy.
"""
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field

from NetScheduler.cepGraph import build_cep_graph
from NetScheduler.netScheduler import refine_and_select, solve_schedule
from Planner.envModel import apply_event
from Planner.partitioner import partition_search
from Planner.planEstimator import estimate_plan
from Utility.documents import make_document
from Utility.errors import DeadlinePassed, EdgePlanError, InfeasibleError, InputError, NoFeasiblePlan

logger = logging.getLogger(__name__)

RESCHEDULE = 'reschedule'
REPLAN = 'replan'

RESCHEDULE_THRESHOLD = 0.10
HORIZON_DIVISOR = 20
HORIZON_MIN = 60.0
HORIZON_MAX = 1800.0


@dataclass(frozen=True)
class PlanProfile:
    plan_id: str
    rate: float
    power: float
    switch_cost: float = 0.0

    def __post_init__(self):
        if self.rate <= 0 or self.power < 0 or self.switch_cost < 0:
            raise InputError(f'Invalid profile for plan {self.plan_id}')


@dataclass(frozen=True)
class HorizonState:
    w_rem: float
    d_rem: float
    delta: float


@dataclass(frozen=True)
class MixDecision:
    allocations: tuple
    energy: float
    progress: float
    feasible: bool = True


@dataclass(frozen=True)
class SwitchCost:
    stall: float
    bytes_moved: float
    per_device: dict = field(default_factory=dict)


@dataclass
class Deployment:
    plan: object
    schedule: object = None


@dataclass(frozen=True)
class Action:
    kind: str
    plan: object
    schedule: object
    env: object
    switch: SwitchCost = None
    reason: str = ''


def expected_progress(h):
    if h.d_rem <= 0:
        if h.w_rem > 0:
            raise DeadlinePassed(f'Deadline passed with {h.w_rem:g} work units left')
        return 0.0
    return min(h.delta, h.d_rem) / h.d_rem * h.w_rem


def default_horizon(d_rem, divisor=HORIZON_DIVISOR, lo=HORIZON_MIN, hi=HORIZON_MAX):
    return min(d_rem, max(lo, min(hi, d_rem / divisor)))


def _useful(profile, delta):
    return max(0.0, delta - profile.switch_cost)


def mix_plans(profiles, h, weight=math.inf):
    """Cheapest time-sharing of plans that still reaches the horizon's expected progress.

    The optimum of this two-constraint program uses at most two plans, so single
    plans and pairs are enumerated. When no mixture is fast enough the single plan
    minimizing energy + weight * shortfall runs for the whole horizon (the fastest
    one for an infinite weight).
    """
    if not profiles:
        raise InputError('No plan to mix')
    target = expected_progress(h)
    if target <= 0:
        return MixDecision((), 0.0, 0.0)

    work = {p.plan_id: p.rate * _useful(p, h.delta) for p in profiles}
    cost = {p.plan_id: p.power * _useful(p, h.delta) for p in profiles}
    options = []
    for p in profiles:
        a = work[p.plan_id]
        if a >= target:
            x = target / a
            options.append((x * cost[p.plan_id], 1, ((p.plan_id, x),), target))
    for p, q in itertools.combinations(profiles, 2):
        hi, lo = (p, q) if work[p.plan_id] >= work[q.plan_id] else (q, p)
        a_hi, a_lo = work[hi.plan_id], work[lo.plan_id]
        if not a_hi > target > a_lo:
            continue
        x_hi = (target - a_lo) / (a_hi - a_lo)
        x_lo = 1.0 - x_hi
        energy = x_hi * cost[hi.plan_id] + x_lo * cost[lo.plan_id]
        allocations = tuple(sorted(((hi.plan_id, x_hi), (lo.plan_id, x_lo))))
        options.append((energy, 2, allocations, target))

    if options:
        energy, _, allocations, progress = min(options, key=lambda o: (o[0], o[1], o[2]))
        return MixDecision(allocations, energy, progress)

    def shortfall_key(p):
        shortfall = target - work[p.plan_id]
        if math.isinf(weight):
            return shortfall, cost[p.plan_id], p.plan_id
        return cost[p.plan_id] + weight * shortfall, shortfall, p.plan_id

    fallback = min(profiles, key=shortfall_key)
    logger.debug('No mixture reaches %.3f units, running %s alone', target, fallback.plan_id)
    return MixDecision(((fallback.plan_id, 1.0),), cost[fallback.plan_id], work[fallback.plan_id], feasible=False)


# Relative size of a bandwidth or compute change, None for membership changes
def relative_change(event, env):
    if event.kind == 'bw_change':
        old = env.topology.domain(event.target).capacity
        return abs(event.value - old) / old if old > 0 else math.inf
    if event.kind == 'compute_scale':
        return abs(event.value - 1.0)
    return None


def classify_event(event, env, threshold=RESCHEDULE_THRESHOLD):
    change = relative_change(event, env)
    if change is not None and change <= threshold + 1e-12:
        return RESCHEDULE
    return REPLAN


def switching_overhead(old, new, env, model_graph, mutable_state=True, overlap_window=0.0):
    """Delta switching: each device receives only the weights of nodes it did not host before.

    A node's weights come from the best-connected online device that hosted it in
    the old plan, or from any online device when none of them is left. Immutable
    (inference) state starts moving in the background, so only what does not fit
    in ``overlap_window`` seconds stalls execution.
    """
    before = old.assignment() if old is not None else {}
    online = [d.id for d in env.devices if d.id not in env.offline]
    peak = env.topology.peak_bw
    per_device = {}
    stall = 0.0
    for device, nodes in new.assignment().items():
        missing = nodes - before.get(device, set())
        num_bytes = model_graph.param_bytes_of(missing)
        if num_bytes == 0:
            continue
        seconds = 0.0
        for node in sorted(missing):
            bits = model_graph.param_bytes_of([node]) * 8
            if bits == 0:
                continue
            sources = [src for src in online
                       if src != device and node in before.get(src, ()) and peak.get((src, device), 0.0) > 0]
            sources = sources or [src for src in online if src != device]
            best = max((peak.get((src, device), 0.0) for src in sources), default=0.0)
            seconds += bits / best if best > 0 else math.inf
        per_device[device] = num_bytes
        stall = max(stall, seconds)
    if not mutable_state:
        stall = max(0.0, stall - overlap_window)
    return SwitchCost(stall, sum(per_device.values()), per_device)


def full_reload_bytes(plan, model_graph):
    return sum(model_graph.param_bytes_of(nodes) for nodes in plan.assignment().values())


def profile_plan(plan_id, latency, energy, switch_cost=0.0):
    if latency <= 0 or math.isinf(latency):
        raise InputError(f'Plan {plan_id} has no finite positive latency')
    return PlanProfile(plan_id, 1.0 / latency, energy / latency, switch_cost)


def pareto_front(points):
    """Keep the (latency, energy, item) points no other point dominates, sorted by latency."""
    front = []
    for latency, energy, item in sorted(points, key=lambda p: (p[0], p[1])):
        if front and energy >= front[-1][1]:
            continue
        front.append((latency, energy, item))
    return front


def handle_event(event, current, env, model_graph, components, qoe, k=5, chunks=0,
                 threshold=RESCHEDULE_THRESHOLD, overlap_window=0.0):
    """Pick and carry out the reaction to a trace event.

    Small bandwidth or speed changes only reschedule the current plan's transfers,
    unless the new schedule misses the latency target. Anything else replans from
    scratch on the updated environment and prices the switch, overlapping it with
    ``overlap_window`` seconds of execution for inference workloads.
    """
    new_env = apply_event(env, event)
    workload = qoe.workload
    kind = classify_event(event, env, threshold)
    reason = f'{event.kind} on {event.target}'

    if kind == RESCHEDULE and current.plan is not None:
        graph = build_cep_graph(current.plan, new_env, model_graph, workload)
        schedule = solve_schedule(graph, new_env)
        if schedule.makespan <= qoe.t_qoe:
            logger.debug('Rescheduled after %s, makespan %.6fs', reason, schedule.makespan)
            return Action(RESCHEDULE, current.plan, schedule, new_env, reason=reason)
        reason += f', rescheduled makespan {schedule.makespan:.3f}s misses the {qoe.t_qoe:.3f}s target'

    candidates = partition_search(components, new_env, model_graph, qoe, k=k)
    selection = refine_and_select(candidates, new_env, model_graph, qoe, chunks=chunks)
    switch = switching_overhead(current.plan, selection.best, new_env, model_graph,
                                mutable_state=workload.training, overlap_window=overlap_window)
    logger.debug('Replanned after %s, switch stall %.3fs', reason, switch.stall)
    return Action(REPLAN, selection.best, selection.schedule, new_env, switch, reason)


@dataclass(frozen=True)
class HorizonReport:
    start: float
    delta: float
    expected: float
    decision: MixDecision
    w_rem: float
    actions: tuple = ()
    order: tuple = ()


@dataclass
class AdaptReport:
    finished: bool
    finish_time: float
    energy: float
    deadline: float
    work: float
    horizons: list = field(default_factory=list)


def _uses_offline(plan, env):
    return any(d in env.offline for d in plan.devices)


def execution_order(decision, active_id=None):
    """Order in which a horizon runs its allocations: the active plan first, then the others by id."""
    return tuple(sorted(decision.allocations, key=lambda a: (a[0] != active_id, a[0])))


def _profiles(pool, env, model_graph, workload, active, delta):
    profiles = []
    for plan_id, plan in pool:
        if _uses_offline(plan, env):
            continue
        try:
            estimate = estimate_plan(plan, env, model_graph, workload, relaxed=False)
            switch = 0.0
            if active is not None and plan_id != active[0]:
                switch = switching_overhead(active[1], plan, env, model_graph, mutable_state=workload.training,
                                            overlap_window=delta).stall
            profiles.append(profile_plan(plan_id, estimate.t_latency, estimate.e_consumption, switch))
        except EdgePlanError as e:
            logger.debug('Plan %s left out of this horizon: %s', plan_id, e)
    return profiles


def run_adaptation(pool, env, model_graph, qoe, work, deadline, trace=None, horizon=None, components=None,
                   threshold=RESCHEDULE_THRESHOLD, divisor=HORIZON_DIVISOR, lo=HORIZON_MIN, hi=HORIZON_MAX,
                   progress=None):
    """Execute ``work`` iterations before ``deadline`` seconds with a pool of (plan_id, plan) pairs.

    Trace events take effect at the next horizon boundary; plans that lose a
    device leave the pool and the remaining ones are re-profiled. With the
    model's serial ``components``, every event goes through ``handle_event`` and
    the new plan of a replan joins the pool. Inference switches overlap with one
    horizon of execution.
    """
    if work <= 0 or deadline <= 0:
        raise InputError('Work and deadline must be positive')
    events = deque(trace.events if trace else ())
    pool = list(pool)
    workload = qoe.workload
    t, w_rem, energy = 0.0, float(work), 0.0
    tolerance = 1e-9 * work
    active = None
    report = AdaptReport(False, math.nan, 0.0, deadline, work)

    while w_rem > tolerance:
        d_rem = deadline - t
        if d_rem <= 1e-9:
            break
        delta = horizon if horizon else default_horizon(d_rem, divisor, lo, hi)
        delta = min(delta, d_rem)
        actions = []
        while events and events[0].t <= t + 1e-9:
            event = events.popleft()
            if components is not None:
                kind, joined = _react(event, pool, active, env, model_graph, components, qoe, threshold, delta)
                pool.extend(joined)
            else:
                kind = classify_event(event, env, threshold)
            actions.append((event.kind, event.target, kind))
            env = apply_event(env, event)

        profiles = _profiles(pool, env, model_graph, workload, active, delta)
        if not profiles:
            raise NoFeasiblePlan(f'No plan of the pool can run at t={t:.1f}s')
        state = HorizonState(w_rem, d_rem, delta)
        decision = mix_plans(profiles, state)
        order = execution_order(decision, active[0] if active is not None else None)
        done = min(decision.progress, w_rem)
        if decision.progress >= w_rem - tolerance and decision.progress > 0:
            report.finish_time = t + _offset_in_horizon(order, profiles, delta, w_rem)
        report.horizons.append(HorizonReport(t, delta, expected_progress(state), decision, w_rem - done,
                                             tuple(actions), tuple(plan_id for plan_id, _ in order)))
        energy += decision.energy
        w_rem -= done
        t += delta
        if order:
            plan_id = order[-1][0]
            active = (plan_id, dict(pool)[plan_id])
        if progress is not None:
            progress.update(1)

    report.finished = w_rem <= tolerance
    report.energy = energy
    if report.finished and math.isnan(report.finish_time):
        report.finish_time = t
    return report


# Hand the event to handle_event from the active plan, or the first usable one before anything ran
def _react(event, pool, active, env, model_graph, components, qoe, threshold, delta):
    if active is not None:
        current = active[1]
    else:
        current = next((plan for _, plan in pool if not _uses_offline(plan, env)), None)
    try:
        action = handle_event(event, Deployment(current), env, model_graph, components, qoe, threshold=threshold,
                              overlap_window=delta)
    except InfeasibleError as e:
        logger.warning('Replanning after %s on %s failed: %s', event.kind, event.target, e)
        return REPLAN, []
    if action.kind == RESCHEDULE:
        return RESCHEDULE, []
    return REPLAN, [(f'replan_{len(pool)}', action.plan)]


# Time into the horizon at which the allocations, run in order, complete the given work
def _offset_in_horizon(order, profiles, delta, work):
    by_id = {p.plan_id: p for p in profiles}
    elapsed = 0.0
    for plan_id, x in order:
        p = by_id[plan_id]
        span = x * delta
        useful = max(0.0, span - p.switch_cost)
        if p.rate * useful >= work:
            return elapsed + min(span, p.switch_cost) + work / p.rate
        work -= p.rate * useful
        elapsed += span
    return elapsed


def adapt_report_to_document(report):
    horizons = [{'start': h.start, 'delta': h.delta, 'expected': h.expected, 'w_rem': h.w_rem,
                 'feasible': h.decision.feasible, 'energy': h.decision.energy, 'progress': h.decision.progress,
                 'allocations': [{'plan': p, 'x': x} for p, x in h.decision.allocations],
                 'order': list(h.order),
                 'actions': [{'kind': k, 'target': target, 'action': a} for k, target, a in h.actions]}
                for h in report.horizons]
    return make_document('adapt_report', {'finished': report.finished,
                                          'finish_time': None if math.isnan(report.finish_time)
                                          else report.finish_time,
                                          'energy': report.energy, 'deadline': report.deadline,
                                          'work': report.work, 'horizons': horizons})
