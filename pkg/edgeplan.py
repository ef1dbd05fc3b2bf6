import os
import sys

_path_root = os.path.dirname(os.path.abspath(__file__))
if _path_root not in sys.path:
    sys.path.append(_path_root)

import argparse
import logging
from dataclasses import dataclass, field, replace

from tqdm import tqdm

from NetScheduler.cepGraph import build_cep_graph
from NetScheduler.netScheduler import (chunkify, refine_and_select, schedule_from_document, schedule_timeline,
                                       schedule_to_document, solve_schedule)
from Planner.envModel import environment_from_document, qoe_from_document, validate_environment
from Planner.graphCore import (add_virtual_terminals, drop_virtual_nodes, merge_small_nodes,
                               model_graph_from_document, serial_decompose)
from Planner.partitioner import objective_value, partition_search
from Planner.planEstimator import build_step_list, estimate_plan, phase_breakdown
from Planner.planModel import check_routes, plan_from_document, plan_to_document, validate_plan
from RuntimeAdapter.runtimeAdapter import adapt_report_to_document, pareto_front, run_adaptation
from Simulator.simEngine import measure_objective, simulate, timeline_rows, trace_from_document
from Utility import sharedUtils
from Utility.documents import make_document, read_document, write_document
from Utility.errors import DeadlinePassed, InfeasibleError, InputError, UsageError

logger = logging.getLogger('edgeplan')

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
COMMANDS = ('plan', 'estimate', 'schedule', 'simulate', 'adapt', 'frontier')
DEFAULT_CONFIG = os.path.join(_path_root, 'config.ini')


class EdgePlanParser(argparse.ArgumentParser):
    """Argument parser raising UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f'{self.prog}: {message}')


@dataclass
class RunConfig:
    command: str
    model: str = None
    env: str = None
    qoe: str = None
    trace: str = None
    plan: str = None
    plans: str = None
    schedule: str = None
    out: str = None
    timeline: str = None
    db: str = None
    db_reset: bool = False
    topk: int = 5
    merge_delta: float = 0.05
    max_stages: int = 0
    chunks: int = 8
    threads: int = 1
    iterations: int = 1
    deadline: float = None
    work: float = None
    horizon: float = None
    weight: float = 0.0
    contention: bool = False
    lambdas: list = field(default_factory=list)
    table_name: str = 'sim_timeline'
    file_end: str = '.json'
    db_end: str = '.db'
    verbose: bool = False
    config_file: str = DEFAULT_CONFIG

    def validate(self):
        sharedUtils.check_files_exist([self.model, self.env, self.qoe, self.trace, self.plan, self.schedule])
        if self.plans is not None and not os.path.isdir(self.plans):
            raise InputError(f'Directory {self.plans} does not exist')
        if self.topk < 1:
            raise InputError('--topk must be at least 1')
        if not 0 < self.merge_delta <= 1:
            raise InputError('--delta must be in (0, 1]')
        if self.chunks < 0 or self.iterations < 1 or self.threads < 1 or self.max_stages < 0:
            raise InputError('--chunks, --iters, --threads and --max_stages must be non-negative counts')
        if self.command == 'adapt' and (not self.deadline or self.deadline <= 0 or not self.work or self.work <= 0):
            raise InputError('adapt needs a positive --deadline and --work')
        if self.command == 'frontier' and (not self.lambdas or any(lam < 0 for lam in self.lambdas)):
            raise InputError('frontier needs non-negative --lambdas')
        return self


def _add_common(parser):
    sharedUtils.parser_add_doc_args(parser)
    parser.add_argument('--delta', type=float, help='Merge threshold as a fraction of the model parameters')
    sharedUtils.parser_add_verbose_args(parser)


def get_parser():
    parser = EdgePlanParser(prog='edgeplan',
                            description='Plan, schedule and simulate hybrid parallel execution on edge devices')
    parser.add_argument('--config', default=DEFAULT_CONFIG, help='Configuration file with the defaults')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=EdgePlanParser)

    p = sub.add_parser('plan', help='Search the top-K candidate plans')
    _add_common(p)
    p.add_argument('--topk', type=int, help='Number of candidate plans to keep')
    p.add_argument('--max_stages', type=int, help='Maximum number of pipeline stages, 0 for one per device')
    p.add_argument('--out', required=True, help='Directory where plan documents and the manifest are written')

    p = sub.add_parser('estimate', help='Estimate latency and energy of a plan')
    _add_common(p)
    p.add_argument('--plan', required=True, help='Plan document')
    p.add_argument('--weight', type=float, default=0.0, help='Energy weight of the printed objective')
    p.add_argument('--contention', action='store_true', help='Share each domain among the plan transfers')

    p = sub.add_parser('schedule', help='Schedule the transfers of a plan under contention')
    _add_common(p)
    p.add_argument('--plan', required=True, help='Plan document')
    p.add_argument('--chunks', type=int, help='Chunks per transfer, 0 keeps the fluid schedule')
    p.add_argument('--out', required=True, help='Schedule document to write')
    p.add_argument('--timeline', help='Tab separated per-task timeline to write')

    p = sub.add_parser('simulate', help='Simulate a plan, optionally with a schedule and a dynamics trace')
    _add_common(p)
    p.add_argument('--plan', required=True, help='Plan document')
    p.add_argument('--schedule', help='Schedule document, fair sharing when omitted')
    p.add_argument('--trace', help='Dynamics trace document')
    p.add_argument('--iters', dest='iterations', type=int, help='Iterations to run back to back')
    p.add_argument('--timeline', help='Tab separated per-task timeline to write')
    sharedUtils.parser_add_db_args(p, 'sim_timeline')

    p = sub.add_parser('adapt', help='Run the closed adaptation loop over a pool of plans')
    _add_common(p)
    p.add_argument('--plans', required=True, help='Directory of plan documents')
    p.add_argument('--trace', help='Dynamics trace document')
    p.add_argument('--deadline', type=float, required=True, help='Deadline in seconds')
    p.add_argument('--work', type=float, required=True, help='Iterations to complete')
    p.add_argument('--horizon', type=float, help='Fixed horizon length in seconds')
    p.add_argument('--out', help='Adaptation report document to write')

    p = sub.add_parser('frontier', help='Sweep lambda and write the energy-latency Pareto set')
    _add_common(p)
    p.add_argument('--lambdas', help='Comma separated lambda values')
    p.add_argument('--topk', type=int, help='Number of candidate plans per lambda')
    p.add_argument('--out', required=True, help='CSV file to write')
    return parser


def _config_value(config_file, section, key, t, default):
    return sharedUtils.get_single_value_from_config(config_file, section, key, t=t, default=default)


def build_run_config(args):
    c = args.config
    cfg = RunConfig(command=args.command, config_file=c,
                    topk=_config_value(c, 'PLANNER', 'topk', int, 5),
                    merge_delta=_config_value(c, 'PLANNER', 'merge_delta', float, 0.05),
                    max_stages=_config_value(c, 'PLANNER', 'max_stages', int, 0),
                    chunks=_config_value(c, 'SCHEDULER', 'chunks', int, 8),
                    threads=_config_value(c, 'SCHEDULER', 'threads', int, 1),
                    iterations=_config_value(c, 'SIMULATOR', 'iterations', int, 1),
                    table_name=_config_value(c, 'SIMULATOR', 'table_name', None, 'sim_timeline'),
                    lambdas=sharedUtils.get_list_from_config(c, 'FRONTIER', 'lambdas',
                                                             default=[0.1, 0.3, 0.5, 0.7, 0.9, 1.0]),
                    file_end=sharedUtils.get_file_end_from_config(c),
                    db_end=sharedUtils.get_db_end_from_config(c))
    overrides = {k: v for k, v in vars(args).items() if v is not None and hasattr(cfg, k)}
    if getattr(args, 'delta', None) is not None:
        overrides['merge_delta'] = args.delta
    if isinstance(overrides.get('lambdas'), str):
        try:
            overrides['lambdas'] = [float(v) for v in overrides['lambdas'].split(',') if v.strip()]
        except ValueError as e:
            raise UsageError(f'Invalid --lambdas: {e}') from e
    return replace(cfg, **overrides).validate()


@dataclass
class Inputs:
    model: object
    graph: object
    components: list
    env: object
    qoe: object


def load_inputs(cfg):
    model = model_graph_from_document(read_document(cfg.model, 'model_graph'))
    graph = add_virtual_terminals(merge_small_nodes(model, cfg.merge_delta))
    components = drop_virtual_nodes(serial_decompose(graph))
    env = environment_from_document(read_document(cfg.env, 'env'), graph)
    qoe = qoe_from_document(read_document(cfg.qoe, 'qoe'))
    report = validate_environment(env.devices, env.topology, env.profile, graph)
    for finding in report.findings:
        logger.warning('%s: %s', finding.kind, finding.message)
    logger.debug('Model %d nodes merged to %d, %d serial components', len(model.nodes), len(graph.nodes),
                 len(components))
    return Inputs(model, graph, components, env, qoe)


def _load_plan(path, inputs):
    plan = plan_from_document(read_document(path, 'plan'))
    validate_plan(plan, inputs.graph, inputs.qoe.workload)
    check_routes(plan, inputs.env.topology)
    return plan


def cmd_plan(cfg, inputs):
    plans = partition_search(inputs.components, inputs.env, inputs.graph, inputs.qoe, k=cfg.topk,
                             max_stages=cfg.max_stages)
    os.makedirs(cfg.out, exist_ok=True)
    entries = []
    iterator = enumerate(plans)
    if not cfg.verbose:
        iterator = tqdm(iterator, total=len(plans), unit='plan', desc='Writing plans')
    for rank, plan in iterator:
        file_name = f'plan_{rank:02d}{cfg.file_end}'
        write_document(os.path.join(cfg.out, file_name), plan_to_document(plan))
        entries.append({'rank': rank, 'file': file_name, 'objective': objective_value(plan, inputs.qoe),
                        't_est': plan.metrics.t_est, 'e_est': plan.metrics.total_energy,
                        'stages': len(plan.stages), 'devices': plan.num_devices})
    write_document(os.path.join(cfg.out, f'manifest{cfg.file_end}'), make_document('manifest', {'plans': entries}))

    print(f'{len(plans)} candidate plans written to {cfg.out}')
    for e in entries:
        print(f'  #{e["rank"]} {e["file"]}: objective {e["objective"]:.4f}, latency {e["t_est"]:.4f}s, '
              f'energy {e["e_est"]:.4f}J, {e["stages"]} stages on {e["devices"]} devices')


def cmd_estimate(cfg, inputs):
    plan = _load_plan(cfg.plan, inputs)
    workload = inputs.qoe.workload
    estimate = estimate_plan(plan, inputs.env, inputs.graph, workload, weight=cfg.weight,
                             relaxed=not cfg.contention)
    print(f't_latency {estimate.t_latency:.6f} s')
    print(f'e_consumption {estimate.e_consumption:.6f} J')
    print(f'objective {estimate.objective:.6f}')
    if not (plan.is_chain() and workload.training):
        return
    steps = build_step_list(plan, inputs.env, inputs.graph, workload, relaxed=not cfg.contention)
    if workload.microbatches < len(steps):
        logger.info('No phase breakdown, %d microbatches for %d steps', workload.microbatches, len(steps))
        return
    phases = phase_breakdown(steps, workload.microbatches)
    print(f'phases fill {phases.fill:.6f} s, steady {phases.steady:.6f} s, drain {phases.drain:.6f} s '
          f'(bottleneck step {phases.bottleneck})')


def cmd_schedule(cfg, inputs):
    plan = _load_plan(cfg.plan, inputs)
    graph = build_cep_graph(plan, inputs.env, inputs.graph, inputs.qoe.workload)
    schedule = solve_schedule(graph, inputs.env)
    fluid = schedule.makespan
    if cfg.chunks > 0:
        schedule = chunkify(schedule, cfg.chunks, inputs.env)
    write_document(cfg.out, schedule_to_document(schedule))
    if cfg.timeline:
        sharedUtils.write_rows_tsv(cfg.timeline, schedule_timeline(schedule),
                                   columns=['task', 'resource', 'start_s', 'finish_s'])
    print(f'{len(graph.tasks)} tasks scheduled, makespan {schedule.makespan:.6f}s (fluid {fluid:.6f}s, '
          f'{cfg.chunks} chunks per transfer)')


def cmd_simulate(cfg, inputs):
    plan = _load_plan(cfg.plan, inputs)
    schedule = schedule_from_document(read_document(cfg.schedule, 'schedule')) if cfg.schedule else None
    trace = trace_from_document(read_document(cfg.trace, 'trace')) if cfg.trace else None
    result = simulate(plan, schedule, inputs.env, inputs.graph, inputs.qoe.workload, iterations=cfg.iterations,
                      trace=trace)
    rows = timeline_rows(result)
    if cfg.timeline:
        sharedUtils.write_rows_tsv(cfg.timeline, rows)
    if cfg.db:
        db_name = cfg.db if sharedUtils.check_file_end(cfg.db, cfg.db_end) else cfg.db + cfg.db_end
        sharedUtils.write_timeline_to_db(db_name, rows, cfg.table_name, cfg.db_reset)

    report = measure_objective(result, inputs.qoe, inputs.env)
    print(f'makespan {result.makespan:.6f} s over {len(result.latencies)} iterations')
    for i, latency in enumerate(result.latencies):
        print(f'  iteration {i}: {latency:.6f} s')
    for device, energy in sorted(result.energy.items()):
        print(f'  {device}: {energy:.4f} J')
    print(f'objective {report.value:.6f}')
    if report.budget_violations:
        print(f'energy budget exceeded on {", ".join(report.budget_violations)}')


def cmd_adapt(cfg, inputs):
    paths = [p for p in sharedUtils.get_db_paths_from_dirs([cfg.plans], cfg.file_end)
             if not sharedUtils.get_file_name_from_path(p).startswith('manifest')]
    pool = []
    for path in paths:
        plan = _load_plan(path, inputs)
        pool.append((sharedUtils.get_file_name_from_path(path), plan))
    if not pool:
        raise InputError(f'No plan documents in {cfg.plans}')
    points = []
    for plan_id, plan in pool:
        e = estimate_plan(plan, inputs.env, inputs.graph, inputs.qoe.workload, relaxed=False)
        points.append((e.t_latency, e.e_consumption, (plan_id, plan)))
    pool = [item for _, _, item in pareto_front(points)]

    trace = trace_from_document(read_document(cfg.trace, 'trace')) if cfg.trace else None
    progress = None if cfg.verbose else tqdm(unit='horizon', desc='Adapting')
    try:
        report = run_adaptation(pool, inputs.env, inputs.graph, inputs.qoe, cfg.work, cfg.deadline, trace=trace,
                                horizon=cfg.horizon, components=inputs.components, **_adapter_config(cfg),
                                progress=progress)
    finally:
        if progress is not None:
            progress.close()
    if cfg.out:
        write_document(cfg.out, adapt_report_to_document(report))

    for h in report.horizons:
        shares = dict(h.decision.allocations)
        mix = ', '.join(f'{p}={shares[p]:.3f}' for p in h.order) or 'idle'
        flag = '' if h.decision.feasible else ' [infeasible]'
        print(f't={h.start:.1f}s delta={h.delta:.1f}s expected={h.expected:.3f} {mix}{flag}')
    status = 'finished' if report.finished else 'missed the deadline'
    print(f'{status} at {report.finish_time:.1f}s (deadline {report.deadline:.1f}s), energy {report.energy:.2f}J')
    if not report.finished:
        left = report.horizons[-1].w_rem if report.horizons else report.work
        raise DeadlinePassed(f'{left:g} iterations not done by the deadline')


def _adapter_config(cfg):
    c = cfg.config_file
    return {'threshold': _config_value(c, 'ADAPTER', 'reschedule_threshold', float, 0.10),
            'divisor': _config_value(c, 'ADAPTER', 'horizon_divisor', float, 20.0),
            'lo': _config_value(c, 'ADAPTER', 'horizon_min', float, 60.0),
            'hi': _config_value(c, 'ADAPTER', 'horizon_max', float, 1800.0)}


def cmd_frontier(cfg, inputs):
    points = []
    iterator = cfg.lambdas if cfg.verbose else tqdm(cfg.lambdas, unit='lambda', desc='Sweeping')
    for lam in iterator:
        qoe = replace(inputs.qoe, lam=lam)
        candidates = partition_search(inputs.components, inputs.env, inputs.graph, qoe, k=cfg.topk,
                                      max_stages=cfg.max_stages)
        selection = refine_and_select(candidates, inputs.env, inputs.graph, qoe, chunks=cfg.chunks,
                                      threads=cfg.threads)
        metrics = selection.best.metrics
        points.append((metrics.t_est, metrics.total_energy, lam))
    front = pareto_front(points)
    df = sharedUtils.get_data_frame_from_data([(lam, t, e) for t, e, lam in front],
                                              ['lambda', 'latency_s', 'energy_j'])
    df.to_csv(cfg.out, index=False)
    print(f'{len(front)} Pareto points of {len(points)} written to {cfg.out}')
    print(df.to_string(index=False))


HANDLERS = {'plan': cmd_plan, 'estimate': cmd_estimate, 'schedule': cmd_schedule, 'simulate': cmd_simulate,
            'adapt': cmd_adapt, 'frontier': cmd_frontier}


def execute_command(argv):
    try:
        args = get_parser().parse_args(argv)
    except SystemExit as e:
        return e.code or EXIT_OK
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INPUT
    sharedUtils.set_logging(args.verbose)
    try:
        cfg = build_run_config(args)
        HANDLERS[cfg.command](cfg, load_inputs(cfg))
    except InfeasibleError as e:
        print(f'Infeasible: {e}', file=sys.stderr)
        return EXIT_INFEASIBLE
    except InputError as e:
        print(f'Input error: {e}', file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(execute_command(sys.argv[1:]))
