import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

from Utility.documents import make_document, check_document, require
from Utility.errors import InputError, NoRoute, UnhostableNode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Device:
    id: str
    mem_capacity: float
    energy_budget: float = math.inf
    idle_power: float = 0.0
    comm_power: float = 0.0
    rank: int = 0
    accelerators: int = 1
    tp_speedup: float = 1.0
    tp_mem_divisor: float = 1.0

    def __post_init__(self):
        if self.mem_capacity <= 0:
            raise InputError(f'Device {self.id} needs a positive memory capacity')
        if self.idle_power < 0 or self.comm_power < 0:
            raise InputError(f'Device {self.id} has negative power')
        if self.accelerators < 1 or self.tp_speedup <= 0 or self.tp_mem_divisor <= 0:
            raise InputError(f'Device {self.id} has an invalid tensor-parallel declaration')


@dataclass(frozen=True)
class ContentionDomain:
    id: str
    capacity: float
    members: frozenset

    def __post_init__(self):
        if self.capacity < 0:
            raise InputError(f'Domain {self.id} has negative capacity')


@dataclass(frozen=True)
class Topology:
    domains: tuple
    peak_bw: dict

    @cached_property
    def _domain_of(self):
        index = {}
        for domain in self.domains:
            for pair in domain.members:
                index[tuple(pair)] = domain
        return index

    def domain_of(self, src, dst):
        return self._domain_of.get((src, dst))

    def domain(self, domain_id):
        for d in self.domains:
            if d.id == domain_id:
                return d
        raise KeyError(domain_id)

    def peak(self, src, dst):
        bw = self.peak_bw.get((src, dst), 0.0)
        if bw <= 0:
            raise NoRoute(src, dst)
        return bw

    def has_route(self, src, dst):
        return self.peak_bw.get((src, dst), 0.0) > 0


@dataclass(frozen=True)
class ProfileEntry:
    fwd_time: float
    bwd_time: float
    fwd_energy: float
    bwd_energy: float
    mem: float

    def __add__(self, other):
        return ProfileEntry(self.fwd_time + other.fwd_time, self.bwd_time + other.bwd_time,
                            self.fwd_energy + other.fwd_energy, self.bwd_energy + other.bwd_energy,
                            self.mem + other.mem)


ZERO_ENTRY = ProfileEntry(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CostProfile:
    """Per (layer, device) costs of one reference microbatch, keyed by original layer id."""
    entries: dict

    def entry(self, node, device_id):
        if node.is_virtual:
            return ZERO_ENTRY
        total = ZERO_ENTRY
        for layer_id in node.original_ids:
            e = self.entries.get((layer_id, device_id))
            if e is None:
                return None
            total = total + e
        return total

    def hostable(self, node, device_id):
        return self.entry(node, device_id) is not None


@dataclass(frozen=True)
class Workload:
    microbatches: int = 8
    microbatch_units: int = 4
    training: bool = True

    def __post_init__(self):
        if self.microbatches < 1 or self.microbatch_units < 1:
            raise InputError('Workload needs at least one microbatch of one unit')


@dataclass(frozen=True)
class QoeSpec:
    t_qoe: float
    lam: float = 1.0
    workload: Workload = field(default_factory=Workload)

    def __post_init__(self):
        if self.t_qoe <= 0:
            raise InputError('t_qoe must be positive')
        if self.lam < 0:
            raise InputError('lambda must be non-negative')


@dataclass(frozen=True)
class Environment:
    devices: tuple
    topology: Topology
    profile: CostProfile
    offline: frozenset = frozenset()

    @cached_property
    def _by_id(self):
        return {d.id: d for d in self.devices}

    def device(self, device_id):
        return self._by_id[device_id]

    @property
    def online_devices(self):
        return sorted((d for d in self.devices if d.id not in self.offline), key=lambda d: (d.rank, d.id))


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: tuple
    message: str


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.findings

    def of_kind(self, kind):
        return [f for f in self.findings if f.kind == kind]


def validate_environment(devices, topology, profile, model_graph):
    report = ValidationReport()
    ids = [d.id for d in devices]

    for src in ids:
        for dst in ids:
            if src != dst and not topology.has_route(src, dst):
                report.findings.append(Finding('unreachable_pair', (src, dst),
                                               f'No peak bandwidth from {src} to {dst}'))

    for node in model_graph.nodes:
        if not node.is_virtual and not any(profile.hostable(node, d) for d in ids):
            report.findings.append(Finding('unhostable_node', (node.id,),
                                           f'Node {node.id} has no profile entry on any device'))

    seen = {}
    for domain in topology.domains:
        for pair in domain.members:
            pair = tuple(pair)
            if pair in seen:
                report.findings.append(Finding('duplicate_member', pair,
                                               f'Pair {pair} belongs to {seen[pair]} and {domain.id}'))
            seen[pair] = domain.id
            bw = topology.peak_bw.get(pair, 0.0)
            if bw > domain.capacity:
                report.findings.append(Finding('capacity_violation', pair,
                                               f'Peak {bw:.0f} bps of {pair} exceeds {domain.id} capacity '
                                               f'{domain.capacity:.0f} bps'))

    for pair, bw in topology.peak_bw.items():
        if bw > 0 and tuple(pair) not in seen:
            report.findings.append(Finding('unassigned_pair', tuple(pair),
                                           f'Pair {pair} has peak bandwidth but no contention domain'))
    return report


# Rank devices for the DP window order: fastest on the heaviest layer first, ties by id
def rank_devices(devices, profile, model_graph):
    real_nodes = [n for n in model_graph.nodes if not n.is_virtual]
    heaviest = max(real_nodes, key=lambda n: (n.param_bytes, n.id)) if real_nodes else None

    def throughput(device):
        entry = profile.entry(heaviest, device.id) if heaviest else None
        if entry is None:
            return 0.0
        t = entry.fwd_time + entry.bwd_time
        return math.inf if t <= 0 else 1.0 / t

    ordered = sorted(devices, key=lambda d: (-throughput(d), d.id))
    return tuple(replace(d, rank=i + 1) for i, d in enumerate(ordered))


@dataclass(frozen=True)
class DeviceCost:
    fwd_time: float
    bwd_time: float
    fwd_energy: float
    bwd_energy: float
    mem: float

    @property
    def energy(self):
        return self.fwd_energy + self.bwd_energy


@dataclass(frozen=True)
class StageCost:
    per_device: dict

    @property
    def fwd_time(self):
        return max(c.fwd_time for c in self.per_device.values())

    @property
    def bwd_time(self):
        return max(c.bwd_time for c in self.per_device.values())

    @property
    def fwd_energy(self):
        return sum(c.fwd_energy for c in self.per_device.values())

    @property
    def bwd_energy(self):
        return sum(c.bwd_energy for c in self.per_device.values())

    @property
    def energy(self):
        return self.fwd_energy + self.bwd_energy

    @property
    def mem(self):
        return {d: c.mem for d, c in self.per_device.items()}


def per_microbatch_latency(nodes, device_id, env, model_graph, training=True):
    total = 0.0
    for node_id in nodes:
        entry = env.profile.entry(model_graph.node(node_id), device_id)
        if entry is None:
            raise UnhostableNode(node_id, device_id)
        total += entry.fwd_time + (entry.bwd_time if training else 0.0)
    return total


def stage_cost(nodes, devices, batch_count, env, model_graph, tp_degree=1, training=True):
    per_device = {}
    weights = model_graph.param_bytes_of(nodes)
    for device_id in devices:
        device = env.device(device_id)
        count = batch_count.get(device_id, 0)
        total = ZERO_ENTRY
        for node_id in nodes:
            entry = env.profile.entry(model_graph.node(node_id), device_id)
            if entry is None:
                raise UnhostableNode(node_id, device_id)
            total = total + entry
        speedup = device.tp_speedup if tp_degree > 1 else 1.0
        divisor = device.tp_mem_divisor if tp_degree > 1 else 1.0
        bwd = 1.0 if training else 0.0
        per_device[device_id] = DeviceCost(fwd_time=total.fwd_time * count / speedup,
                                           bwd_time=bwd * total.bwd_time * count / speedup,
                                           fwd_energy=total.fwd_energy * count,
                                           bwd_energy=bwd * total.bwd_energy * count,
                                           mem=(total.mem + weights) / divisor)
    return StageCost(per_device)


def apply_event(env, event):
    """Environment after a trace event; the input is left untouched."""
    kind = event.kind
    if kind == 'bw_change':
        domains = tuple(replace(d, capacity=event.value) if d.id == event.target else d
                        for d in env.topology.domains)
        return replace(env, topology=Topology(domains, env.topology.peak_bw))
    if kind == 'compute_scale':
        entries = {}
        for (layer_id, device_id), e in env.profile.entries.items():
            if device_id == event.target:
                e = replace(e, fwd_time=e.fwd_time / event.value, bwd_time=e.bwd_time / event.value)
            entries[(layer_id, device_id)] = e
        return replace(env, profile=CostProfile(entries))
    if kind == 'device_leave':
        return replace(env, offline=env.offline | {event.target})
    if kind == 'device_join':
        return replace(env, offline=env.offline - {event.target})
    raise InputError(f'Unknown trace event kind {kind}')


def _float(value):
    return math.inf if value is None else float(value)


def environment_from_document(doc, model_graph=None):
    check_document(doc, 'env')
    devices = []
    for d in require(doc, 'devices', 'env'):
        devices.append(Device(id=str(require(d, 'id', 'device')),
                              mem_capacity=float(require(d, 'mem_capacity', 'device')),
                              energy_budget=_float(d.get('energy_budget')),
                              idle_power=float(d.get('idle_power', 0.0)),
                              comm_power=float(d.get('comm_power', 0.0)),
                              rank=int(d.get('rank', 0)),
                              accelerators=int(d.get('accelerators', 1)),
                              tp_speedup=float(d.get('tp_speedup', 1.0)),
                              tp_mem_divisor=float(d.get('tp_mem_divisor', 1.0))))
    domains = tuple(ContentionDomain(id=str(require(c, 'id', 'domain')),
                                     capacity=float(require(c, 'capacity_bps', 'domain')),
                                     members=frozenset(tuple(m) for m in require(c, 'members', 'domain')))
                    for c in require(doc, 'domains', 'env'))
    peak_bw = {(p['src'], p['dst']): float(p['bps']) for p in require(doc, 'peak_bw', 'env')}
    entries = {(e['node'], e['device']): ProfileEntry(float(e['fwd_time']), float(e.get('bwd_time', 0.0)),
                                                      float(e.get('fwd_energy', 0.0)),
                                                      float(e.get('bwd_energy', 0.0)),
                                                      float(e.get('mem', 0.0)))
               for e in require(doc, 'profile', 'env')}
    profile = CostProfile(entries)

    ranks = sorted(d.rank for d in devices)
    if ranks != list(range(1, len(devices) + 1)):
        if model_graph is None:
            raise InputError('Device ranks are missing and no model graph was given to derive them')
        devices = rank_devices(devices, profile, model_graph)
    return Environment(tuple(devices), Topology(domains, peak_bw), profile,
                       frozenset(doc.get('offline', ())))


def environment_to_document(env):
    devices = []
    for d in env.devices:
        entry = {'id': d.id, 'mem_capacity': d.mem_capacity, 'idle_power': d.idle_power,
                 'comm_power': d.comm_power, 'rank': d.rank}
        if math.isfinite(d.energy_budget):
            entry['energy_budget'] = d.energy_budget
        if d.accelerators > 1:
            entry.update(accelerators=d.accelerators, tp_speedup=d.tp_speedup, tp_mem_divisor=d.tp_mem_divisor)
        devices.append(entry)
    body = {
        'devices': devices,
        'domains': [{'id': c.id, 'capacity_bps': c.capacity, 'members': sorted(list(m) for m in c.members)}
                    for c in env.topology.domains],
        'peak_bw': [{'src': s, 'dst': t, 'bps': bw} for (s, t), bw in sorted(env.topology.peak_bw.items())],
        'profile': [{'node': n, 'device': d, 'fwd_time': e.fwd_time, 'bwd_time': e.bwd_time,
                     'fwd_energy': e.fwd_energy, 'bwd_energy': e.bwd_energy, 'mem': e.mem}
                    for (n, d), e in sorted(env.profile.entries.items())],
    }
    if env.offline:
        body['offline'] = sorted(env.offline)
    return make_document('env', body)


def qoe_from_document(doc):
    check_document(doc, 'qoe')
    workload = Workload(microbatches=int(doc.get('microbatches', 8)),
                        microbatch_units=int(doc.get('microbatch_units', 4)),
                        training=bool(doc.get('training', True)))
    return QoeSpec(t_qoe=float(require(doc, 't_qoe', 'qoe')), lam=float(doc.get('lambda', 1.0)),
                   workload=workload)


def qoe_to_document(qoe):
    w = qoe.workload
    return make_document('qoe', {'t_qoe': qoe.t_qoe, 'lambda': qoe.lam, 'microbatches': w.microbatches,
                                 'microbatch_units': w.microbatch_units, 'training': w.training})
