import logging
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx

from Utility.documents import make_document, check_document, require
from Utility.errors import CycleDetected, DanglingEdge, DuplicateId, MultipleSources, MultipleSinks

logger = logging.getLogger(__name__)

VIRTUAL_SOURCE = '__source__'
VIRTUAL_SINK = '__sink__'


@dataclass(frozen=True)
class LayerNode:
    id: str
    param_bytes: float
    activation_bytes: float
    original_ids: tuple = ()

    def __post_init__(self):
        if self.param_bytes < 0 or self.activation_bytes < 0:
            raise ValueError(f'Node {self.id} has negative sizes')
        if not self.original_ids:
            object.__setattr__(self, 'original_ids', (self.id,))

    @property
    def is_virtual(self):
        return self.id in (VIRTUAL_SOURCE, VIRTUAL_SINK)


@dataclass(frozen=True)
class ModelGraph:
    """Profiled layer DAG. Nodes are kept in a deterministic topological order."""
    nodes: tuple
    edges: tuple
    total_param_bytes: float = field(default=0.0)

    @cached_property
    def nx_graph(self):
        g = nx.DiGraph()
        g.add_nodes_from(n.id for n in self.nodes)
        g.add_edges_from(self.edges)
        return g

    @cached_property
    def _by_id(self):
        return {n.id: n for n in self.nodes}

    def node(self, node_id):
        return self._by_id[node_id]

    def __contains__(self, node_id):
        return node_id in self._by_id

    @property
    def order(self):
        return [n.id for n in self.nodes]

    def successors(self, node_id):
        return list(self.nx_graph.successors(node_id))

    def predecessors(self, node_id):
        return list(self.nx_graph.predecessors(node_id))

    def sources(self):
        return [n for n in self.order if self.nx_graph.in_degree(n) == 0]

    def sinks(self):
        return [n for n in self.order if self.nx_graph.out_degree(n) == 0]

    def param_bytes_of(self, node_ids):
        return sum(self.node(n).param_bytes for n in node_ids)


@dataclass(frozen=True)
class ChainComponent:
    chains: tuple

    @property
    def nodes(self):
        return [n for chain in self.chains for n in chain]


# Topological order that keeps the input order among ready nodes
def _stable_topological_order(node_ids, edges):
    g = nx.DiGraph()
    g.add_nodes_from(node_ids)
    g.add_edges_from(edges)
    position = {n: i for i, n in enumerate(node_ids)}
    if not nx.is_directed_acyclic_graph(g):
        raise CycleDetected(n for n, _ in nx.find_cycle(g))
    return list(nx.lexicographical_topological_sort(g, key=position.get))


def build_model_graph(layers, edges):
    seen = set()
    for layer in layers:
        if layer.id in seen:
            raise DuplicateId(layer.id)
        seen.add(layer.id)
    edges = tuple((str(u), str(v)) for u, v in edges)
    for edge in edges:
        if edge[0] not in seen or edge[1] not in seen:
            raise DanglingEdge(edge)

    order = _stable_topological_order([layer.id for layer in layers], edges)
    by_id = {layer.id: layer for layer in layers}
    nodes = tuple(by_id[n] for n in order)
    return ModelGraph(nodes, tuple(dict.fromkeys(edges)), sum(n.param_bytes for n in nodes))


# An edge u->v lies on an unbranched path when u has a single successor and v a single predecessor
def _is_unbranched(g, u, v):
    return g.nx_graph.out_degree(u) == 1 and g.nx_graph.in_degree(v) == 1


def _fuse(members):
    if len(members) == 1:
        return members[0]
    original_ids = tuple(i for m in members for i in m.original_ids)
    return LayerNode(id=f'{members[0].id}~{members[-1].id}',
                     param_bytes=sum(m.param_bytes for m in members),
                     activation_bytes=members[-1].activation_bytes,
                     original_ids=original_ids)


def merge_small_nodes(g, delta):
    if delta <= 0:
        raise ValueError('delta must be positive')
    threshold = delta * g.total_param_bytes

    groups = []
    group_of = {}
    for node_id in g.order:
        node = g.node(node_id)
        preds = g.predecessors(node_id)
        if len(preds) == 1 and preds[0] in group_of and _is_unbranched(g, preds[0], node_id):
            group = groups[group_of[preds[0]]]
            # only the group tail can absorb its successor
            if group[-1].id == preds[0] and sum(m.param_bytes for m in group) + node.param_bytes < threshold:
                group.append(node)
                group_of[node_id] = group_of[preds[0]]
                continue
        group_of[node_id] = len(groups)
        groups.append([node])

    fused = [_fuse(group) for group in groups]
    new_id = {member.id: fused[i].id for i, group in enumerate(groups) for member in group}
    edges = []
    for u, v in g.edges:
        if new_id[u] != new_id[v]:
            edges.append((new_id[u], new_id[v]))

    merged = build_model_graph(fused, edges)
    logger.debug('Merged %d nodes into %d (delta=%s)', len(g.nodes), len(merged.nodes), delta)
    return merged


# Add zero-cost source/sink nodes when the graph has several entry or exit nodes
def add_virtual_terminals(g):
    layers = list(g.nodes)
    edges = list(g.edges)
    sources, sinks = g.sources(), g.sinks()
    if len(sources) > 1:
        layers.insert(0, LayerNode(VIRTUAL_SOURCE, 0, 0))
        edges.extend((VIRTUAL_SOURCE, s) for s in sources)
    if len(sinks) > 1:
        layers.append(LayerNode(VIRTUAL_SINK, 0, 0))
        edges.extend((s, VIRTUAL_SINK) for s in sinks)
    if len(layers) == len(g.nodes):
        return g
    return build_model_graph(layers, edges)


# Nodes traversed by every source-to-sink path, in topological order
def cut_nodes(g):
    source, sink = g.sources()[0], g.sinks()[0]
    dominators = nx.immediate_dominators(g.nx_graph, source)
    cuts = {sink}
    node = sink
    while node != source:
        node = dominators[node]
        cuts.add(node)
    return [n for n in g.order if n in cuts]


def _region_chains(g, region):
    sub = g.nx_graph.subgraph(region)
    head_of = {}
    chains = []
    for node_id in g.order:
        if node_id not in region:
            continue
        preds = list(sub.predecessors(node_id))
        if len(preds) == 1 and sub.out_degree(preds[0]) == 1:
            chain = chains[head_of[preds[0]]]
            chain.append(node_id)
            head_of[node_id] = head_of[preds[0]]
        else:
            head_of[node_id] = len(chains)
            chains.append([node_id])

    # order chains topologically, ties by descending parameter bytes then smallest id
    chain_graph = nx.DiGraph()
    chain_graph.add_nodes_from(range(len(chains)))
    for u, v in sub.edges:
        if head_of[u] != head_of[v]:
            chain_graph.add_edge(head_of[u], head_of[v])

    def key(i):
        return -g.param_bytes_of(chains[i]), min(chains[i])

    ordered = sorted(chain_graph.nodes, key=key)
    rank = {c: i for i, c in enumerate(ordered)}
    return [tuple(chains[i]) for i in nx.lexicographical_topological_sort(chain_graph, key=rank.get)]


def serial_decompose(g):
    sources, sinks = g.sources(), g.sinks()
    if len(sources) > 1:
        raise MultipleSources(sources)
    if len(sinks) > 1:
        raise MultipleSinks(sinks)

    cuts = cut_nodes(g)
    components = []
    current = [cuts[0]]
    for left, right in zip(cuts, cuts[1:]):
        between = nx.descendants(g.nx_graph, left) & nx.ancestors(g.nx_graph, right)
        if not between:
            current.append(right)
            continue
        components.append(ChainComponent((tuple(current),)))
        components.append(ChainComponent(tuple(_region_chains(g, between))))
        current = [right]
    components.append(ChainComponent((tuple(current),)))
    return components


# Remove virtual terminals from decomposed components, dropping what becomes empty
def drop_virtual_nodes(components):
    result = []
    for component in components:
        chains = tuple(tuple(n for n in chain if n not in (VIRTUAL_SOURCE, VIRTUAL_SINK))
                       for chain in component.chains)
        chains = tuple(chain for chain in chains if chain)
        if chains:
            result.append(ChainComponent(chains))
    return result


def model_graph_from_document(doc):
    check_document(doc, 'model_graph')
    layers = []
    for entry in require(doc, 'nodes', 'model_graph'):
        layers.append(LayerNode(id=str(require(entry, 'id', 'node')),
                                param_bytes=float(require(entry, 'param_bytes', 'node')),
                                activation_bytes=float(require(entry, 'activation_bytes', 'node')),
                                original_ids=tuple(entry.get('original_ids', ()))))
    return build_model_graph(layers, [tuple(e) for e in require(doc, 'edges', 'model_graph')])


def model_graph_to_document(g):
    nodes = []
    for n in g.nodes:
        entry = {'id': n.id, 'param_bytes': n.param_bytes, 'activation_bytes': n.activation_bytes}
        if n.original_ids != (n.id,):
            entry['original_ids'] = list(n.original_ids)
        nodes.append(entry)
    return make_document('model_graph', {'nodes': nodes, 'edges': [list(e) for e in g.edges]})
