import os

import pytest

from Planner.envModel import (ContentionDomain, CostProfile, Device, Environment, ProfileEntry, QoeSpec, Topology,
                              Workload)
from Planner.graphCore import LayerNode, build_model_graph
from Planner.planModel import Plan, Stage, stage_edges

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
EXAMPLES_DIR = os.path.join(ROOT_DIR, 'Examples')


def _chain_model(params, activations=None, prefix='l'):
    activations = activations or [0.0] * len(params)
    layers = [LayerNode(f'{prefix}{i}', p, a) for i, (p, a) in enumerate(zip(params, activations))]
    edges = [(f'{prefix}{i}', f'{prefix}{i + 1}') for i in range(len(params) - 1)]
    return build_model_graph(layers, edges)


def _make_env(times, bw=80e6, shared=False, capacity=None, idle_power=0.0, comm_power=0.0, mem=1e12,
              accelerators=None, energy_per_second=0.0):
    """Environment from {(layer, device): (fwd, bwd)} times, every device pair linked at ``bw``.

    Each directed pair is its own domain unless ``shared``, then one domain of
    ``capacity`` (default ``bw``) carries all of them.
    """
    device_ids = sorted({d for _, d in times})
    accelerators = accelerators or {}
    devices = tuple(Device(d, mem, idle_power=idle_power, comm_power=comm_power, rank=i + 1,
                           **accelerators.get(d, {}))
                    for i, d in enumerate(device_ids))
    peak_bw = {(s, t): bw for s in device_ids for t in device_ids if s != t}
    if shared:
        domains = (ContentionDomain('shared', capacity or bw, frozenset(peak_bw)),)
    else:
        domains = tuple(ContentionDomain(f'{s}>{t}', b, frozenset({(s, t)})) for (s, t), b in sorted(peak_bw.items()))
    entries = {key: ProfileEntry(f, b, f * energy_per_second, b * energy_per_second, 0.0)
               for key, (f, b) in times.items()}
    return Environment(devices, Topology(domains, peak_bw), CostProfile(entries))


def _make_plan(model_graph, blocks):
    """Plan from [(nodes, devices, batch_alloc)] blocks, stages named s0, s1, ..."""
    stages = tuple(Stage(f's{i}', tuple(nodes), tuple(devices), dict(alloc))
                   for i, (nodes, devices, alloc) in enumerate(blocks))
    return Plan(stages, stage_edges(stages, model_graph))


@pytest.fixture
def chain_model():
    return _chain_model


@pytest.fixture
def make_env():
    return _make_env


@pytest.fixture
def make_plan():
    return _make_plan


@pytest.fixture
def make_qoe():
    def make(t_qoe=1e6, lam=1.0, microbatches=1, units=1, training=True):
        return QoeSpec(t_qoe, lam, Workload(microbatches, units, training))
    return make


@pytest.fixture
def example_paths():
    return {
        'model': os.path.join(EXAMPLES_DIR, 'model.json'),
        'env': os.path.join(EXAMPLES_DIR, 'env_wifi_600.json'),
        'qoe': os.path.join(EXAMPLES_DIR, 'qoe.json'),
        'trace': os.path.join(EXAMPLES_DIR, 'trace.json'),
    }
