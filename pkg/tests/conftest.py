import numpy as np
import pytest

from vnelab.netmodel import (PhysicalNetwork, ResourceVector, ScenarioConfig,
                             SubstrateState, VirtualNetworkRequest,
                             generate_waxman, sample_vnr_stream)


def uniform_substrate(node_count, links, cap=100.0, bw=100.0):
    caps = [ResourceVector(cap, cap, cap)] * node_count
    return PhysicalNetwork(node_count, caps, links,
                           {tuple(sorted(l)): bw for l in links})


def path_substrate(node_count, cap=100.0, bw=100.0):
    links = [(i, i + 1) for i in range(node_count - 1)]
    return uniform_substrate(node_count, links, cap, bw)


def simple_vnr(vnr_id=0, demands=None, links=None, bw=None, arrival=0.0,
               lifetime=100.0):
    demands = demands or [ResourceVector(10, 10, 10)] * 2
    links = links if links is not None else [(0, 1)]
    bw = bw or {tuple(sorted(l)): 20.0 for l in links}
    return VirtualNetworkRequest(vnr_id, demands, links, bw, arrival, lifetime)


def random_tiny_instance(rng, n_p=8, max_nv=4, tight=False):
    """Random small substrate + VNR pair for oracle-based tests."""
    m = int(rng.integers(n_p - 1, n_p * (n_p - 1) // 2 + 1))
    pn = generate_waxman(n_p, m, seed=int(rng.integers(1 << 30)),
                        capacity_range=(30, 60) if tight else (50, 100))
    cfg = ScenarioConfig(count=1, arrival_rate=1.0,
                         size_range=(2, max_nv),
                         node_demand_range=(0, 30) if tight else (0, 20),
                         link_demand_range=(0, 40) if tight else (0, 50))
    vnr = sample_vnr_stream(cfg, seed=int(rng.integers(1 << 30)))[0]
    return pn, vnr


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
