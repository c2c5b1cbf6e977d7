"""Substrate / virtual network data model, random generators, topology file I/O."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

RESOURCE_NAMES = ("cpu", "storage", "gpu")
N_RESOURCES = len(RESOURCE_NAMES)

Link = Tuple[int, int]


def canon(u: int, v: int) -> Link:
    """Canonical undirected link key (u < v)."""
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class ResourceVector:
    cpu: float
    storage: float
    gpu: float

    def __post_init__(self):
        if self.cpu < 0 or self.storage < 0 or self.gpu < 0:
            raise ValueError(f"negative resource component: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cpu, self.storage, self.gpu], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "ResourceVector":
        return ResourceVector(float(a[0]), float(a[1]), float(a[2]))

    def __le__(self, other: "ResourceVector") -> bool:
        return (self.cpu <= other.cpu and self.storage <= other.storage
                and self.gpu <= other.gpu)


class _Graph:
    """Shared plumbing for attributed undirected graphs."""

    def __init__(self, node_count: int, links: Sequence[Link],
                 link_bandwidth: Dict[Link, float]):
        if node_count < 1:
            raise ValueError("node_count must be >= 1")
        links = [canon(u, v) for u, v in links]
        seen: Set[Link] = set()
        for (u, v) in links:
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise ValueError(f"link ({u},{v}) endpoint out of range")
            if (u, v) in seen:
                raise ValueError(f"parallel link ({u},{v})")
            seen.add((u, v))
        self.node_count = node_count
        self.links: List[Link] = sorted(seen)
        self.link_index: Dict[Link, int] = {l: i for i, l in enumerate(self.links)}
        bw = np.zeros(len(self.links), dtype=np.float64)
        for l, b in link_bandwidth.items():
            l = canon(*l)
            if b < 0:
                raise ValueError(f"negative bandwidth on {l}")
            bw[self.link_index[l]] = float(b)
        self.bw_array = bw
        # adjacency: node -> sorted list of (neighbor, link index)
        adj: List[List[Tuple[int, int]]] = [[] for _ in range(node_count)]
        for (u, v), i in self.link_index.items():
            adj[u].append((v, i))
            adj[v].append((u, i))
        for lst in adj:
            lst.sort()
        self.adjacency = adj

    @property
    def link_bandwidth(self) -> Dict[Link, float]:
        return {l: float(self.bw_array[i]) for i, l in enumerate(self.links)}

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def is_connected(self) -> bool:
        return bfs_connected(self.node_count, self.adjacency)


def bfs_connected(node_count: int, adjacency) -> bool:
    """Independent BFS connectivity check (also used as a generator oracle)."""
    if node_count == 0:
        return True
    seen = [False] * node_count
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        u = stack.pop()
        for v, _ in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    return count == node_count


class PhysicalNetwork(_Graph):
    def __init__(self, node_count: int, node_capacities: Sequence[ResourceVector],
                 links: Sequence[Link], link_bandwidth: Dict[Link, float]):
        super().__init__(node_count, links, link_bandwidth)
        if len(node_capacities) != node_count:
            raise ValueError("capacity list length != node_count")
        self.node_capacities = list(node_capacities)
        self.capacity_array = np.stack([c.as_array() for c in node_capacities])

    def __repr__(self):
        return f"PhysicalNetwork(n={self.node_count}, m={len(self.links)})"


class VirtualNetworkRequest(_Graph):
    def __init__(self, vnr_id: int, node_demands: Sequence[ResourceVector],
                 links: Sequence[Link], link_bandwidth: Dict[Link, float],
                 arrival_time: float, lifetime: float):
        super().__init__(len(node_demands), links, link_bandwidth)
        if lifetime <= 0:
            raise ValueError("lifetime must be > 0")
        if arrival_time < 0:
            raise ValueError("arrival_time must be >= 0")
        self.id = vnr_id
        self.node_demands = list(node_demands)
        self.demand_array = np.stack([d.as_array() for d in node_demands])
        self.arrival_time = float(arrival_time)
        self.lifetime = float(lifetime)

    def __repr__(self):
        return (f"VNR(id={self.id}, n={self.node_count}, m={len(self.links)}, "
                f"t={self.arrival_time:.2f}, d={self.lifetime:.2f})")


class SubstrateState:
    """Mutable available-resource view over a PhysicalNetwork.

    Owned by a single simulation; all mutation goes through the embedding
    operations so that decrements are exactly reversible.
    """

    def __init__(self, network: PhysicalNetwork):
        self.network = network
        self.avail = network.capacity_array.copy()
        self.avail_bw = network.bw_array.copy()
        # vnr id -> {virtual node -> physical node}
        self.hosted: Dict[int, Dict[int, int]] = {}

    @property
    def avail_node(self) -> List[ResourceVector]:
        return [ResourceVector.from_array(row) for row in self.avail]

    @property
    def avail_bandwidth(self) -> Dict[Link, float]:
        return {l: float(self.avail_bw[i]) for i, l in enumerate(self.network.links)}

    def hosts_of(self, vnr_id: int) -> Set[int]:
        return set(self.hosted.get(vnr_id, {}).values())

    def copy(self) -> "SubstrateState":
        s = SubstrateState.__new__(SubstrateState)
        s.network = self.network
        s.avail = self.avail.copy()
        s.avail_bw = self.avail_bw.copy()
        s.hosted = {k: dict(v) for k, v in self.hosted.items()}
        return s

    def equals(self, other: "SubstrateState") -> bool:
        return (self.network is other.network
                and np.array_equal(self.avail, other.avail)
                and np.array_equal(self.avail_bw, other.avail_bw)
                and self.hosted == other.hosted)


@dataclass
class ScenarioConfig:
    """Parameters of the online VNR arrival scenario."""
    count: int = 1000
    arrival_rate: float = 0.001
    size_range: Tuple[int, int] = (2, 10)
    node_demand_range: Tuple[int, int] = (0, 20)
    link_demand_range: Tuple[int, int] = (0, 50)
    mean_lifetime: float = 500.0
    link_probability: float = 0.5

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be > 0")
        lo, hi = self.size_range
        if lo < 2 or hi < lo:
            raise ValueError(f"bad size_range {self.size_range}")
        if self.mean_lifetime <= 0:
            raise ValueError("mean_lifetime must be > 0")
        if not (0.0 <= self.link_probability <= 1.0):
            raise ValueError("link_probability must be in [0,1]")
        for name in ("node_demand_range", "link_demand_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"bad {name}")


class GenerationError(RuntimeError):
    pass


def generate_waxman(node_count: int, target_link_count: int, seed: int,
                    capacity_range: Tuple[int, int] = (50, 100),
                    alpha: float = 0.5) -> PhysicalNetwork:
    """Waxman-style random substrate with an exact link count.

    Nodes get uniform coordinates in the unit square.  A random spanning tree
    (edges drawn with Waxman-probability weights) guarantees connectivity;
    the remaining links are sampled without replacement from the non-tree
    pairs, again weighted by the Waxman edge probability
    p(u,v) = alpha * exp(-d(u,v) / (beta * L)), with beta rescaled so the total
    weight matches the requested link budget.
    """
    if node_count < 2:
        raise ValueError("node_count must be >= 2")
    max_links = node_count * (node_count - 1) // 2
    if target_link_count < node_count - 1:
        raise ValueError("target_link_count below spanning-tree minimum")
    if target_link_count > max_links:
        raise ValueError(f"target_link_count {target_link_count} exceeds {max_links}")
    rng = np.random.default_rng(seed)
    xy = rng.random((node_count, 2))
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    L = dist.max()
    if L <= 0:
        raise GenerationError("degenerate coordinates")

    # rescale beta so the expected number of flipped edges matches the target
    pairs = [(u, v) for u in range(node_count) for v in range(u + 1, node_count)]
    d = np.array([dist[u, v] for u, v in pairs])
    beta = 0.2
    for _ in range(100):
        p = np.clip(alpha * np.exp(-d / (beta * L)), 1e-12, 1.0)
        exp_count = p.sum()
        if abs(exp_count - target_link_count) < 0.5:
            break
        beta *= (target_link_count / max(exp_count, 1e-9)) ** 0.5
        beta = float(np.clip(beta, 1e-4, 1e4))
    weights = np.clip(alpha * np.exp(-d / (beta * L)), 1e-12, 1.0)

    # random spanning tree, biased toward high-probability pairs
    in_tree = {int(rng.integers(node_count))}
    chosen: Set[Link] = set()
    while len(in_tree) < node_count:
        cand = [i for i, (u, v) in enumerate(pairs)
                if (u in in_tree) != (v in in_tree)]
        w = weights[cand]
        pick = cand[int(rng.choice(len(cand), p=w / w.sum()))]
        u, v = pairs[pick]
        chosen.add((u, v))
        in_tree.add(u)
        in_tree.add(v)

    remaining = [i for i, l in enumerate(pairs) if l not in chosen]
    need = target_link_count - len(chosen)
    if need > len(remaining):
        raise GenerationError("not enough candidate pairs")
    if need > 0:
        w = weights[remaining]
        extra = rng.choice(len(remaining), size=need, replace=False, p=w / w.sum())
        for i in extra:
            chosen.add(pairs[remaining[int(i)]])

    lo, hi = capacity_range
    caps = [ResourceVector(*rng.integers(lo, hi + 1, size=3).astype(float))
            for _ in range(node_count)]
    bw = {l: float(rng.integers(lo, hi + 1)) for l in sorted(chosen)}
    pn = PhysicalNetwork(node_count, caps, sorted(chosen), bw)
    if not pn.is_connected():
        raise GenerationError("generated graph not connected")
    return pn


class TopologyParseError(ValueError):
    pass


def load_topology(path: str, capacity_range: Tuple[int, int] = (50, 100),
                  seed: int = 0) -> PhysicalNetwork:
    """Parse the plain-text topology format.

    ``nodes <N>`` header, then ``edge <u> <v> [bandwidth]`` lines and optional
    ``node <id> <cpu> <storage> <gpu>`` lines.  Missing capacities/bandwidths
    are drawn from capacity_range with the given seed.
    """
    rng = np.random.default_rng(seed)
    lo, hi = capacity_range
    node_count = None
    caps: Dict[int, ResourceVector] = {}
    links: List[Link] = []
    bw: Dict[Link, float] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "nodes":
                    node_count = int(parts[1])
                elif parts[0] == "edge":
                    u, v = int(parts[1]), int(parts[2])
                    l = canon(u, v)
                    if l in bw:
                        raise TopologyParseError(f"line {lineno}: duplicate edge {l}")
                    links.append(l)
                    bw[l] = float(parts[3]) if len(parts) > 3 else float(
                        rng.integers(lo, hi + 1))
                elif parts[0] == "node":
                    caps[int(parts[1])] = ResourceVector(
                        float(parts[2]), float(parts[3]), float(parts[4]))
                else:
                    raise TopologyParseError(f"line {lineno}: unknown record {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                if isinstance(exc, TopologyParseError):
                    raise
                raise TopologyParseError(f"line {lineno}: malformed: {line!r}") from exc
    if node_count is None:
        raise TopologyParseError("missing 'nodes <N>' header")
    full_caps = [caps.get(i) or ResourceVector(
        *rng.integers(lo, hi + 1, size=3).astype(float))
        for i in range(node_count)]
    return PhysicalNetwork(node_count, full_caps, links, bw)


def save_topology(pn: PhysicalNetwork, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"nodes {pn.node_count}\n")
        for i, c in enumerate(pn.node_capacities):
            fh.write(f"node {i} {c.cpu:g} {c.storage:g} {c.gpu:g}\n")
        for l in pn.links:
            fh.write(f"edge {l[0]} {l[1]} {pn.bw_array[pn.link_index[l]]:g}\n")


def bundled_topology_path(name: str = "geant") -> str:
    """Path of a topology file shipped with the package (GEANT-scale:
    40 nodes, 61 links)."""
    import importlib.resources as res
    return str(res.files("vnelab").joinpath(f"data/{name}.txt"))


def _connect_components(n: int, links: Set[Link], rng) -> List[Link]:
    """Minimum extra random edges that join the components of (n, links)."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in links:
        parent[find(u)] = find(v)
    comps: Dict[int, List[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    roots = sorted(comps)
    added = []
    for a, b in zip(roots, roots[1:]):
        u = comps[a][int(rng.integers(len(comps[a])))]
        v = comps[b][int(rng.integers(len(comps[b])))]
        added.append(canon(u, v))
        parent[find(u)] = find(v)
    return added


def sample_vnr_stream(cfg: ScenarioConfig, seed: int) -> List[VirtualNetworkRequest]:
    """Poisson arrivals, exponential lifetimes, uniform sizes/demands.

    Virtual links come from independent 50% coin flips per node pair, then
    minimal random edges are added if the result is disconnected.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    vnrs = []
    t = 0.0
    slo, shi = cfg.size_range
    nlo, nhi = cfg.node_demand_range
    llo, lhi = cfg.link_demand_range
    for i in range(cfg.count):
        t += float(rng.exponential(1.0 / cfg.arrival_rate))
        n = int(rng.integers(slo, shi + 1))
        demands = [ResourceVector(*rng.integers(nlo, nhi + 1, size=3).astype(float))
                   for _ in range(n)]
        links: Set[Link] = set()
        for u in range(n):
            for v in range(u + 1, n):
                if rng.random() < cfg.link_probability:
                    links.add((u, v))
        links.update(_connect_components(n, links, rng))
        bw = {l: float(rng.integers(llo, lhi + 1)) for l in sorted(links)}
        lifetime = float(rng.exponential(cfg.mean_lifetime))
        if lifetime <= 0:  # exponential sampler can return exactly 0.0
            lifetime = cfg.mean_lifetime * 1e-9
        vnrs.append(VirtualNetworkRequest(i, demands, sorted(links), bw, t, lifetime))
    return vnrs
