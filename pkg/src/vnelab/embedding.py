"""Embedding solutions, constraint enforcement, BFS routing, accounting, oracle."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .netmodel import (Link, N_RESOURCES, PhysicalNetwork, SubstrateState,
                       VirtualNetworkRequest, canon)


@dataclass
class EmbeddingSolution:
    vnr: VirtualNetworkRequest
    node_map: Dict[int, int] = field(default_factory=dict)
    link_paths: Dict[Link, Tuple[Link, ...]] = field(default_factory=dict)
    feasible: bool = False
    revenue: float = 0.0
    cost: float = 0.0

    @property
    def vnr_id(self) -> int:
        return self.vnr.id

    def r2c(self) -> float:
        if not self.feasible:
            return 0.0
        return self.revenue / self.cost if self.cost > 0 else 0.0


class ReleaseError(RuntimeError):
    pass


def feasible_hosts(state: SubstrateState, vnr: VirtualNetworkRequest, nv: int,
                   partial: EmbeddingSolution) -> Set[int]:
    """Physical nodes that can host nv: enough resources on every dimension
    and not already used by this VNR's earlier placements."""
    demand = vnr.demand_array[nv]
    ok = np.all(state.avail >= demand, axis=1)
    used = set(partial.node_map.values()) | state.hosts_of(vnr.id)
    return {i for i in np.nonzero(ok)[0].tolist() if i not in used}


def feasible_host_mask(state: SubstrateState, vnr: VirtualNetworkRequest, nv: int,
                       partial: EmbeddingSolution) -> np.ndarray:
    """Boolean mask version of feasible_hosts (index = physical node id)."""
    demand = vnr.demand_array[nv]
    mask = np.all(state.avail >= demand, axis=1)
    for np_id in set(partial.node_map.values()) | state.hosts_of(vnr.id):
        mask[np_id] = False
    return mask


def place_node(state: SubstrateState, partial: EmbeddingSolution, nv: int,
               np_id: int) -> Optional[str]:
    """Try to place virtual node nv on physical node np_id.

    Returns None on success, or a failure reason ("resources"/"exclusivity")
    with the state untouched.
    """
    vnr = partial.vnr
    if nv in partial.node_map:
        raise ValueError(f"virtual node {nv} already mapped")
    if np_id in set(partial.node_map.values()) | state.hosts_of(vnr.id):
        return "exclusivity"
    demand = vnr.demand_array[nv]
    if not np.all(state.avail[np_id] >= demand):
        return "resources"
    state.avail[np_id] -= demand
    partial.node_map[nv] = np_id
    state.hosted.setdefault(vnr.id, {})[nv] = np_id
    return None


def route_link(state: SubstrateState, partial: EmbeddingSolution,
               lv: Link) -> Optional[Tuple[Link, ...]]:
    """BFS shortest path between the hosts of lv's endpoints over links with
    enough available bandwidth.  Neighbors expand in ascending node-id order
    (deterministic tie-break).  Decrements bandwidth along the found path."""
    vnr = partial.vnr
    lv = canon(*lv)
    u, v = lv
    if u not in partial.node_map or v not in partial.node_map:
        raise ValueError(f"virtual link {lv} endpoints not both mapped")
    demand = vnr.bw_array[vnr.link_index[lv]]
    src, dst = partial.node_map[u], partial.node_map[v]
    pn = state.network
    prev: Dict[int, Tuple[int, int]] = {}  # node -> (parent node, link idx)
    seen = {src}
    queue = deque([src])
    found = False
    while queue and not found:
        cur = queue.popleft()
        for nbr, li in pn.adjacency[cur]:  # sorted ascending by neighbor id
            if nbr in seen or state.avail_bw[li] < demand:
                continue
            seen.add(nbr)
            prev[nbr] = (cur, li)
            if nbr == dst:
                found = True
                break
            queue.append(nbr)
    if not found:
        return None
    path_links: List[Link] = []
    node = dst
    while node != src:
        parent, li = prev[node]
        path_links.append(pn.links[li])
        node = parent
    path = tuple(reversed(path_links))
    for l in path:
        state.avail_bw[pn.link_index[l]] -= demand
    partial.link_paths[lv] = path
    return path


def release(state: SubstrateState, solution: EmbeddingSolution) -> None:
    """Reverse every decrement recorded in the solution (full or partial)."""
    vnr = solution.vnr
    hosted = state.hosted.get(vnr.id)
    if hosted is None and solution.node_map:
        raise ReleaseError(f"VNR {vnr.id} not present in state (double release?)")
    for nv, np_id in solution.node_map.items():
        if hosted is None or hosted.get(nv) != np_id:
            raise ReleaseError(f"VNR {vnr.id} node {nv} not hosted on {np_id}")
        state.avail[np_id] += vnr.demand_array[nv]
        del hosted[nv]
    if hosted is not None and not hosted:
        del state.hosted[vnr.id]
    pn = state.network
    for lv, path in solution.link_paths.items():
        demand = vnr.bw_array[vnr.link_index[lv]]
        for l in path:
            state.avail_bw[pn.link_index[l]] += demand


def revenue(vnr: VirtualNetworkRequest) -> float:
    return float(vnr.demand_array.sum() / N_RESOURCES + vnr.bw_array.sum())


def cost(vnr: VirtualNetworkRequest, solution: EmbeddingSolution) -> float:
    if not solution.feasible:
        raise ValueError("cost undefined for infeasible solution")
    node_part = vnr.demand_array.sum() / N_RESOURCES
    link_part = sum(len(solution.link_paths[canon(*lv)]) * vnr.bw_array[vnr.link_index[canon(*lv)]]
                    for lv in vnr.links)
    return float(node_part + link_part)


def r2c(vnr: VirtualNetworkRequest, solution: Optional[EmbeddingSolution]) -> float:
    if solution is None or not solution.feasible:
        return 0.0
    c = cost(vnr, solution)
    return revenue(vnr) / c if c > 0 else 0.0


def finalize(solution: EmbeddingSolution) -> EmbeddingSolution:
    """Mark a completed embedding feasible and fill in revenue/cost."""
    vnr = solution.vnr
    assert len(solution.node_map) == vnr.node_count
    assert len(solution.link_paths) == len(vnr.links)
    solution.feasible = True
    solution.revenue = revenue(vnr)
    solution.cost = cost(vnr, solution)
    return solution


def verify_solution(pn: PhysicalNetwork,
                    concurrent: Iterable[EmbeddingSolution]) -> List[str]:
    """Re-check all constraints from scratch against raw capacities.

    Returns an empty list when everything holds, else one message per
    violation.
    """
    violations: List[str] = []
    node_load = np.zeros_like(pn.capacity_array)
    link_load = np.zeros_like(pn.bw_array)
    for sol in concurrent:
        vnr = sol.vnr
        tag = f"vnr {vnr.id}"
        if set(sol.node_map) != set(range(vnr.node_count)):
            violations.append(f"{tag}: node_map not total")
        if len(set(sol.node_map.values())) != len(sol.node_map):
            violations.append(f"{tag}: node_map not injective (one-to-one)")
        for nv, np_id in sol.node_map.items():
            if not (0 <= np_id < pn.node_count):
                violations.append(f"{tag}: host {np_id} out of range")
                continue
            node_load[np_id] += vnr.demand_array[nv]
        if set(sol.link_paths) != {canon(*l) for l in vnr.links}:
            violations.append(f"{tag}: link_paths not total")
        for lv, path in sol.link_paths.items():
            lv = canon(*lv)
            u, v = lv
            src = sol.node_map.get(u)
            dst = sol.node_map.get(v)
            visited = [src]
            cur = src
            ok = True
            for l in path:
                if l not in pn.link_index:
                    violations.append(f"{tag}: path uses unknown link {l}")
                    ok = False
                    break
                a, b = l
                if cur == a:
                    cur = b
                elif cur == b:
                    cur = a
                else:
                    violations.append(f"{tag}: path for {lv} not contiguous (flow conservation)")
                    ok = False
                    break
                visited.append(cur)
                link_load[pn.link_index[l]] += vnr.bw_array[vnr.link_index[lv]]
            if ok and cur != dst:
                violations.append(f"{tag}: path for {lv} ends at {cur}, host is {dst}")
            if len(set(visited)) != len(visited):
                violations.append(f"{tag}: path for {lv} revisits a node (loop)")
    over = node_load > pn.capacity_array + 1e-9
    for np_id in np.nonzero(over.any(axis=1))[0]:
        violations.append(f"node {np_id}: resource demand exceeds capacity")
    for li in np.nonzero(link_load > pn.bw_array + 1e-9)[0]:
        violations.append(f"link {pn.links[li]}: bandwidth demand exceeds capacity")
    return violations


def _route_pending(state: SubstrateState, partial: EmbeddingSolution) -> bool:
    """Route all virtual links whose endpoints just became both mapped."""
    vnr = partial.vnr
    for lv in vnr.links:
        if lv in partial.link_paths:
            continue
        u, v = lv
        if u in partial.node_map and v in partial.node_map:
            if route_link(state, partial, lv) is None:
                return False
    return True


MAX_ORACLE_VNR = 4
MAX_ORACLE_PN = 8


def exhaustive_best(state: SubstrateState, vnr: VirtualNetworkRequest,
                    ordering: Optional[Sequence[int]] = None
                    ) -> Optional[EmbeddingSolution]:
    """Enumerate every embedding the incremental environment could produce.

    With ordering=None (free order) all interleavings of virtual-node decision
    order and host choice are explored; with a fixed ordering only host
    choices.  Routing is replayed incrementally exactly as the environment
    does.  Returns the max-R2C feasible solution, or None.
    """
    if vnr.node_count > MAX_ORACLE_VNR or state.network.node_count > MAX_ORACLE_PN:
        raise ValueError("instance too large for exhaustive search")
    if ordering is not None and sorted(ordering) != list(range(vnr.node_count)):
        raise ValueError("ordering must be a permutation of virtual node ids")

    best: List[Optional[EmbeddingSolution]] = [None]

    def recurse(st: SubstrateState, partial: EmbeddingSolution, depth: int):
        if depth == vnr.node_count:
            sol = EmbeddingSolution(vnr, dict(partial.node_map),
                                    dict(partial.link_paths))
            finalize(sol)
            if best[0] is None or sol.r2c() > best[0].r2c():
                best[0] = sol
            return
        if ordering is None:
            candidates = [nv for nv in range(vnr.node_count)
                          if nv not in partial.node_map]
        else:
            candidates = [ordering[depth]]
        for nv in candidates:
            for np_id in sorted(feasible_hosts(st, vnr, nv, partial)):
                st2 = st.copy()
                p2 = EmbeddingSolution(vnr, dict(partial.node_map),
                                       dict(partial.link_paths))
                if place_node(st2, p2, nv, np_id) is not None:
                    continue
                if not _route_pending(st2, p2):
                    continue
                recurse(st2, p2, depth + 1)

    recurse(state.copy(), EmbeddingSolution(vnr), 0)
    return best[0]
