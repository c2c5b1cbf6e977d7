"""NRM-style greedy reference solver.

The cited node-resource-management metric has no formula in this problem's
literature summary, so this module uses a documented stand-in:
score(node) = mean(resource availabilities or demands) * sum(adjacent link
bandwidth availability or demand).  Results are labeled "NRM-style".
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from .embedding import (EmbeddingSolution, _route_pending, feasible_hosts,
                        finalize, place_node, release)
from .netmodel import SubstrateState, VirtualNetworkRequest


def nrm_score_physical(state: SubstrateState, node: int) -> float:
    adj_bw = sum(state.avail_bw[li] for _, li in state.network.adjacency[node])
    return float(state.avail[node].mean() * adj_bw)


def nrm_score_virtual(vnr: VirtualNetworkRequest, node: int) -> float:
    adj_bw = sum(vnr.bw_array[li] for _, li in vnr.adjacency[node])
    return float(vnr.demand_array[node].mean() * adj_bw)


def nrm_ordering(vnr: VirtualNetworkRequest) -> List[int]:
    """Virtual nodes in descending score order, ties broken by ascending id."""
    return sorted(range(vnr.node_count),
                  key=lambda nv: (-nrm_score_virtual(vnr, nv), nv))


def id_ordering(vnr: VirtualNetworkRequest) -> List[int]:
    return list(range(vnr.node_count))


def greedy_solve(state: SubstrateState,
                 vnr: VirtualNetworkRequest) -> Optional[EmbeddingSolution]:
    """Greedy matching with incremental BFS link routing.

    Virtual nodes in descending NRM-style score order, each assigned to the
    highest-scoring feasible host.  Any failure rejects the VNR atomically.
    """
    partial = EmbeddingSolution(vnr)
    for nv in nrm_ordering(vnr):
        hosts = feasible_hosts(state, vnr, nv, partial)
        if not hosts:
            release(state, partial)
            return None
        best = max(sorted(hosts), key=lambda h: (nrm_score_physical(state, h), -h))
        if place_node(state, partial, nv, best) is not None:
            release(state, partial)
            return None
        if not _route_pending(state, partial):
            release(state, partial)
            return None
    return finalize(partial)


class GreedySolver:
    """Solver-protocol wrapper around greedy_solve."""

    name = "greedy-nrm"

    def solve(self, state, vnr):
        return greedy_solve(state, vnr)
