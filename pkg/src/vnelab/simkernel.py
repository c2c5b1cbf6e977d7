"""Discrete-event simulation of the online network system and metric ledger."""
from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence

from .embedding import EmbeddingSolution, release, verify_solution
from .netmodel import PhysicalNetwork, SubstrateState, VirtualNetworkRequest

ARRIVAL = "arrival"
DEPARTURE = "departure"


class Solver(Protocol):
    def solve(self, state: SubstrateState,
              vnr: VirtualNetworkRequest) -> Optional[EmbeddingSolution]:
        ...


class IntegrityError(RuntimeError):
    pass


@dataclass
class MetricsLedger:
    arrived_count: int = 0
    accepted_count: int = 0
    revenue_weighted_sum: float = 0.0  # sum of REV * lifetime over accepted
    cost_weighted_sum: float = 0.0
    horizon: float = 0.0
    per_event_log: List[dict] = field(default_factory=list)


def rac(ledger: MetricsLedger) -> float:
    if ledger.arrived_count == 0:
        raise ValueError("RAC undefined: no arrivals")
    return ledger.accepted_count / ledger.arrived_count


def lar(ledger: MetricsLedger) -> float:
    if ledger.horizon <= 0:
        raise ValueError("LAR undefined: zero horizon")
    return ledger.revenue_weighted_sum / ledger.horizon


def lt_r2c(ledger: MetricsLedger) -> float:
    if ledger.cost_weighted_sum == 0:
        raise ValueError("LT-R2C undefined: zero cost sum")
    return ledger.revenue_weighted_sum / ledger.cost_weighted_sum


def run_simulation(pn: PhysicalNetwork, vnrs: Sequence[VirtualNetworkRequest],
                   solver: Solver, verify: bool = True,
                   state: Optional[SubstrateState] = None) -> MetricsLedger:
    """Process arrivals/departures in time order, invoking the solver on each
    arrival.  Ties at equal timestamps process departures first."""
    if state is None:
        state = SubstrateState(pn)
    ledger = MetricsLedger()
    # (time, tie priority: departure 0 < arrival 1, seq)
    heap: List[tuple] = []
    seq = 0
    for vnr in vnrs:
        heapq.heappush(heap, (vnr.arrival_time, 1, seq, ARRIVAL, vnr, None))
        seq += 1
    live: Dict[int, EmbeddingSolution] = {}
    while heap:
        t, _, _, kind, vnr, sol = heapq.heappop(heap)
        ledger.horizon = t
        if kind == ARRIVAL:
            ledger.arrived_count += 1
            solution = solver.solve(state, vnr)
            accepted = solution is not None and solution.feasible
            record = {"event_time": t, "event": ARRIVAL, "vnr_id": vnr.id,
                      "size": vnr.node_count, "accepted": int(accepted),
                      "r2c": solution.r2c() if accepted else 0.0,
                      "revenue": solution.revenue if accepted else 0.0,
                      "cost": solution.cost if accepted else 0.0,
                      "lifetime": vnr.lifetime}
            if accepted:
                if verify:
                    problems = verify_solution(pn, list(live.values()) + [solution])
                    if problems:
                        raise IntegrityError(
                            f"solver returned invalid solution for VNR {vnr.id}: "
                            + "; ".join(problems))
                live[vnr.id] = solution
                ledger.accepted_count += 1
                ledger.revenue_weighted_sum += solution.revenue * vnr.lifetime
                ledger.cost_weighted_sum += solution.cost * vnr.lifetime
                heapq.heappush(heap, (t + vnr.lifetime, 0, seq, DEPARTURE, vnr,
                                      solution))
                seq += 1
            ledger.per_event_log.append(record)
        else:
            release(state, sol)
            del live[vnr.id]
            ledger.per_event_log.append(
                {"event_time": t, "event": DEPARTURE, "vnr_id": vnr.id,
                 "size": vnr.node_count, "accepted": "", "r2c": ""})
    return ledger


METRICS_CSV_HEADER = ["event_time", "event", "vnr_id", "size", "accepted",
                      "r2c", "running_rac", "running_lar", "running_lt_r2c"]


def _fmt(x) -> str:
    if x == "":
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(ledger: MetricsLedger, path: str) -> None:
    """Per-event metrics CSV with running long-term metrics and a summary row."""
    arrived = accepted = 0
    rev_sum = cost_sum = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_CSV_HEADER)
        for rec in ledger.per_event_log:
            t = rec["event_time"]
            if rec["event"] == ARRIVAL:
                arrived += 1
                if rec["accepted"]:
                    accepted += 1
                    rev_sum += rec["revenue"] * rec["lifetime"]
                    cost_sum += rec["cost"] * rec["lifetime"]
            running_rac = accepted / arrived if arrived else ""
            running_lar = rev_sum / t if t > 0 else ""
            running_lt = rev_sum / cost_sum if cost_sum > 0 else ""
            w.writerow([_fmt(t), rec["event"], rec["vnr_id"],
                        rec["size"], _fmt(rec["accepted"]), _fmt(rec["r2c"]),
                        _fmt(running_rac), _fmt(running_lar), _fmt(running_lt)])
        w.writerow(["summary", "", "", "", "", "", _fmt(rac(ledger)),
                    _fmt(lar(ledger)),
                    _fmt(lt_r2c(ledger) if ledger.cost_weighted_sum else 0.0)])


def write_event_jsonl(ledger: MetricsLedger, path: str) -> None:
    with open(path, "w") as fh:
        for rec in ledger.per_event_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
