"""Experiment configuration, seeding, sweep orchestration, result export."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .heuristics import GreedySolver
from .netmodel import (PhysicalNetwork, ScenarioConfig, generate_waxman,
                       load_topology)
from .simkernel import (MetricsLedger, lar, lt_r2c, rac, run_simulation,
                        write_event_jsonl, write_metrics_csv)
from .netmodel import sample_vnr_stream


class ConfigError(ValueError):
    """Carries every validation problem found in a config file."""

    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class TopologySpec:
    kind: str = "waxman"          # "waxman" | "file"
    path: Optional[str] = None
    nodes: int = 40
    links: int = 61
    capacity_range: Tuple[int, int] = (50, 100)

    def build(self, seed: int) -> PhysicalNetwork:
        if self.kind == "file":
            return load_topology(self.path, self.capacity_range, seed)
        return generate_waxman(self.nodes, self.links, seed, self.capacity_range)


@dataclass
class ExperimentPlan:
    topology: TopologySpec = field(default_factory=TopologySpec)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    arrival_rates: List[float] = field(default_factory=lambda: [0.001])
    solvers: List[str] = field(default_factory=lambda: ["greedy"])
    repetitions: int = 1
    base_seed: int = 0
    output_dir: str = "results"


_SCENARIO_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)}
_TOPOLOGY_KEYS = {f.name for f in dataclasses.fields(TopologySpec)}
_PLAN_KEYS = {f.name for f in dataclasses.fields(ExperimentPlan)}


def default_plan_dict() -> dict:
    plan = ExperimentPlan()
    return {
        "topology": dataclasses.asdict(plan.topology),
        "scenario": dataclasses.asdict(plan.scenario),
        "arrival_rates": plan.arrival_rates,
        "solvers": plan.solvers,
        "repetitions": plan.repetitions,
        "base_seed": plan.base_seed,
        "output_dir": plan.output_dir,
    }


def emit_defaults(path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(default_plan_dict(), fh, sort_keys=True)


def _tupleize(value):
    return tuple(value) if isinstance(value, list) else value


def parse_plan_dict(raw: dict) -> ExperimentPlan:
    problems: List[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])
    unknown = set(raw) - _PLAN_KEYS
    for k in sorted(unknown):
        problems.append(f"unknown key: {k}")
    plan = ExperimentPlan()
    for section, keys, target in (("topology", _TOPOLOGY_KEYS, plan.topology),
                                  ("scenario", _SCENARIO_KEYS, plan.scenario)):
        sub = raw.get(section, {})
        if not isinstance(sub, dict):
            problems.append(f"{section} must be a mapping")
            continue
        for k in sorted(set(sub) - keys):
            problems.append(f"unknown key: {section}.{k}")
        for k, v in sub.items():
            if k in keys:
                try:
                    setattr(target, k, _tupleize(v))
                except (TypeError, ValueError) as exc:
                    problems.append(f"{section}.{k}: {exc}")
    for k in ("arrival_rates", "solvers", "repetitions", "base_seed",
              "output_dir"):
        if k in raw:
            setattr(plan, k, raw[k])

    if plan.topology.kind not in ("waxman", "file"):
        problems.append(f"topology.kind must be waxman or file, got {plan.topology.kind!r}")
    if plan.topology.kind == "file" and not plan.topology.path:
        problems.append("topology.path required when topology.kind = file")
    if not plan.arrival_rates:
        problems.append("arrival_rates must be non-empty")
    for eta in plan.arrival_rates:
        if not isinstance(eta, (int, float)) or eta <= 0:
            problems.append(f"arrival_rates entry must be > 0, got {eta!r}")
    if not plan.solvers:
        problems.append("solvers must be non-empty")
    for s in plan.solvers:
        if s != "greedy" and not str(s).startswith("policy:"):
            problems.append(f"unknown solver {s!r} (use 'greedy' or 'policy:PATH')")
    if not isinstance(plan.repetitions, int) or plan.repetitions < 1:
        problems.append("repetitions must be an integer >= 1")
    try:
        plan.scenario.validate()
    except ValueError as exc:
        problems.append(f"scenario: {exc}")
    if problems:
        raise ConfigError(problems)
    return plan


def parse_config(path: str) -> ExperimentPlan:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return parse_plan_dict(raw)


def derive_seed(base_seed: int, *coords) -> int:
    """Pure cell-seed derivation from base seed and cell coordinates."""
    key = json.dumps([base_seed, *[str(c) for c in coords]], sort_keys=True)
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 31)


def make_solver(name: str):
    if name == "greedy":
        return GreedySolver()
    if name.startswith("policy:"):
        from .policy import Policy
        from .trainer import PolicySet, PolicySolver
        path = name.split(":", 1)[1]
        if os.path.isdir(path):
            return PolicySet.load(path)
        return PolicySolver(Policy.load(path), mode="greedy")
    raise ValueError(f"unknown solver {name!r}")


def cell_name(solver: str, eta: float, rep: int) -> str:
    tag = solver.replace(":", "_").replace("/", "_")
    return f"{tag}_eta{eta:g}_rep{rep}"


def run_cell(plan: ExperimentPlan, solver_name: str, eta: float,
             rep: int) -> dict:
    seed = derive_seed(plan.base_seed, solver_name, f"{eta:g}", rep)
    pn = plan.topology.build(derive_seed(plan.base_seed, "topology"))
    scenario = dataclasses.replace(plan.scenario, arrival_rate=eta)
    vnrs = sample_vnr_stream(scenario, seed)
    solver = make_solver(solver_name)
    ledger = run_simulation(pn, vnrs, solver)
    name = cell_name(solver_name, eta, rep)
    os.makedirs(plan.output_dir, exist_ok=True)
    write_metrics_csv(ledger, os.path.join(plan.output_dir, name + ".csv"))
    write_event_jsonl(ledger, os.path.join(plan.output_dir, name + ".jsonl"))
    return {"solver": solver_name, "eta": eta, "rep": rep, "status": "ok",
            "rac": rac(ledger), "lar": lar(ledger),
            "lt_r2c": lt_r2c(ledger) if ledger.cost_weighted_sum else 0.0}


def parse_train_config(path: str):
    """Training config: a `topology` section plus TrainConfig fields (with
    the scenario nested under `scenario`)."""
    from .trainer import TrainConfig
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    problems: List[str] = []
    cfg = TrainConfig()
    topo = TopologySpec()
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"scenario"}
    for k in sorted(set(raw) - train_keys - {"topology", "scenario"}):
        problems.append(f"unknown key: {k}")
    for section, keys, target in (("topology", _TOPOLOGY_KEYS, topo),
                                  ("scenario", _SCENARIO_KEYS, cfg.scenario)):
        sub = raw.get(section, {})
        if not isinstance(sub, dict):
            problems.append(f"{section} must be a mapping")
            continue
        for k in sorted(set(sub) - keys):
            problems.append(f"unknown key: {section}.{k}")
        for k, v in sub.items():
            if k in keys:
                setattr(target, k, _tupleize(v))
    for k in train_keys:
        if k in raw:
            setattr(cfg, k, _tupleize(raw[k]))
    if problems:
        raise ConfigError(problems)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError([str(exc)])
    return topo, cfg


SUMMARY_HEADER = ["solver", "eta", "rac", "lar", "lt_r2c", "repetitions"]


def run_experiment(plan: ExperimentPlan, jobs: int = 1) -> bool:
    """Run every (solver, eta, repetition) cell; aggregate a summary CSV.

    Cell failures are recorded and the remaining cells proceed.  Returns True
    when every cell succeeded.
    """
    cells = [(s, eta, rep) for s in plan.solvers for eta in plan.arrival_rates
             for rep in range(plan.repetitions)]
    results: List[dict] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, plan, *c) for c in cells]
            for c, fut in zip(cells, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    results.append({"solver": c[0], "eta": c[1], "rep": c[2],
                                    "status": f"failed: {exc}"})
    else:
        for c in cells:
            try:
                results.append(run_cell(plan, *c))
            except Exception as exc:
                results.append({"solver": c[0], "eta": c[1], "rep": c[2],
                                "status": f"failed: {exc}"})
    os.makedirs(plan.output_dir, exist_ok=True)
    with open(os.path.join(plan.output_dir, "summary.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for solver in plan.solvers:
            for eta in plan.arrival_rates:
                cell_rows = [r for r in results
                             if r["solver"] == solver and r["eta"] == eta
                             and r["status"] == "ok"]
                if not cell_rows:
                    w.writerow([solver, f"{eta:g}", "failed", "", "", 0])
                    continue
                w.writerow([solver, f"{eta:g}",
                            repr(sum(r["rac"] for r in cell_rows) / len(cell_rows)),
                            repr(sum(r["lar"] for r in cell_rows) / len(cell_rows)),
                            repr(sum(r["lt_r2c"] for r in cell_rows) / len(cell_rows)),
                            len(cell_rows)])
    with open(os.path.join(plan.output_dir, "cells.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    return all(r["status"] == "ok" for r in results)
