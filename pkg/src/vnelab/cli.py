"""vne-lab command line interface."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import harness
from .netmodel import (ScenarioConfig, generate_waxman, load_topology,
                       sample_vnr_stream, save_topology)
from .simkernel import lar, lt_r2c, rac, run_simulation, write_event_jsonl, \
    write_metrics_csv


def _cmd_gen_topology(args):
    pn = generate_waxman(args.nodes, args.links, args.seed)
    save_topology(pn, args.out)
    print(f"wrote {args.out}: {pn.node_count} nodes, {len(pn.links)} links")
    return 0


def _cmd_simulate(args):
    pn = load_topology(args.topology, seed=args.seed)
    scenario = ScenarioConfig(count=args.count, arrival_rate=args.eta)
    vnrs = sample_vnr_stream(scenario, args.seed)
    solver = harness.make_solver(args.solver)
    ledger = run_simulation(pn, vnrs, solver)
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(ledger, os.path.join(args.out, "metrics.csv"))
    write_event_jsonl(ledger, os.path.join(args.out, "events.jsonl"))
    print(f"topology: {pn.node_count} nodes, {len(pn.links)} links")
    print(f"RAC={rac(ledger):.4f} LAR={lar(ledger):.4f} "
          f"LT-R2C={lt_r2c(ledger) if ledger.cost_weighted_sum else 0.0:.4f}")
    return 0


def _cmd_train(args):
    from .trainer import train
    topo, cfg = harness.parse_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    pn = topo.build(harness.derive_seed(cfg.seed, "topology"))
    result = train(pn, cfg)
    os.makedirs(args.out, exist_ok=True)
    result.policy_set.save(os.path.join(args.out, "policy_set"))
    with open(os.path.join(args.out, "training_log.jsonl"), "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"trained ({cfg.training_mode} mode); policies in {args.out}/policy_set")
    return 0


def _parse_sizes(spec: str):
    if ".." in spec:
        a, b = spec.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(s) for s in spec.split(",")]


def _cmd_fine_tune(args):
    from .policy import Policy
    from .trainer import PolicySet, TrainConfig, fine_tune
    meta = Policy.load(args.meta)
    pn = load_topology(args.topology, seed=args.seed)
    cfg = TrainConfig(seed=args.seed, hidden=meta.cfg.hidden,
                      gcn_layers=meta.cfg.gcn_layers,
                      norm_const=meta.cfg.norm_const,
                      action_mode=meta.cfg.action_mode,
                      uni_order=meta.cfg.uni_order)
    cfg.scenario.arrival_rate = args.eta
    cfg.scenario.count = args.count
    by_size = fine_tune(meta, pn, cfg.scenario, _parse_sizes(args.sizes),
                        args.iterations, cfg)
    PolicySet(meta, by_size).save(args.out)
    print(f"fine-tuned sizes {sorted(by_size)}; policy set in {args.out}")
    return 0


def _cmd_evaluate(args):
    from .trainer import PolicySet
    pset = PolicySet.load(args.policy_set)
    pn = load_topology(args.topology, seed=args.seed)
    scenario = ScenarioConfig(count=args.count, arrival_rate=args.eta)
    vnrs = sample_vnr_stream(scenario, args.seed)
    ledger = run_simulation(pn, vnrs, pset)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_metrics_csv(ledger, os.path.join(args.out, "metrics.csv"))
    print(f"RAC={rac(ledger):.4f} LAR={lar(ledger):.4f} "
          f"LT-R2C={lt_r2c(ledger) if ledger.cost_weighted_sum else 0.0:.4f}")
    return 0


def _cmd_sweep(args):
    plan = harness.parse_config(args.config)
    if args.out:
        plan.output_dir = args.out
    if args.seed is not None:
        plan.base_seed = args.seed
    ok = harness.run_experiment(plan, jobs=args.jobs)
    print(f"sweep {'completed' if ok else 'finished with failures'}; "
          f"results in {plan.output_dir}")
    return 0 if ok else 1


def _cmd_emit_defaults(args):
    harness.emit_defaults(args.out)
    print(f"wrote defaults to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vne-lab",
                                description="Online virtual network embedding workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-topology", help="generate a Waxman substrate")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--links", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_topology)

    s = sub.add_parser("simulate", help="run one online simulation")
    s.add_argument("--topology", required=True)
    s.add_argument("--eta", type=float, required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--solver", default="greedy",
                   help="'greedy' or 'policy:PATH'")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_simulate)

    t = sub.add_parser("train", help="train policies from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_train)

    f = sub.add_parser("fine-tune", help="adapt a meta-policy to given sizes")
    f.add_argument("--meta", required=True, help="meta-policy checkpoint (.npz)")
    f.add_argument("--topology", required=True)
    f.add_argument("--sizes", required=True, help="e.g. 2..12 or 3,5,12")
    f.add_argument("--eta", type=float, default=0.001)
    f.add_argument("--count", type=int, default=100)
    f.add_argument("--iterations", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=_cmd_fine_tune)

    e = sub.add_parser("evaluate", help="evaluate a policy set")
    e.add_argument("--policy-set", required=True)
    e.add_argument("--topology", required=True)
    e.add_argument("--eta", type=float, required=True)
    e.add_argument("--count", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=_cmd_evaluate)

    w = sub.add_parser("sweep", help="run an experiment plan")
    w.add_argument("--config", required=True)
    w.add_argument("--seed", type=int, default=None)
    w.add_argument("--out", default=None)
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(fn=_cmd_sweep)

    d = sub.add_parser("emit-defaults", help="write the default sweep config")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=_cmd_emit_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
