#!/usr/bin/env python3
"""Train the meta-policy with curriculum scheduling on the bundled topology
and save the resulting policy set.

Usage: python3 scripts/train_meta.py [--out runs/meta] [--seed 0]
"""
import argparse
import json
import os

from vnelab.harness import derive_seed
from vnelab.netmodel import ScenarioConfig, bundled_topology_path, load_topology
from vnelab.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/meta")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--meta-iterations", type=int, default=20)
    ap.add_argument("--finetune-iterations", type=int, default=5)
    ap.add_argument("--count", type=int, default=200,
                    help="requests per training simulation")
    ap.add_argument("--eta", type=float, default=0.001)
    ap.add_argument("--hidden", type=int, default=128)
    args = ap.parse_args()

    pn = load_topology(bundled_topology_path(),
                       seed=derive_seed(args.seed, "topology"))
    cfg = TrainConfig(scenario=ScenarioConfig(count=args.count,
                                              arrival_rate=args.eta),
                      training_mode="meta",
                      meta_iterations=args.meta_iterations,
                      finetune_iterations=args.finetune_iterations,
                      hidden=args.hidden, seed=args.seed)
    result = train(pn, cfg)
    os.makedirs(args.out, exist_ok=True)
    result.policy_set.save(os.path.join(args.out, "policy_set"))
    with open(os.path.join(args.out, "training_log.jsonl"), "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    accept = [e["accept_rate"] for e in result.log if "accept_rate" in e]
    print(f"saved policy set to {args.out}/policy_set "
          f"({len(result.trajectories)} training episodes)")
    if accept:
        print(f"fine-tune acceptance, last per size: {accept[-5:]}")


if __name__ == "__main__":
    main()
