#!/usr/bin/env python3
"""Sweep solvers across arrival rates on the bundled topology and print the
aggregated summary table.

Usage: python3 scripts/sweep_arrival_rates.py [--out runs/sweep]
       [--solvers greedy policy:runs/meta/policy_set]
"""
import argparse
import csv
import os

from vnelab.harness import ExperimentPlan, TopologySpec, run_experiment
from vnelab.netmodel import ScenarioConfig, bundled_topology_path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--solvers", nargs="+", default=["greedy"])
    ap.add_argument("--rates", nargs="+", type=float,
                    default=[0.0005, 0.001, 0.002, 0.004])
    ap.add_argument("--count", type=int, default=500)
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    plan = ExperimentPlan(
        topology=TopologySpec(kind="file", path=bundled_topology_path()),
        scenario=ScenarioConfig(count=args.count),
        arrival_rates=args.rates,
        solvers=args.solvers,
        repetitions=args.repetitions,
        base_seed=args.seed,
        output_dir=args.out)
    ok = run_experiment(plan, jobs=args.jobs)
    with open(os.path.join(args.out, "summary.csv")) as fh:
        for row in csv.reader(fh):
            print("\t".join(str(c)[:10] for c in row))
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
