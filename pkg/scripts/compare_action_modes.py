#!/usr/bin/env python3
"""Ablation: bidirectional vs unidirectional action space, and training modes.

Trains one small policy per configuration on a generated substrate and
reports evaluation acceptance and long-term revenue-to-cost.

Usage: python3 scripts/compare_action_modes.py [--seed 0]
"""
import argparse

from vnelab.netmodel import ScenarioConfig, generate_waxman, sample_vnr_stream
from vnelab.simkernel import lt_r2c, rac, run_simulation
from vnelab.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--count", type=int, default=100)
    args = ap.parse_args()

    pn = generate_waxman(20, 40, seed=args.seed + 7)
    scenario = ScenarioConfig(count=args.count, arrival_rate=0.005,
                              size_range=(2, 6))
    eval_vnrs = sample_vnr_stream(
        ScenarioConfig(count=200, arrival_rate=0.005, size_range=(2, 6)),
        seed=args.seed + 90001)

    configs = [
        ("bi/single", dict(action_mode="bi", training_mode="single")),
        ("uni-nrm/single", dict(action_mode="uni", uni_order="nrm",
                                training_mode="single")),
        ("uni-id/single", dict(action_mode="uni", uni_order="id",
                               training_mode="single")),
    ]
    print(f"{'config':<16} {'RAC':>6} {'LT-R2C':>7}")
    for name, overrides in configs:
        cfg = TrainConfig(scenario=scenario, meta_iterations=args.iterations,
                          hidden=64, gcn_layers=2, seed=args.seed, **overrides)
        result = train(pn, cfg)
        ledger = run_simulation(pn, eval_vnrs, result.policy_set)
        r2c = lt_r2c(ledger) if ledger.cost_weighted_sum else 0.0
        print(f"{name:<16} {rac(ledger):>6.3f} {r2c:>7.3f}")


if __name__ == "__main__":
    main()
