#!/usr/bin/env python3
"""
Delay-aware resource control simulator - command line entry point

Subcommands:
    run      simulate one scenario
    sweep    sweep one scenario axis over values and seeds (all configured policies)
    oracle   solve a tiny exact MDP and compare heuristics against it
    routing  multi-hop backpressure experiments
"""

import argparse
import dataclasses
import logging
import os
import sys
import traceback
from typing import Optional

import numpy as np
import pandas as pd

from sim_errors import SimulationError
from sim_harness import (Scenario, backlog_growth_exponent, compare_policies, experiment_preset,
                         learning_report, load_config, oracle_report, result_row, run,
                         scenario_drift_bound, single_packet_hops, sweep, write_learning_trace,
                         write_results)

SEED_ENV_VAR = "DELAY_SIM_SEED"


def resolve_seed(cli_seed: Optional[int], scenario: Scenario) -> Scenario:
    """CLI seed first, then the DELAY_SIM_SEED environment variable, then the config."""
    if cli_seed is not None:
        return scenario.with_value("seed", cli_seed)
    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed:
        try:
            return scenario.with_value("seed", int(env_seed))
        except ValueError:
            print(f"⚠ Ignoring non-integer {SEED_ENV_VAR}={env_seed!r}")
    return scenario


def _banner(title: str):
    print("=" * 70)
    print(title)
    print("=" * 70)


def _load(args) -> tuple:
    config = load_config(args.config)
    scenario = resolve_seed(args.seed, Scenario.from_dict(config))
    if args.trace:
        scenario = dataclasses.replace(scenario, trace=True)
    return config, scenario


def cmd_run(args) -> int:
    _banner("DELAY-AWARE SIMULATOR - single run")
    print("\n[Step 1] Loading scenario...")
    _, scenario = _load(args)
    print(f"  policy={scenario.policy.name} mode={scenario.mode} seed={scenario.seed} "
          f"horizon={scenario.horizon:,} warm-up={scenario.warmup:,}")
    if scenario.mode == "single_hop" and scenario.policy.name in ("mlwdf", "eeca"):
        print(f"  drift constant B = {scenario_drift_bound(scenario):.6g}")

    print("\n[Step 2] Simulating...")
    result = run(scenario, progress=True)
    df = pd.DataFrame([result_row(result, timing=not args.no_timing)])

    print("\n[Step 3] Writing results...")
    path = write_results(df, args.output, args.format)
    print(f"✓ Results written to {path}")
    if result.learning_trace is not None:
        trace_path = write_learning_trace(result.learning_trace, f"{os.path.splitext(args.output)[0]}_learning.csv")
        print(f"✓ Learning trace written to {trace_path}")
    if result.trace is not None:
        trace_path = write_learning_trace(result.trace, f"{os.path.splitext(args.output)[0]}_slots.csv")
        print(f"✓ Slot trace written to {trace_path}")
    if result.multipliers:
        print(f"  tuned multipliers: {result.multipliers}")

    print("\n" + df.drop(columns=["scenario_hash"]).to_string(index=False))
    return 0


def cmd_sweep(args) -> int:
    _banner("DELAY-AWARE SIMULATOR - sweep")
    print("\n[Step 1] Loading scenario...")
    config, scenario = _load(args)
    block = dict(config.get("sweep", {}))
    if args.preset:
        block.update(experiment_preset(args.preset, scenario))
        scenario = block.pop("scenario")
    axis = block.get("axis")
    values = block.get("values")
    if not axis or not values:
        raise SimulationError("sweep needs 'axis' and 'values' in the config or a --preset")
    seeds = block.get("seeds") or [scenario.seed]
    policies = block.get("policies") or [scenario.policy.name]
    print(f"  axis={axis} values={values} seeds={len(seeds)} policies={policies}")

    print("\n[Step 2] Running sweep...")
    df = compare_policies(scenario, policies, axis, values, seeds, workers=args.workers,
                          timing=not args.no_timing)

    print("\n[Step 3] Writing results...")
    path = write_results(df, args.output, args.format)
    print(f"✓ {len(df)} rows written to {path}")

    summary = df.groupby(["policy", "axis_value"])[["delay_littles", "drop_rate", "pbar"]].mean()
    print("\n" + summary.to_string())
    return 0


def cmd_oracle(args) -> int:
    _banner("DELAY-AWARE SIMULATOR - exact MDP oracle")
    print("\n[Step 1] Loading instance...")
    _, scenario = _load(args)

    print("\n[Step 2] Relative value iteration...")
    report = oracle_report(scenario, n_slots=args.slots)
    print(f"✓ theta = {report['theta']:.8g} after {report['sweeps']} sweeps "
          f"(span {report['final_span']:.3g}, {report['states']} states, {report['actions']} actions)")
    for name in ("mlwdf_cost", "rate_constraint_cost"):
        mark = "✓" if report[name] >= report["theta"] - 1e-9 else "✗"
        print(f"{mark} {name.replace('_cost', '')}: average cost {report[name]:.8g}")
    if "simulated_cost" in report:
        gap = abs(report["simulated_cost"] - report["theta"]) / max(abs(report["theta"]), 1e-12)
        print(f"  simulated greedy cost {report['simulated_cost']:.8g} ({gap:.2%} from theta)")
    if args.learn > 0:
        print(f"\n[Step 3] Training the learning policies for {args.learn} slots...")
        for name in ("approx_v", "approx_q"):
            s = dataclasses.replace(scenario.with_value("policy.name", name), horizon=args.learn, warmup=0)
            learned = learning_report(s, progress=True)
            report[f"{name}_cost"] = learned["learned_cost"]
            print(f"  {name}: average cost {learned['learned_cost']:.6g} ({learned['ratio']:.3f} x theta)")

    write_results(pd.DataFrame([report]), args.output, args.format)
    print(f"✓ Report written to {args.output}")
    return 0


def cmd_routing(args) -> int:
    _banner("DELAY-AWARE SIMULATOR - multi-hop routing")
    print("\n[Step 1] Loading network...")
    config, scenario = _load(args)
    scenario = dataclasses.replace(scenario, mode="multi_hop")
    block = config.get("sweep", {})

    if args.single_packet:
        print(f"\n[Step 2] Routing {args.trials} lone packets...")
        rows = []
        for variant in block.get("variants") or [scenario.network.variant]:
            s = scenario.with_value("network.variant", variant)
            stats = single_packet_hops(s, trials=args.trials)
            rows.append(stats)
            print(f"  {variant:<14} mean hops {stats['mean_hops']:.3f} "
                  f"(H_min={stats['h_min']}, {stats['at_h_min']}/{stats['delivered']} at H_min)")
        df = pd.DataFrame(rows)
    else:
        axis = block.get("axis", "network.n_hops")
        values = block.get("values", [scenario.network.n_hops])
        seeds = block.get("seeds") or [scenario.seed]
        print(f"\n[Step 2] Sweeping {axis} over {values}...")
        frames = [sweep(scenario.with_value("network.variant", v), axis, values, seeds,
                        workers=args.workers, timing=not args.no_timing)
                  for v in block.get("variants") or [scenario.network.variant]]
        df = pd.concat(frames, ignore_index=True)
        backlog = df.filter(like="qbar_").sum(axis=1)
        if axis == "network.n_hops" and len(values) >= 2:
            for variant, group in df.assign(total_backlog=backlog).groupby("policy"):
                means = group.groupby("axis_value")["total_backlog"].mean()
                if np.all(means.to_numpy() > 0):
                    exponent = backlog_growth_exponent(means.index.to_numpy(dtype=float), means.to_numpy())
                    print(f"  {variant:<14} backlog growth exponent {exponent:.3f}")

    path = write_results(df, args.output, args.format)
    print(f"\n✓ Results written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Delay-aware resource control simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config, output):
        p.add_argument("--config", "-c", default=config, help="scenario config JSON")
        p.add_argument("--seed", "-s", type=int, default=None, help=f"overrides {SEED_ENV_VAR} and the config")
        p.add_argument("--output", "-o", default=output, help="result file")
        p.add_argument("--format", choices=["csv", "json"], default="csv")
        p.add_argument("--trace", action="store_true", help="keep per-slot traces")
        p.add_argument("--workers", type=int, default=1, help="parallel runs for sweeps")
        p.add_argument("--no-timing", action="store_true", help="omit wall_ms for byte-comparable output")

    common(sub.add_parser("run", help="simulate one scenario"), "scenario_config.json", "results/run.csv")
    p = sub.add_parser("sweep", help="sweep one axis over values and seeds")
    common(p, "scenario_config.json", "results/sweep.csv")
    p.add_argument("--preset", choices=["power", "users", "learning"], default=None)
    p = sub.add_parser("oracle", help="exact MDP on a tiny instance")
    common(p, "oracle_config.json", "results/oracle.csv")
    p.add_argument("--slots", type=int, default=0, help="also simulate the greedy policy for this many slots")
    p.add_argument("--learn", type=int, default=0, help="also train both learning policies for this many slots")
    p = sub.add_parser("routing", help="multi-hop backpressure experiments")
    common(p, "routing_config.json", "results/routing.csv")
    p.add_argument("--single-packet", action="store_true", help="route lone packets instead of a load sweep")
    p.add_argument("--trials", type=int, default=100)
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "oracle": cmd_oracle, "routing": cmd_routing}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stdout, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SimulationError as e:
        print(f"\n✗ Error: {e}")
        return 1
    except KeyboardInterrupt:
        print("\n⚠ Interrupted.")
        return 130
    except Exception as e:
        print(f"\n✗ Unexpected error: {e}")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
