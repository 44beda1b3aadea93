"""Command-line interface.

Subcommands: scenario gen, episode run, bench, dataset gen, render,
weights check. Exit codes: 0 success, 1 usage error, 2 runtime failure.
Machine-readable outputs go to files named by --out/--svg/--log; tables
for humans go to stdout. All randomness is derived from --seed.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="safenav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scenario", help="scenario tools")
    sc_sub = sc.add_subparsers(dest="subcommand", required=True)
    sc_gen = sc_sub.add_parser("gen", help="generate a random scenario file")
    sc_gen.add_argument("--seed", type=int, required=True)
    sc_gen.add_argument("--layout", choices=["square", "line"], default="square")
    sc_gen.add_argument("--out", required=True, help="scenario JSON path")

    ep = sub.add_parser("episode", help="episode tools")
    ep_sub = ep.add_subparsers(dest="subcommand", required=True)
    ep_run = ep_sub.add_parser("run", help="run one closed-loop episode")
    ep_run.add_argument("--scenario", required=True, help="scenario JSON path")
    ep_run.add_argument("--planner", choices=["neural", "fallback"], default="fallback")
    ep_run.add_argument("--weights", help="weights file (required for --planner neural)")
    ep_run.add_argument("--controller", choices=["mdd1", "dcbf"], default="mdd1")
    ep_run.add_argument("--mode", choices=["paper", "consistent"], default="paper")
    ep_run.add_argument("--svg", help="write a trajectory SVG here")
    ep_run.add_argument("--log", help="write the per-step CSV log here")
    ep_run.add_argument("--out", help="write the full episode log JSON here")

    be = sub.add_parser("bench", help="benchmark over seeded scenarios")
    be.add_argument("--layout", choices=["square", "line"], default="square")
    be.add_argument("-n", type=int, default=20)
    be.add_argument("--controller", choices=["mdd1", "dcbf"], default="mdd1")
    be.add_argument("--planner", choices=["neural", "fallback"], default="fallback")
    be.add_argument("--weights")
    be.add_argument("--mode", choices=["paper", "consistent"], default="paper")
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--workers", type=int, default=1)
    be.add_argument("--out", help="machine-readable report JSON path")

    ds = sub.add_parser("dataset", help="dataset tools")
    ds_sub = ds.add_subparsers(dest="subcommand", required=True)
    ds_gen = ds_sub.add_parser("gen", help="export expert trajectories as JSON lines")
    ds_gen.add_argument("-n", type=int, required=True, help="number of scenarios to attempt")
    ds_gen.add_argument("--seed", type=int, default=0)
    ds_gen.add_argument("--layout", choices=["square", "line"], default="square")
    ds_gen.add_argument("--out", required=True)
    ds_gen.add_argument("--workers", type=int, default=1)

    rd = sub.add_parser("render", help="render an episode log to SVG")
    rd.add_argument("--scenario", required=True)
    rd.add_argument("--episode", required=True, help="episode log JSON (episode run --out)")
    rd.add_argument("--svg", required=True)

    wt = sub.add_parser("weights", help="weights-file tools")
    wt_sub = wt.add_subparsers(dest="subcommand", required=True)
    wt_check = wt_sub.add_parser("check", help="validate a weights file")
    wt_check.add_argument("path")
    return p


def _episode_settings(mode: str):
    from .controller import ConstraintMode, ControllerConfig
    from .sim import EpisodeSettings
    cmode = ConstraintMode.SQUARED if mode == "paper" else ConstraintMode.METRIC
    return EpisodeSettings(controller=ControllerConfig(constraint_mode=cmode))


def _load_scenario(path):
    from .sim import Scenario
    with open(path) as f:
        return Scenario.from_dict(json.load(f))


def _cmd_scenario_gen(args) -> int:
    from .sim import generate_scenario
    sc = generate_scenario(args.seed, args.layout)
    with open(args.out, "w") as f:
        json.dump(sc.to_dict(), f, sort_keys=True, indent=1)
    print(f"scenario seed={sc.seed} layout={sc.layout} obstacles={len(sc.obstacles)} -> {args.out}")
    return 0


def _cmd_episode_run(args) -> int:
    from .planner import read_weights
    from .sim import render_svg, run_episode
    sc = _load_scenario(args.scenario)
    weights = read_weights(args.weights) if args.weights else None
    if args.planner == "neural" and weights is None:
        print("error: --planner neural requires --weights", file=sys.stderr)
        return 1
    settings = _episode_settings(args.mode)
    log = run_episode(sc, args.planner, args.controller, settings, weights)
    steps = len(log.steps)
    ct = [r.controller_seconds for r in log.steps]
    pt = [r.planner_seconds for r in log.steps]
    print(f"outcome={log.outcome} steps={steps} min_distance={log.min_distance:.3f} "
          f"solver_failures={log.solver_failures}")
    if steps:
        print(f"planner median {1000*np.median(pt):.2f} ms, controller median "
              f"{1000*np.median(ct):.2f} ms per step")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(log.to_dict(), f)
        print(f"log json -> {args.out}")
    if args.log:
        log.to_csv(args.log)
        print(f"log csv -> {args.log}")
    if args.svg:
        render_svg(log, sc, args.svg)
        print(f"svg -> {args.svg}")
    return 0


def _cmd_bench(args) -> int:
    from .planner import read_weights
    from .sim import BenchVariant, run_benchmark
    weights = read_weights(args.weights) if args.weights else None
    if args.planner == "neural" and weights is None:
        print("error: --planner neural requires --weights", file=sys.stderr)
        return 1
    variant = BenchVariant(
        name=f"{args.planner}+{args.controller}",
        planner=args.planner, controller=args.controller,
        weights=weights, settings=_episode_settings(args.mode),
    )
    reports = run_benchmark(args.n, args.layout, [variant], args.seed, workers=args.workers)
    rep = reports[variant.name]
    print(f"{'variant':24s} {'success':>8s} {'planner':>10s} {'controller':>11s} {'max-step':>10s}")
    print(f"{rep.variant:24s} {rep.success_rate:8.2f} "
          f"{1000*rep.mean_planner_seconds:8.1f}ms {1000*rep.mean_controller_seconds:9.1f}ms "
          f"{1000*rep.mean_max_step_seconds:8.1f}ms")
    for row in rep.scenarios:
        print(f"  seed {row['seed']}: {row['outcome']:10s} steps={row['steps']:4d} "
              f"failures={row['solver_failures']}")
    if args.out:
        with open(args.out, "w") as f:
            f.write(rep.to_json())
        print(f"report -> {args.out}")
    return 0


def _cmd_dataset_gen(args) -> int:
    from .sim import export_dataset
    written = export_dataset(args.n, args.seed, args.out, layout=args.layout,
                             workers=args.workers)
    print(f"wrote {written} records ({args.n} attempted) -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    from .sim import EpisodeLog, render_svg
    sc = _load_scenario(args.scenario)
    with open(args.episode) as f:
        log = EpisodeLog.from_dict(json.load(f))
    render_svg(log, sc, args.svg)
    print(f"svg -> {args.svg}")
    return 0


def _cmd_weights_check(args) -> int:
    from .planner import WeightsError, read_weights
    try:
        w = read_weights(args.path)
    except (OSError, WeightsError) as exc:
        print(f"invalid weights file: {exc}", file=sys.stderr)
        return 2
    print(f"{'tensor':20s} {'shape':>14s} {'min':>12s} {'max':>12s}")
    for name, arr in w.tensors.items():
        print(f"{name:20s} {str(list(arr.shape)):>14s} {arr.min():12.4g} {arr.max():12.4g}")
    print(f"ok: {len(w.tensors)} tensors, format_version={w.format_version}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "scenario":
            return _cmd_scenario_gen(args)
        if args.command == "episode":
            return _cmd_episode_run(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "dataset":
            return _cmd_dataset_gen(args)
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "weights":
            return _cmd_weights_check(args)
        parser.error(f"unknown command {args.command!r}")
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure contract: diagnostic + exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
