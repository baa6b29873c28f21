"""Command-line entry point: ``aggpace {solve,run,sweep,presets}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .model import FEASIBILITY_MARGIN
from .pf_solver import KktViolationError, Regime, brute_force_oracle, solve_fixed_point, verify_kkt
from .scenario import (
    PRESETS,
    ScenarioError,
    SweepError,
    load_scenario,
    output_dir,
    preset,
    preset_doc,
    sweep,
    sweep_to_csv,
    run,
    write_atomic,
)

EXIT_OK = 0
EXIT_BAD_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_KKT_REJECTED = 3


def _add_source(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="scenario JSON file")
    src.add_argument("--preset", help="built-in scenario name (see `presets list`)")


def _load(args):
    sc = load_scenario(args.config) if args.config else preset(args.preset)
    if getattr(args, "seed", None) is not None:
        sc = replace(sc, seed=args.seed)
    return sc


def cmd_solve(args) -> int:
    sc = _load(args)
    cfg, q = sc.model, sc.targets
    sol = solve_fixed_point(cfg, q)
    out = {"scenario": sc.name, "solution": sol.to_dict(cfg)}
    code = EXIT_OK
    if sol.regime is Regime.DELAY_INFEASIBLE:
        out["certificate"] = None
        code = EXIT_INFEASIBLE
    else:
        try:
            cert = verify_kkt(sol, cfg, q)
            out["certificate"] = cert.to_dict()
            if not cert.accepted:
                code = EXIT_KKT_REJECTED
        except KktViolationError as err:
            out["certificate"] = {"accepted": False, "violated": err.violated}
            code = EXIT_KKT_REJECTED
    if args.oracle:
        if cfg.n > 3:
            out["oracle"] = {"error": f"oracle supports n <= 3, scenario has n={cfg.n}"}
        elif 1.0 - cfg.c / q.t_bar <= FEASIBILITY_MARGIN:
            out["oracle"] = {"error": "delay target below overhead"}
        else:
            xo = brute_force_oracle(cfg, q)
            out["oracle"] = {
                "x_pps": xo.tolist(),
                "objective": float(np.sum(np.log(xo))),
                "objective_gap": float(np.sum(np.log(xo)) - sol.objective()),
                "max_rel_diff": float(np.max(np.abs(sol.x_star / xo - 1.0))),
            }
    print(json.dumps(out, indent=2))
    return code


def cmd_run(args) -> int:
    sc = _load(args)
    res = run(sc)
    out = output_dir(args.out)
    write_atomic(out / f"{sc.name}.csv", res.to_csv())
    summary = {"scenario": sc.name, "seed": sc.seed, "slots": sc.duration_slots, "metrics": res.metrics.to_dict()}
    write_atomic(out / f"{sc.name}.metrics.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _axis_value(axis, v: float):
    # t_bar is given in ms on the command line, like in scenario files
    return v * 1e-3 if axis == "t_bar" else v


def cmd_sweep(args) -> int:
    sc = _load(args)
    axis, values = args.axis, args.values
    if args.preset and (axis is None or values is None):
        default = preset_doc(args.preset).get("sweep", {})
        axis = axis or default.get("axis")
        values = values or default.get("values")
    if axis is None or not values:
        print("sweep needs --axis and --values", file=sys.stderr)
        return EXIT_BAD_CONFIG
    rows = sweep(sc, axis, [_axis_value(axis, v) for v in values], jobs=args.jobs)
    text = sweep_to_csv(rows, axis)
    write_atomic(output_dir(args.out) / f"{sc.name}.sweep_{axis}.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in sorted(PRESETS):
            print(f"{name:14s} {PRESETS[name]['description']}")
    else:
        print(json.dumps(preset_doc(args.name), indent=2))
    return EXIT_OK


def _values(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggpace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="print the proportional-fair allocation and its KKT certificate")
    _add_source(p)
    p.add_argument("--oracle", action="store_true", help="cross-check against the brute-force oracle (n <= 3)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("run", help="run one scenario and write CSV + metrics")
    _add_source(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default $AGGPACE_OUT or ./runs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario across values of one parameter")
    _add_source(p)
    p.add_argument("--axis", choices=["t_bar", "n", "mcs", "k1", "k2"])
    p.add_argument("--values", type=_values, help="comma-separated values (t_bar in ms)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("presets", help="list or show built-in scenarios")
    psub = p.add_subparsers(dest="action", required=True)
    psub.add_parser("list")
    show = psub.add_parser("show")
    show.add_argument("name")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, SweepError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
