"""Command-line entry points: simulate, oracle, calibrate."""

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .experiment import calibrate_policy, run_experiment, emit_plots, _env_spec, _fmt
from .mdp import near_optimality_report
from .simulator import PolicyContractError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mecoffload",
        description="Cascade-queue computation offloading experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the configured sweep")
    sim.add_argument("--config", required=True, help="experiment config file")
    sim.add_argument("--out", help="output directory override")
    sim.add_argument("--workers", type=int, default=1, help="parallel sweep jobs")
    sim.add_argument("--seed", type=int, help="base seed override")
    sim.add_argument("--plots", action="store_true", help="emit SVG charts")

    orc = sub.add_parser("oracle", help="brute-force optimality comparison")
    orc.add_argument("--config", required=True, help="config supplying system parameters")
    orc.add_argument("--out", help="output directory override")

    cal = sub.add_parser("calibrate", help="tune one policy to a power budget")
    cal.add_argument("--policy", required=True,
                     help="proposed | gt | cowf | qwwf | lodco | tso")
    cal.add_argument("--power", type=float, required=True, help="budget in watts")
    cal.add_argument("--config", help="optional config for system parameters")
    return parser


def _cmd_simulate(args) -> int:
    cfg = parse_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.base_seed = args.seed
    outputs = run_experiment(cfg, workers=args.workers, plots=args.plots)
    for kind, path in sorted(outputs.items()):
        print(f"{kind}: {path}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = near_optimality_report(cfg.params)
    mdp, rvi = report["mdp"], report["rvi"]
    solution_path = out / "oracle_solution.csv"
    with open(solution_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["q_local", "q_remote", "h_level", "value", "p_local", "p_tx"])
        for ql in range(mdp.n_q):
            for qr in range(mdp.n_q):
                for h in range(mdp.n_levels):
                    s = mdp.state_index(ql, qr, h)
                    action = mdp.actions[rvi.policy[s]]
                    writer.writerow([_fmt(ql * mdp.queue_step), _fmt(qr * mdp.queue_step),
                                     h, _fmt(float(rvi.values[s])),
                                     _fmt(action[0]), _fmt(action[1])])
    summary_path = out / "oracle_summary.csv"
    with open(summary_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        keys = ["theta_optimal", "theta_policy", "relative_gap", "sweeps",
                "boundary_mass_optimal", "boundary_mass_policy",
                "fixed_point_eps", "fixed_point_delta"]
        writer.writerow(keys)
        writer.writerow([_fmt(report[k]) for k in keys])
    print(f"optimal average cost: {report['theta_optimal']:.6g}")
    print(f"closed-form policy:  {report['theta_policy']:.6g}")
    print(f"relative gap:        {report['relative_gap'] * 100:.2f}%")
    if report["boundary_mass_optimal"] >= 0.01:
        print(f"warning: boundary mass {report['boundary_mass_optimal']:.3g} >= 1%; "
              "enlarge q_max for trustworthy results")
    print(f"solution: {solution_path}")
    print(f"summary:  {summary_path}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    if args.config:
        cfg = parse_config(args.config)
    else:
        from .config import ExperimentConfig
        from .params import sufficient_preset
        cfg = ExperimentConfig(params=sufficient_preset())
    spec = _env_spec(cfg, cfg.params)
    result = calibrate_policy(args.policy, cfg.params, spec, args.power,
                              runs=cfg.runs, horizon=cfg.horizon,
                              base_seed=cfg.base_seed, warmup=cfg.warmup,
                              calibration_runs=cfg.calibration_runs,
                              window=cfg.window)
    print(f"policy:         {result.policy}")
    print(f"knob:           {result.knob:.6g}")
    print(f"achieved power: {result.achieved_power:.6g} W "
          f"(target {args.power:.6g} W)")
    print(f"within 2%:      {'yes' if result.within_budget else 'no'}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PolicyContractError as exc:
        print(f"runtime contract violation: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    parser.error(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
