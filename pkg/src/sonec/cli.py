"""Command-line entry point: ``sonec {simulate,crb,bound,predict,validate-moments}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, parse_config
from .crb import NonIdentifiableError
from .harness import (
    AllRunsDivergedError,
    compute_crb,
    config_bound,
    dump_trajectory,
    experiment_topology,
    format_csv,
    run_experiment,
    run_seed,
    write_csv,
)
from .signal_model import generate_dataset
from .topology import uniform_weights

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' config file")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--runs", type=_positive, help="Monte Carlo runs (overrides the config)")
    common.add_argument("--out", type=Path, help="output CSV path (default: stdout)")
    common.add_argument("--threads", type=_positive, default=1, help="worker processes (default 1)")

    parser = argparse.ArgumentParser(prog="sonec", description="Diffusion LMS under sensor nonlinearity.")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="run the Monte Carlo experiment, write MSD traces")
    sim.add_argument("--trajectory-out", type=Path, help="also dump run 0 of one algorithm to this CSV")
    sim.add_argument("--trajectory-algorithm", default="sonec_fd", help="algorithm for --trajectory-out")
    sub.add_parser("crb", parents=[common], help="run-averaged Cramer-Rao bounds in dB")
    sub.add_parser("bound", parents=[common], help="evaluate the nonlinearity error bound")
    pred = sub.add_parser("predict", parents=[common], help="mean-convergence recursion to CSV")
    pred.add_argument("--case", choices=("special", "general"), default="general")
    pred.add_argument("--steps", type=_positive, help="iterations to predict (default: n_iters)")
    val = sub.add_parser("validate-moments", parents=[common], help="Monte Carlo checks of the moment formulas")
    val.add_argument("--samples", type=_positive, default=1_000_000)
    return parser


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {out}: {exc.strerror}") from None


def _cmd_simulate(args, config) -> int:
    result = run_experiment(config, threads=args.threads)
    if args.out is None:
        sys.stdout.write(format_csv(result.trace))
    else:
        write_csv(result.trace, args.out)
    if args.trajectory_out is not None:
        if args.trajectory_algorithm not in config.algorithms:
            raise ConfigError(f"--trajectory-algorithm {args.trajectory_algorithm!r} is not among the configured algorithms")
        dump_trajectory(config, args.trajectory_algorithm, 0, args.trajectory_out)
    trace, diag = result.trace, result.diagnostics
    for name in config.algorithms:
        line = f"{name}: steady-state MSD {trace.steady_state(name):.2f} dB"
        if name in trace.msd_b:
            line += f", b-MSD {trace.steady_state(name, kind='b'):.2f} dB"
        line += f", divergent runs {diag.divergent_runs(name)}/{config.n_runs}, clamped roots {diag.clamped[name]}"
        print(line, file=sys.stderr)
    for d in diag.divergences[:10]:
        print(f"diverged: {d.algorithm} run {d.run} seed {d.seed} at iteration {d.iteration}", file=sys.stderr)
    for run, seed, msg in diag.crb_failures[:10]:
        print(f"crb skipped: run {run} seed {seed}: {msg}", file=sys.stderr)
    return EXIT_OK


def _cmd_crb(args, config) -> int:
    crb_w, crb_b, failures = compute_crb(config)
    for run, seed, msg in failures:
        print(f"crb skipped: run {run} seed {seed}: {msg}", file=sys.stderr)
    _emit(f"crb_omega_db,crb_b_db\n{crb_w:.6g},{crb_b:.6g}\n", args.out)
    return EXIT_OK


def _cmd_bound(args, config) -> int:
    c1, db = config_bound(config)
    _emit(f"c1_max,upper_bound_db\n{c1:.6g},{db:.6g}\n", args.out)
    return EXIT_OK


def _cmd_predict(args, config) -> int:
    weights = uniform_weights(experiment_topology(config))
    ds = generate_dataset(config.replace(n_iters=1, pilot_len=1), run_seed(config, 0))
    omega_o, b = ds.truth.omega_o, ds.truth.b
    initial = np.tile(-omega_o, (config.n_nodes, 1))  # estimates start at zero
    steps = args.steps or config.n_iters
    s2u = config.sigma_u**2
    if args.case == "special":
        traj = analysis.mean_recursion_special(weights, config.mu, s2u, initial, steps)
    else:
        traj = analysis.mean_recursion_general(
            weights, config.mu, s2u, b, omega_o, initial, steps, sigma_v2=config.sigma_v**2
        )
    bound = analysis.bound_db(analysis.BoundInputs(config.mu, config.b_max, config.L, float(np.linalg.norm(omega_o))))
    _emit(analysis.format_recursion_csv(traj, bound), args.out)
    if traj.divergent:
        print(f"warning: recursion is divergent (spectral radius {traj.rho:.6g})", file=sys.stderr)
    return EXIT_OK


def _cmd_validate(args, config) -> int:
    rows = analysis.validate_moments(args.samples, seed=config.master_seed)
    text = "check,component,closed_form,monte_carlo,std_error,z,status\n"
    text += "".join(
        f"{r.check},{r.component},{r.closed_form:.6g},{r.monte_carlo:.6g},{r.std_error:.3g},{r.z:.3g},{r.status}\n"
        for r in rows
    )
    _emit(text, args.out)
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "crb": _cmd_crb,
    "bound": _cmd_bound,
    "predict": _cmd_predict,
    "validate-moments": _cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config, master_seed=args.seed, n_runs=args.runs)
        return _COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllRunsDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonIdentifiableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
