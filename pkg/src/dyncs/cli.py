"""Command-line entry point.

Subcommands: ``simulate``, ``deconvolve``, ``baseline``, ``metrics`` and
``bound-check``. Exit status is 0 on success, 2 for invalid input and 3 for
I/O failures. ``DYNCS_WORKERS`` sets the number of worker processes.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from dyncs import harness
from dyncs.solver import SolverConfig

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3


def _parse_range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP, got {text!r}") from None


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per `SolverConfig` field, plus ``--config`` for a JSON file."""
    g = parser.add_argument_group("solver")
    g.add_argument("--config", help="JSON file with SolverConfig keys")
    for f in dataclasses.fields(SolverConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "estimate_theta":
            g.add_argument(flag, dest=f.name, default=None,
                           action=argparse.BooleanOptionalAction)
        elif f.name == "noise_scaling":
            g.add_argument(flag, dest=f.name, choices=["measurement", "literal"])
        elif f.name in ("outer_iters", "inner_iters", "startup_iters"):
            g.add_argument(flag, dest=f.name, type=int)
        else:
            g.add_argument(flag, dest=f.name, type=float)


def _solver_config(args: argparse.Namespace) -> SolverConfig:
    data = harness.load_json(args.config) if args.config else {}
    for f in dataclasses.fields(SolverConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return SolverConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dyncs", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write simulated grid cells")
    sim.add_argument("--experiment", help="JSON file with ExperimentSpec keys")
    sim.add_argument("--seeds", type=_ints)
    sim.add_argument("--snr", type=_floats, help="comma-separated SNR levels in dB")
    sim.add_argument("--compression", type=_floats, help="comma-separated levels 1 - n/p")
    sim.add_argument("--p", type=int)
    sim.add_argument("--T", type=int)
    sim.add_argument("--snr-reference", choices=["cell", "full"])
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--evaluate", action="store_true",
                     help="also solve every cell and write metrics.csv")
    _add_solver_flags(sim)

    dec = sub.add_parser("deconvolve", help="deconvolve a cell directory or trace CSV")
    dec.add_argument("input")
    dec.add_argument("--out", required=True)
    dec.add_argument("--sigma2", type=float, help="noise variance (default: estimate)")
    dec.add_argument("--inactive", type=_parse_range, help="START:STOP without activity")
    dec.add_argument("--sparsity", type=int, default=1, help="events per sample for the rate rule")
    dec.add_argument("--observed-fraction", type=float, default=1.0,
                     help="n/p for compressive mode; 1 observes every coordinate")
    dec.add_argument("--rate", type=float, default=30.0, help="sampling rate in Hz")
    dec.add_argument("--seed", type=int, default=0)
    dec.add_argument("--level", type=float, default=0.90)
    _add_solver_flags(dec)

    bp = sub.add_parser("baseline", help="per-step basis pursuit on a cell")
    bp.add_argument("cell")
    bp.add_argument("--out", required=True)
    bp.add_argument("--lambda-scale", type=float, default=1.0)

    met = sub.add_parser("metrics", help="score a result directory against a cell")
    met.add_argument("cell")
    met.add_argument("result")
    met.add_argument("--out", required=True)
    met.add_argument("--method", default="dynamic")

    bc = sub.add_parser("bound-check", help="validate the stability bound on toy instances")
    bc.add_argument("--trials", type=int, default=100)
    bc.add_argument("--p", type=int, default=40)
    bc.add_argument("--T", type=int, default=10)
    bc.add_argument("--s", type=int, default=2)
    bc.add_argument("--rows", type=int, default=8000, help="rows per time step")
    bc.add_argument("--theta", type=float, default=0.95)
    bc.add_argument("--sigma2", type=float, default=1e-4)
    bc.add_argument("--seed", type=int, default=0)
    bc.add_argument("--out", required=True)
    return ap


def _cmd_simulate(args) -> int:
    data = harness.load_json(args.experiment) if args.experiment else {}
    overrides = {"seeds": args.seeds, "snr_db": args.snr, "compression": args.compression,
                 "p": args.p, "T": args.T, "snr_reference": args.snr_reference,
                 "out_dir": args.out}
    data.update({k: v for k, v in overrides.items() if v is not None})
    solver = _solver_config(args)
    if solver != SolverConfig() or "solver" not in data:
        data["solver"] = dataclasses.asdict(solver)
    spec = harness.ExperimentSpec.from_dict(data)
    dirs = harness.cmd_simulate(spec)
    print(f"wrote {len(dirs)} cells to {spec.out_dir}")
    if args.evaluate:
        rows = harness.run_sweep(spec)
        path = Path(spec.out_dir) / "metrics.csv"
        harness.write_metrics_csv(path, rows)
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_deconvolve(args) -> int:
    out = harness.cmd_deconvolve(
        args.input, _solver_config(args), args.out, sigma2=args.sigma2,
        inactive=args.inactive, sparsity=args.sparsity,
        observed_fraction=args.observed_fraction, rate_hz=args.rate, seed=args.seed,
        level=args.level)
    r = out.result
    print(f"theta={r.theta:.6g} iterations={r.iterations} converged={r.converged} "
          f"spikes={len(out.spikes)}")
    return EXIT_OK


def _cmd_baseline(args) -> int:
    harness.cmd_baseline(args.cell, args.out, lam_scale=args.lambda_scale)
    print(f"wrote {Path(args.out) / 'states.csv'}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    row = harness.cmd_metrics(args.cell, args.result, args.out, method=args.method)
    print(f"l2_error={row['l2_error']:.6g} f1={row['f1']:.4g}")
    return EXIT_OK


def _cmd_bound_check(args) -> int:
    rows = []
    for k in range(args.trials):
        r = harness.bound_trial(args.p, args.T, args.s, [args.rows] * args.T, args.theta,
                                args.sigma2, seed=args.seed + k)
        rows.append(dict(r, method="dynamic", snr_db="", compression=""))
    harness.write_metrics_csv(args.out, rows)
    held = sum(r["bound_holds"] for r in rows)
    print(f"bound held in {held}/{len(rows)} trials")
    return EXIT_OK


COMMANDS = {
    "simulate": _cmd_simulate,
    "deconvolve": _cmd_deconvolve,
    "baseline": _cmd_baseline,
    "metrics": _cmd_metrics,
    "bound-check": _cmd_bound_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (OSError, EOFError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
