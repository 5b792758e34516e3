"""``srba-bench``: sweeps, verification, lower-bound certificates, plot data.

Exit codes: 0 ok, 2 configuration error, 3 verification failure,
4 every run in a sweep diverged.
"""

from __future__ import annotations

import argparse
import glob
import math
import sys
from pathlib import Path

from .errors import ConfigurationError, SrbaError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_DIVERGED = 4


def _positive_int(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srba-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a TOML-configured sweep")
    run.add_argument("config")
    run.add_argument("--jobs", type=_positive_int, default=1)
    run.add_argument("--out", default=None, help="output directory (overrides [run].out)")

    ver = sub.add_parser("verify", help="run the verification suites")
    ver.add_argument("--filter", default=None, help="only suites whose name contains this")
    ver.add_argument("--json", default=None, help="also write the results as JSON")
    ver.add_argument("--inject-fault", choices=["hvp"], default=None,
                     help="perturb the Hessian-vector oracle (the suites must then fail)")

    lb = sub.add_parser("lowerbound", help="certify a solver run on the worst-case instance")
    lb.add_argument("--m", type=_positive_int, required=True)
    lb.add_argument("--chain", type=_positive_int, default=None, help="chain length T")
    lb.add_argument("--eps", type=float, required=True)
    lb.add_argument("--delta", type=float, default=None,
                    help="initial gap; the chain length is then derived from it")
    lb.add_argument("--n", type=_positive_int, default=1)
    lb.add_argument("--solver", choices=["srba", "fullbatch_gd", "soba"], default="srba")
    lb.add_argument("--rho", type=float, default=0.5)
    lb.add_argument("--gamma", type=float, default=0.5)
    lb.add_argument("--q", type=_positive_int, default=4)
    lb.add_argument("--iters", type=_positive_int, default=None,
                    help="outer iterations (default: enough to pass the iteration floor)")
    lb.add_argument("--seed", type=int, default=0)
    lb.add_argument("--out", default=None, help="certificate JSON path (default: stdout)")

    pd = sub.add_parser("plotdata", help="median and 20/80 percentile bands across runs")
    pd.add_argument("--glob", required=True, dest="pattern")
    pd.add_argument("--metric", default="subopt")
    pd.add_argument("--x", default="oracle_calls", choices=["iterations", "oracle_calls", "wall_ms"])
    pd.add_argument("--out", default=None)
    return parser


def cmd_run(args) -> int:
    from .bench import load_config, run_sweep

    cfg = load_config(args.config)
    manifest = run_sweep(cfg, args.out, args.jobs)
    n_ok = sum(e["status"] == "ok" for e in manifest["runs"])
    out = args.out if args.out is not None else cfg.out
    print(f"{len(manifest['runs'])} runs ({n_ok} ok) written to {out}")
    return manifest["exit_code"]


def cmd_verify(args) -> int:
    from .suites import PerturbedHvp, checks_to_json, format_table, run_suites
    from .problems import make_quadratic

    if args.inject_fault == "hvp":
        def factory(*a):
            return PerturbedHvp(make_quadratic(*a), 1e-3)
        checks = run_suites(args.filter, factory)
    else:
        checks = run_suites(args.filter)
    print(format_table(checks))
    if args.json:
        Path(args.json).write_text(checks_to_json(checks) + "\n", encoding="utf-8")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


def cmd_lowerbound(args) -> int:
    from .baselines import fullbatch_gd_run, soba_run
    from .lower_bound import certify_run, make_worstcase, make_worstcase_for_chain
    from .solver import SrbaConfig, srba_run

    if args.delta is not None:
        inst = make_worstcase(args.m, args.n, args.eps, args.delta, seed=args.seed)
    else:
        if args.chain is None:
            raise ConfigurationError("give --chain or --delta")
        inst = make_worstcase_for_chain(args.m, args.n, args.chain, args.eps, seed=args.seed)
    q = args.q if args.solver == "srba" else 1
    iters = args.iters or math.ceil((inst.iteration_floor() + 1) / q) + 1
    config = SrbaConfig(rho=args.rho, gamma=args.gamma, q=q, T=iters, R=math.inf,
                        seed=args.seed, record_iterates=True, timing=False)
    solver = {"srba": srba_run, "fullbatch_gd": fullbatch_gd_run, "soba": soba_run}[args.solver]
    cert = certify_run(inst, solver(inst.problem, config))
    text = cert.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"certificate {'passed' if cert.passed else 'FAILED'}: {args.out}")
    else:
        print(text)
    return EXIT_OK if cert.passed else EXIT_VERIFY


def cmd_plotdata(args) -> int:
    from .io import aggregate, aggregate_to_csv, read_trace_csv

    paths = sorted(glob.glob(args.pattern))
    if not paths:
        raise ConfigurationError(f"no trace files match {args.pattern!r}")
    runs = [read_trace_csv(p) for p in paths]
    text = aggregate_to_csv(aggregate(runs, args.metric, args.x), args.x)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "lowerbound": cmd_lowerbound,
            "plotdata": cmd_plotdata}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SrbaError as exc:
        # bad configs, inadmissible parameters and unreadable data all land here
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
