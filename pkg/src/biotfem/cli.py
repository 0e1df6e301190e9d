"""Command-line front end.

Subcommands: ``converge`` (manufactured-solution convergence study),
``precond`` (MinRes iteration-count study), ``check`` (structural
diagnostic suite), ``solve`` (single transient run).

Exit codes: 0 success, 1 assertion failure (rates or robustness trends),
2 solver failure, 64 configuration or usage error.  Options may also be
given in a TOML file (flat keys named like the flags); command-line flags
override file values.  ``BIOTFEM_OUTDIR`` sets the default output
directory for CSV files.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .driver import (
    build_problem,
    compute_errors,
    convergence_study,
    infsup_diagnostic,
    manufactured_solution,
    preconditioning_study,
    run_transient,
    structural_diagnostics,
    ErrorTable,
)
from .errors import ConfigurationError
from .forms import ModelParams
from .solver import NotConvergedError, SolverError

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_SOLVER = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text):
    if isinstance(text, list):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v]


def _float_list(text):
    if isinstance(text, list):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v]


def _add_param_flags(p, scalar_beta=False, scalar_nu=False):
    p.add_argument("--E", type=float, default=1.0, help="Young modulus")
    p.add_argument("--alpha", type=float, default=1.0, help="coupling coefficient")
    p.add_argument("--s0", type=float, default=0.0, help="constrained specific storage")
    p.add_argument("--kappa", type=float, default=1.0, help="hydraulic conductivity (scalar)")
    p.add_argument("--gamma", type=float, default=10.0, help="penalty strength")
    p.add_argument("--C1", type=float, default=1.0, help="stabilization weight")
    p.add_argument("--T", type=float, default=1.0, help="final time")
    p.add_argument("--rtol", type=float, default=1e-8, help="MinRes relative tolerance")
    p.add_argument("--maxit", type=int, default=1000, help="MinRes iteration limit")
    p.add_argument("--gamma-d", default="x=0", dest="gamma_d",
                   help="displacement Dirichlet region (x=0|x=1|y=0|y=1|all, comma-joined)")
    p.add_argument("--gamma-p", default="all", dest="gamma_p",
                   help="pressure Dirichlet region")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized diagnostics")
    p.add_argument("--out", default=None, help="output CSV path")
    p.add_argument("--config", default=None, help="TOML file with flat option keys")
    if scalar_beta:
        p.add_argument("--beta", type=int, default=1, help="interior penalty exponent")
    if scalar_nu:
        p.add_argument("--nu", type=float, default=0.3, help="Poisson ratio")


def build_parser():
    parser = _Parser(prog="biotfem", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("converge", help="convergence study (errors and rates)")
    p.add_argument("--N", type=_int_list, default=[8, 16, 32, 64], help="mesh sizes")
    p.add_argument("--beta", type=_int_list, default=[1], help="penalty exponents")
    p.add_argument("--nu", type=_float_list, default=[0.3], help="Poisson ratios")
    _add_param_flags(p)

    p = sub.add_parser("precond", help="preconditioned MinRes iteration counts")
    p.add_argument("--N", type=_int_list, default=[8, 16, 32, 64])
    p.add_argument("--beta", type=_int_list, default=[0, 1, 2])
    p.add_argument("--nu", type=_float_list, default=[0.3, 0.499])
    p.add_argument("--dt", type=_float_list, default=[1e-1, 1e-2, 1e-3])
    p.add_argument("--steps", type=int, default=10, help="steps per configuration")
    _add_param_flags(p)

    p = sub.add_parser("check", help="structural diagnostics on a small mesh")
    p.add_argument("--N", type=int, default=4)
    p.add_argument("--dt", type=float, default=0.1)
    _add_param_flags(p, scalar_beta=True, scalar_nu=True)

    p = sub.add_parser("solve", help="single transient manufactured-solution run")
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--dt", type=float, default=0.125)
    _add_param_flags(p, scalar_beta=True, scalar_nu=True)

    return parser


def _apply_config_file(parser, argv):
    """Load TOML defaults for the chosen subcommand; flags still override."""
    if "--config" not in argv:
        return argv
    path = argv[argv.index("--config") + 1]
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    # find the subparser that is actually in use
    command = next((a for a in argv if not a.startswith("-")), None)
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            sub = action.choices[command]
            valid = {a.dest for a in sub._actions}
            unknown = set(data) - valid
            if unknown:
                raise ConfigurationError(
                    f"unknown configuration keys: {sorted(unknown)}"
                )
            converted = {}
            for key, val in data.items():
                for a in sub._actions:
                    if a.dest == key and a.type is not None:
                        val = a.type(val)
                        break
                converted[key] = val
            sub.set_defaults(**converted)
            return argv
    return argv


def _params_from_args(args, beta, nu, dt):
    return ModelParams(
        nu=nu, E=args.E, alpha=args.alpha, s0=args.s0, kappa=args.kappa,
        gamma=args.gamma, beta=beta, C1=args.C1, dt=dt, T=args.T,
    )


def _out_path(args, default_name):
    if args.out:
        return args.out
    outdir = os.environ.get("BIOTFEM_OUTDIR", ".")
    return os.path.join(outdir, default_name)


def cmd_converge(args):
    base = _params_from_args(args, args.beta[0], args.nu[0], 1.0 / max(args.N))
    table = convergence_study(
        base, args.N, args.beta, args.nu,
        gamma_d=args.gamma_d, gamma_p=args.gamma_p,
        rtol=args.rtol, maxit=args.maxit,
    )
    path = _out_path(args, "convergence.csv")
    with open(path, "w") as fh:
        table.to_csv(fh)
    print(f"wrote {path} ({len(table.rows)} rows)")
    violations = table.rate_violations()
    for v in violations:
        print(f"rate violation: {v}")
    return EXIT_ASSERTION if violations else EXIT_OK


def cmd_precond(args):
    base = _params_from_args(args, args.beta[0], args.nu[0], args.dt[0])
    table = preconditioning_study(
        base, args.N, args.beta, args.nu, args.dt,
        gamma_d=args.gamma_d, gamma_p=args.gamma_p,
        rtol=args.rtol, maxit=args.maxit, steps=args.steps,
    )
    path = _out_path(args, "preconditioning.csv")
    with open(path, "w") as fh:
        table.to_csv(fh)
    print(f"wrote {path} ({len(table.rows)} rows)")
    if any(not r["converged"] for r in table.rows):
        for r in table.rows:
            if not r["converged"]:
                print(f"solver failure: beta={r['beta']} dt={r['dt']} nu={r['nu']} N={r['N']}")
        return EXIT_SOLVER
    violations = table.trend_violations()
    for v in violations:
        print(f"trend violation: {v}")
    return EXIT_ASSERTION if violations else EXIT_OK


def cmd_check(args):
    params = _params_from_args(args, args.beta, args.nu, args.dt)
    problem = build_problem(params, args.N, args.gamma_d, args.gamma_p)
    report = structural_diagnostics(problem, seed=args.seed)
    print(report.format())
    if args.N <= 8:
        bound = infsup_diagnostic(problem)
        ok = bound >= 0.05
        print(f"{'pass' if ok else 'FAIL'}  {'inf-sup lower bound':28s} worst {bound:.3e} (limit >= 0.05)")
    else:
        ok = True
    if report.all_passed and ok:
        print("all checks passed")
        return EXIT_OK
    print("failures: " + ", ".join(report.failures() + ([] if ok else ["inf-sup lower bound"])))
    return EXIT_ASSERTION


def cmd_solve(args):
    params = _params_from_args(args, args.beta, args.nu, args.dt)
    problem = build_problem(params, args.N, args.gamma_d, args.gamma_p)
    exact = manufactured_solution(params)
    state, reports = run_transient(problem, exact, rtol=args.rtol, maxit=args.maxit)
    for k, rep in enumerate(reports):
        print(f"step {k + 1}: {rep.iterations} iterations, "
              f"relative residual {rep.rel_residual:.3e}")
    err = compute_errors(problem, state, exact)
    names = ("u energy", "u H1", "u L2", "p H1", "p L2")
    for name, value in zip(names, err.as_tuple()):
        print(f"relative error {name:9s}: {value:.5e}")
    if args.out:
        table = ErrorTable()
        table.add(params.beta, params.nu, args.N, params.dt, err.as_tuple(), (None,) * 5)
        with open(args.out, "w") as fh:
            table.to_csv(fh)
        print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    handlers = {
        "converge": cmd_converge,
        "precond": cmd_precond,
        "check": cmd_check,
        "solve": cmd_solve,
    }
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotConvergedError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
