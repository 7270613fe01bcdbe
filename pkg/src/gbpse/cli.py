"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import GbpEngine, Schedule, UnobservableVariable
from .factor_graph import IsolatedVariable, build_graph
from .harness import (
    ConfigError, RunConfig, data_path, fmt, monte_carlo, states_csv, sweep_q, trace_csv,
)
from .measurements import MeasurementError, StateVector, generate_measurements, load_devices
from .messages import DampingConfig, ExactConflict
from .network import CaseError, build_admittance, load_case
from .wls import RankDeficient, assemble, gauss_newton, optimality_residual

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _problem(args):
    case = load_case(data_path(args.case))
    adm = build_admittance(case)
    devices = load_devices(data_path(args.devices), case)
    ms = generate_measurements(case, devices, args.sigma2, args.seed, adm, args.noise_scale)
    return case, adm, ms


def _add_problem_args(p):
    p.add_argument("case", help="case file (JSON); bundled fixtures resolve by name")
    p.add_argument("devices", help="device list (JSON)")
    p.add_argument("--sigma2", type=float, default=1e-8, help="measurement variance [p.u.^2]")
    p.add_argument("--seed", type=int, default=0, help="measurement noise seed")
    p.add_argument("--noise-scale", type=float, default=1.0,
                   help="multiplier on the noise draw (0 gives exact measurements)")


def cmd_estimate(args):
    case, adm, ms = _problem(args)
    engine = GbpEngine(build_graph(case, ms, adm), case, adm)
    schedule = Schedule(args.q, args.nu_max, args.tol)
    damping = None if args.no_damping else DampingConfig(args.p, args.alpha, args.damping_seed)
    trace = engine.run(StateVector.flat(case.n_bus), schedule, damping,
                       warm_start=args.warm_start)
    ref = gauss_newton(case, ms, tol=1e-12, max_iter=50, adm=adm)
    if ref.converged:
        trace = trace.with_rmse(ref.state)
    sys.stdout.write(trace_csv(trace))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(trace_csv(trace))
        (out / "states.csv").write_text(states_csv(trace))
    return EXIT_OK


def cmd_wls(args):
    case, adm, ms = _problem(args)
    sol = gauss_newton(case, ms, tol=args.tol, max_iter=args.max_iter, adm=adm)
    resid = optimality_residual(assemble(case, ms, sol.state, adm))
    rows = [("iterations", str(sol.iterations)), ("converged", str(sol.converged).lower()),
            ("final_max_increment", fmt(sol.final_max_increment)),
            ("optimality_residual", fmt(resid))]
    rows += [(f"theta_{i + 1}", fmt(v)) for i, v in enumerate(sol.state.theta)]
    rows += [(f"v_{i + 1}", fmt(v)) for i, v in enumerate(sol.state.v)]
    sys.stdout.write("quantity,value\n" + "".join(f"{k},{v}\n" for k, v in rows))
    return EXIT_OK if sol.converged else EXIT_NUMERICAL


def _load_config(args):
    cfg = RunConfig.load(args.config)
    overrides = {k: getattr(args, k) for k in ("workers", "trials", "output_dir")
                 if getattr(args, k, None) is not None}
    if getattr(args, "q_values", None):
        overrides["q_values"] = tuple(args.q_values)
    if overrides:
        cfg = RunConfig(**{**cfg.to_dict(), **overrides})
    load_case(data_path(cfg.case))
    return cfg


def cmd_montecarlo(args):
    cfg = _load_config(args)
    res = monte_carlo(cfg)
    print(f"wrote {res.output_dir}/summary.csv ({len(res.records)} records, "
          f"{len(res.anomalies)} anomalies)")
    return EXIT_OK


def cmd_sweep_q(args):
    cfg = _load_config(args)
    res = sweep_q(cfg, args.sigma_index)
    print(f"wrote {res.output_dir}/sweep_q.csv ({len(res.anomalies)} anomalies)")
    return EXIT_OK


def cmd_graph_dump(args):
    case = load_case(data_path(args.case))
    adm = build_admittance(case)
    devices = load_devices(data_path(args.devices), case)
    # structure only depends on device placement, so exact measurements suffice
    ms = generate_measurements(case, devices, 1.0, 0, adm, noise_scale=0.0)
    sys.stdout.write(build_graph(case, ms, adm).edge_list() + "\n")
    return EXIT_OK


def cmd_case_validate(args):
    case = load_case(data_path(args.case))
    print(f"ok: {case.n_bus} buses, {len(case.branches)} branches, slack bus {case.slack_bus}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="gbpse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="run the belief-propagation estimator once")
    _add_problem_args(p)
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--nu-max", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--p", type=float, default=0.5, help="damping probability")
    p.add_argument("--alpha", type=float, default=0.5, help="damping weight")
    p.add_argument("--damping-seed", type=int, default=0)
    p.add_argument("--no-damping", action="store_true")
    p.add_argument("--warm-start", action="store_true",
                   help="seed each outer iteration with the previous factor messages")
    p.add_argument("--out", help="directory for trace.csv and states.csv")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("wls", help="centralized Gauss-Newton WLS solution")
    _add_problem_args(p)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20)
    p.set_defaults(func=cmd_wls)

    for name, func, helptext in (("montecarlo", cmd_montecarlo, "noise-level sweep"),
                                 ("sweep-q", cmd_sweep_q, "inner-iteration exponent sweep")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="RunConfig JSON file")
        p.add_argument("--workers", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--output-dir")
        if name == "sweep-q":
            p.add_argument("--q", dest="q_values", type=int, nargs="+")
            p.add_argument("--sigma-index", type=int, default=0,
                           help="which entry of the config's sigma2 list to use")
        p.set_defaults(func=func)

    graph = sub.add_parser("graph", help="factor graph tools")
    gsub = graph.add_subparsers(dest="graph_command", required=True, parser_class=_Parser)
    p = gsub.add_parser("dump", help="print the factor/variable incidence as an edge list")
    p.add_argument("case")
    p.add_argument("devices")
    p.set_defaults(func=cmd_graph_dump)

    case = sub.add_parser("case", help="case file tools")
    csub = case.add_subparsers(dest="case_command", required=True, parser_class=_Parser)
    p = csub.add_parser("validate", help="load and validate a case file")
    p.add_argument("case")
    p.set_defaults(func=cmd_case_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CaseError, MeasurementError, ConfigError, IsolatedVariable, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RankDeficient, UnobservableVariable, ExactConflict, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
