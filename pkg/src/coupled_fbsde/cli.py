"""Command-line entry point: ``coupled-fbsde <subcommand> [flags]``.

Exit codes: 0 success, 1 validation failure, 2 solver error, 3 bad arguments.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys

import numpy as np

from .hjb import OutOfBoxError, SolverError
from .lab import (ExperimentConfig, read_config_file, run_chattering, run_coupling_study,
                  run_optimality_study, run_value_convergence, solve_field, write_chattering_csv)
from .model import validate_all
from .policy import AdmissibleControl, extract_policy
from .relaxed import DiscreteMeasure, audit_convexity, default_radius
from .simulate import RegressionError, SimConfig, estimate_cost, simulate_forward

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_ARGS = 0, 1, 2, 3

SUBCOMMANDS = ("validate", "solve", "policy", "simulate", "converge", "couple", "optimality", "chattering")


class BadArguments(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise BadArguments(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coupled-fbsde", description="Controlled coupled FBSDE toolkit.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key=value file; flags override its entries")
    p.add_argument("--preset")
    p.add_argument("--delta", help="one value, or a decreasing comma list for studies")
    p.add_argument("--grid-nx", type=int)
    p.add_argument("--box", help="lo,hi")
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--kernel-resolution", type=int, help="mollifier nodes per axis")
    p.add_argument("--out")
    p.add_argument("--probe", action="append", help="t,x (repeatable)")
    p.add_argument("--control", type=float, help="constant control for `simulate` cost rows")
    p.add_argument("--atoms", help='"(u,w,weight);(u,w,weight);..."')
    p.add_argument("--x", help="state x for `chattering` (comma list in 2-d)")
    p.add_argument("--y", type=float)
    p.add_argument("--measures", type=int, default=1000)
    p.add_argument("--points", type=int, default=100)
    return p


_FLAG_KEYS = ("preset", "delta", "grid_nx", "box", "paths", "steps", "seed", "horizon", "out", "kernel_resolution")


def make_config(args, command: str) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in _FLAG_KEYS:
        v = getattr(args, key)
        if v is not None:
            values[key] = v if isinstance(v, str) else str(v)
    if args.probe:
        values["probe"] = ";".join(args.probe)
    if command in ("solve", "policy", "simulate", "optimality", "chattering", "validate"):
        # single-delta commands may be handed just one value
        raw = values.pop("delta", values.get("deltas", "0.1"))
        values["deltas"] = raw
    return ExperimentConfig.from_mapping(values)


def _probes(cfg):
    return [(p[0], np.array(p[1:])) for p in cfg.probes]


def _cmd_validate(cfg, args):
    spec = cfg.spec()
    rep = validate_all(spec, seed=cfg.seed)
    print(f"{spec.name}: K={rep.empirical_K:.6g} lambda={rep.empirical_lambda:.6g} "
          f"bound={rep.empirical_bound:.6g} violations={len(rep.violations)}")
    for label, witness, value in rep.violations:
        print(f"  {label}: {value:.6g} at {witness}", file=sys.stderr)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "validate.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "declared", "empirical"])
            w.writerow(["lipschitz_K", f"{spec.lipschitz_K:.17g}", f"{rep.empirical_K:.17g}"])
            w.writerow(["ellipticity_lambda", f"{spec.ellipticity_lambda:.17g}", f"{rep.empirical_lambda:.17g}"])
            w.writerow(["bound_M", f"{spec.bound_M:.17g}", f"{rep.empirical_bound:.17g}"])
            for label, witness, value in rep.violations:
                w.writerow([label, repr(witness), f"{value:.17g}"])
    return EXIT_OK if rep.passed else EXIT_INVALID


def _field(cfg):
    return solve_field(cfg.spec(), cfg.deltas[0], cfg.grid(), cfg.kernel_resolution)


def _cmd_solve(cfg, args):
    coeffs, fld = _field(cfg)
    for t, x in _probes(cfg):
        print(f"V({t:g},{','.join(f'{v:g}' for v in x)}) = {fld.eval(t, x):.17g}")
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        fld.save(os.path.join(cfg.out, "field.txt"))
    return EXIT_OK


def _cmd_policy(cfg, args):
    coeffs, fld = _field(cfg)
    pol = extract_policy(fld, coeffs, cfg.spec().controls)
    os.makedirs(cfg.out or ".", exist_ok=True)
    path = os.path.join(cfg.out or ".", "policy.csv")
    pol.write_csv(path)
    print(f"policy table written to {path}")
    return EXIT_OK


def _cmd_simulate(cfg, args):
    spec = cfg.spec()
    coeffs, fld = _field(cfg)
    pol = extract_policy(fld, coeffs, spec.controls)
    fb = AdmissibleControl.feedback(pol)
    sim = SimConfig(cfg.paths, cfg.steps, cfg.seed)
    t, x = _probes(cfg)[0]
    bundle = simulate_forward(coeffs, fld, fb, t, x, sim)
    costs = [(fb.describe(), estimate_cost(coeffs, fld, fb, t, x, sim))]
    if args.control is not None:
        c = AdmissibleControl.constant(args.control)
        if not c.in_set(spec.controls):
            raise BadArguments(f"control {args.control:g} outside the control set")
        costs.append((c.describe(), estimate_cost(spec, fld, c, t, x, sim, cfg.basis_degree)))
    out = cfg.out or "."
    os.makedirs(out, exist_ok=True)
    bundle.write_csv(os.path.join(out, "paths.csv"))
    with open(os.path.join(out, "cost.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["control", "mean", "std_error", "n_paths"])
        for name, c in costs:
            w.writerow([name, f"{c.mean:.17g}", f"{c.std_error:.17g}", c.n_paths])
    for name, c in costs:
        print(f"{name}: J = {c.mean:.10g} +/- {c.std_error:.3g}")
    print(f"exit_count = {bundle.exit_count}")
    return EXIT_OK


def _cmd_converge(cfg, args):
    tab = run_value_convergence(cfg)
    print(f"delta rate {tab.rate:.4g} (constant {tab.constant:.4g}); space rate {tab.space['rate']:.4g}; "
          f"time rate {tab.time['rate']:.4g}")
    return EXIT_OK


def _cmd_couple(cfg, args):
    tab = run_coupling_study(cfg)
    for d, dx, dy in tab.rows:
        print(f"delta={d:g}: E sup|dX|^2={dx:.6g}  E sup|dY|^2={dy:.6g}")
    print(f"slopes: X {tab.slope_x:.4g}, Y {tab.slope_y:.4g}")
    return EXIT_OK


def _cmd_optimality(cfg, args):
    tab = run_optimality_study(cfg)
    print(f"V = {tab.value:.10g}; best constant u={tab.best_control:g}: {tab.best_mean:.10g} "
          f"+/- {tab.best_std_error:.3g}; gap {tab.gap:.4g}")
    return EXIT_OK


_ATOM = re.compile(r"\(([^()]*)\)")


def parse_atoms(text: str, d: int) -> DiscreteMeasure:
    atoms = _ATOM.findall(text)
    if not atoms:
        raise BadArguments("--atoms expects '(u,w,weight);...'")
    us, ws, qs = [], [], []
    for a in atoms:
        try:
            vals = [float(v) for v in a.split(",")]
        except ValueError:
            raise BadArguments(f"bad atom {a!r}") from None
        if len(vals) != d + 2:
            raise BadArguments(f"atom {a!r} needs {d + 2} numbers")
        us.append(vals[0])
        ws.append(vals[1:1 + d])
        qs.append(vals[-1])
    try:
        return DiscreteMeasure(us, ws, qs)
    except ValueError as exc:
        raise BadArguments(str(exc)) from None


def _cmd_chattering(cfg, args):
    spec = cfg.spec()
    out = cfg.out
    if out:
        os.makedirs(out, exist_ok=True)
    if args.atoms:
        m = parse_atoms(args.atoms, spec.dim)
        if not np.all(spec.controls.contains(m.u)):
            raise BadArguments("atom control outside the control set")
        x = np.array([float(v) for v in (args.x or "0").split(",")])
        if x.size != spec.dim:
            raise BadArguments(f"--x needs {spec.dim} values")
        y = 0.0 if args.y is None else args.y
        rows = run_chattering(spec, m, [(x, y)])
        r = rows[0][2]
        print(f"u_bar={r.u_bar:.17g} w_bar={','.join(f'{v:.17g}' for v in r.w_bar)} "
              f"theta_bar={r.theta_bar:.17g} residual={r.residual:.17g}")
        if out:
            write_chattering_csv(os.path.join(out, "chattering.csv"), rows)
        return EXIT_OK
    radius = 1.0
    if args.delta is not None or args.config:
        _, fld = _field(cfg)
        radius = default_radius(fld)
    rep = audit_convexity(spec, args.measures, args.points, cfg.seed, radius=radius)
    q = rep.quantiles()
    print(f"audit {spec.name}: {rep.residual.size} reductions, fraction above tol {rep.fraction_exceeding:.4g}, "
          f"median residual {q[0.5]:.4g}, max {q[1.0]:.4g}, min alpha {rep.alpha.min():.3g}")
    if out:
        rep.write_csv(os.path.join(out, "audit.csv"))
    return EXIT_OK


_HANDLERS = {
    "validate": _cmd_validate, "solve": _cmd_solve, "policy": _cmd_policy, "simulate": _cmd_simulate,
    "converge": _cmd_converge, "couple": _cmd_couple, "optimality": _cmd_optimality,
    "chattering": _cmd_chattering,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = make_config(args, args.command)
        return _HANDLERS[args.command](cfg, args)
    except BadArguments as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (SolverError, RegressionError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OutOfBoxError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
