"""Convergence, coupling, optimality and chattering studies with CSV output."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .hjb import GridSpec, solve_hjb
from .model import get_preset
from .mollify import smooth_coefficients
from .policy import AdmissibleControl, extract_policy
from .relaxed import DiscreteMeasure, chattering_reduce
from .simulate import SimConfig, estimate_cost, simulate_synchronous_pair, solve_coupled_picard

__all__ = [
    "ExperimentConfig",
    "ConvergenceTable",
    "CouplingTable",
    "OptimalityTable",
    "fit_loglog",
    "solve_field",
    "run_value_convergence",
    "run_coupling_study",
    "run_optimality_study",
    "run_chattering",
    "write_chattering_csv",
]


def _fmt(v) -> str:
    return f"{float(v):.17g}"


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "B2"
    deltas: tuple = (0.4, 0.2, 0.1, 0.05)
    box: tuple = (-6.0, 6.0)
    grid_nx: int = 241
    paths: int = 10_000
    steps: int = 200
    seed: int = 0
    probes: tuple = ((0.0, 0.0),)
    out: str | None = None
    horizon: float | None = None
    sweep: int = 21
    basis_degree: int = 6
    kernel_resolution: int | None = None

    def __post_init__(self):
        d = tuple(float(v) for v in self.deltas)
        if not d or any(not 0.0 < v <= 1.0 for v in d):
            raise ValueError("delta values must lie in (0, 1]")
        if any(b >= a for a, b in zip(d, d[1:])):
            raise ValueError("delta values must be strictly decreasing")
        lo, hi = (float(v) for v in self.box)
        if not lo < hi:
            raise ValueError("box must satisfy lo < hi")
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "box", (lo, hi))
        probes = tuple(tuple(float(v) for v in p) for p in self.probes)
        h = (hi - lo) / (self.grid_nx - 1)
        T = self.spec().horizon
        for p in probes:
            t, x = p[0], np.array(p[1:])
            if not 0.0 <= t <= T or np.any(x < lo + 2 * h) or np.any(x > hi - 2 * h):
                raise ValueError(f"probe {p} outside [0, T] x box margin")
        object.__setattr__(self, "probes", probes)

    def spec(self):
        s = get_preset(self.preset)
        return s if self.horizon is None else s.with_horizon(float(self.horizon))

    def grid(self) -> GridSpec:
        s = self.spec()
        return GridSpec.box(d=s.dim, lo=self.box[0], hi=self.box[1], nx=self.grid_nx, T=s.horizon)

    def sim(self) -> SimConfig:
        return SimConfig(self.paths, self.steps, self.seed)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        """Build from string values as found in a key=value file."""
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name == "delta":
                name = "deltas"
            if name == "probe":
                name = "probes"
            if name not in kinds:
                raise ValueError(f"unknown configuration key {key!r}")
            kw[name] = _parse_value(name, raw)
        return cls(**kw)


def _parse_value(name, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if name in ("deltas", "box"):
        return tuple(float(v) for v in raw.split(","))
    if name == "probes":
        return tuple(tuple(float(v) for v in p.split(",")) for p in raw.split(";") if p.strip())
    if name in ("grid_nx", "paths", "steps", "seed", "sweep", "basis_degree", "kernel_resolution"):
        return int(raw)
    if name == "horizon":
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# --- helpers -------------------------------------------------------------

def fit_loglog(x, y) -> tuple[float, float]:
    """Least-squares ``log y = p log x + log c``; returns ``(p, c)``.  NaN if any y <= 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.any(y <= 0):
        return float("nan"), float("nan")
    p, logc = np.polyfit(np.log(x), np.log(y), 1)
    return float(p), float(np.exp(logc))


_FIELDS: dict = {}


def solve_field(spec, delta, grid, kernel_resolution=None):
    """Solve (and memoise within the process) the mollified HJB."""
    key = (spec.name, spec.horizon, float(delta), grid, kernel_resolution)
    if key not in _FIELDS:
        coeffs = smooth_coefficients(spec, delta, kernel_resolution)
        _FIELDS[key] = (coeffs, solve_hjb(coeffs, grid, spec.controls))
    return _FIELDS[key]


def _out_path(cfg, name):
    if cfg.out is None:
        return None
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _xcell(x) -> str:
    return ";".join(_fmt(v) for v in x)


# --- value convergence ---------------------------------------------------

@dataclass
class ConvergenceTable:
    rows: list                      # (delta_a, delta_b, t, x tuple, diff, bound)
    rate: float
    constant: float
    lipschitz_delta: float
    space: dict = field(default_factory=dict)
    time: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    def consecutive(self, probe) -> list:
        t, x = probe[0], tuple(probe[1:])
        deltas = sorted({r[0] for r in self.rows} | {r[1] for r in self.rows}, reverse=True)
        nxt = dict(zip(deltas, deltas[1:]))
        return [r for r in self.rows if r[2] == t and r[3] == x and nxt.get(r[0]) == r[1]]

    def monotone(self, probe, tol: float = 5e-3) -> bool:
        diffs = [r[4] for r in self.consecutive(probe)]
        return all(b <= a + tol for a, b in zip(diffs, diffs[1:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["delta_a", "delta_b", "t", "x", "diff", "bound"])
            for da, db, t, x, diff, bound in self.rows:
                out.writerow([_fmt(da), _fmt(db), _fmt(t), _xcell(x), _fmt(diff), _fmt(bound)])


def _modulus(field_, t, x, offsets, axis):
    x = np.asarray(x, dtype=float)
    base = field_.eval(t, x)
    diffs = []
    for o in offsets:
        if axis == "x":
            diffs.append(abs(field_.eval(t, x + o) - base))
        else:
            diffs.append(abs(field_.eval(t + o, x) - base))
    return np.array(diffs)


def run_value_convergence(cfg: ExperimentConfig, spec=None) -> ConvergenceTable:
    """Pairwise ``|V^a - V^b|`` at the probes plus space and time moduli.

    The rate is fitted on consecutive pairs, which are halvings when the
    delta list is geometric.  ``bound = C |delta_a - delta_b|`` with ``C``
    the largest consecutive quotient.
    """
    if len(cfg.deltas) < 3:
        raise ValueError("need at least three delta values")
    spec = cfg.spec() if spec is None else spec
    grid = cfg.grid()
    fields_ = {d: solve_field(spec, d, grid, cfg.kernel_resolution)[1] for d in cfg.deltas}
    values = {(d, p): fields_[d].eval(p[0], np.array(p[1:])) for d in cfg.deltas for p in cfg.probes}
    raw = []
    for p in cfg.probes:
        for i, da in enumerate(cfg.deltas):
            for db in cfg.deltas[i + 1:]:
                raw.append((da, db, p[0], tuple(p[1:]), abs(values[(da, p)] - values[(db, p)])))
    nxt = dict(zip(cfg.deltas, cfg.deltas[1:]))
    cons = [r for r in raw if nxt.get(r[0]) == r[1]]
    C = max((r[4] / (r[0] - r[1]) for r in cons), default=0.0)
    rows = [r + (C * (r[0] - r[1]),) for r in raw]
    p0 = cfg.probes[0]
    first = [r for r in cons if r[2] == p0[0] and r[3] == tuple(p0[1:])]
    rate, const = fit_loglog([r[0] for r in first], [r[4] for r in first])

    finest = fields_[cfg.deltas[-1]]
    dxs = grid.h[0] * 2.0 ** np.arange(5)
    dts = (spec.horizon - p0[0]) / 64 * 2.0 ** np.arange(5)
    sdiff = _modulus(finest, p0[0], p0[1:], dxs, "x")
    tdiff = _modulus(finest, p0[0], p0[1:], dts, "t")
    space = {"offsets": dxs, "diffs": sdiff, "rate": fit_loglog(dxs, sdiff)[0]}
    time = {"offsets": dts, "diffs": tdiff, "rate": fit_loglog(dts, tdiff)[0]}
    table = ConvergenceTable(rows, rate, const, C, space, time, values)
    path = _out_path(cfg, "convergence.csv")
    if path:
        table.write_csv(path)
    return table


# --- coupling ------------------------------------------------------------

@dataclass
class CouplingTable:
    rows: list                   # (delta, sup_dx2, sup_dy2)
    slope_x: float
    slope_y: float
    exit_counts: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["delta", "sup_dx2", "sup_dy2"])
            for r in self.rows:
                out.writerow([_fmt(v) for v in r])


def run_coupling_study(cfg: ExperimentConfig, spec=None, bypass: bool = False) -> CouplingTable:
    """Mollified feedback system against the auxiliary system on shared noise.

    ``bypass=True`` drives both sides with the original coefficients, so
    every difference must vanish.
    """
    if len(cfg.deltas) < 3:
        raise ValueError("need at least three delta values")
    spec = cfg.spec() if spec is None else spec
    grid = cfg.grid()
    p0 = cfg.probes[0]
    rows, exits = [], []
    for d in cfg.deltas:
        coeffs, fld = solve_field(spec, d, grid, cfg.kernel_resolution)
        pol = extract_policy(fld, coeffs, spec.controls)
        smoothed = spec if bypass else coeffs
        a, b = simulate_synchronous_pair(smoothed, spec, fld, pol, p0[0], np.array(p0[1:]), cfg.sim())
        dx2 = float(np.mean(np.max(np.sum((a.X - b.X) ** 2, axis=-1), axis=1)))
        dy2 = float(np.mean(np.max((a.Y - b.Y) ** 2, axis=1)))
        rows.append((d, dx2, dy2))
        exits.append(a.exit_count)
    ds = [r[0] for r in rows]
    table = CouplingTable(rows, fit_loglog(ds, [r[1] for r in rows])[0],
                          fit_loglog(ds, [r[2] for r in rows])[0], exits)
    path = _out_path(cfg, "coupling.csv")
    if path:
        table.write_csv(path)
    return table


# --- optimality ----------------------------------------------------------

@dataclass
class OptimalityTable:
    rows: list                   # (descriptor, mean, std_error, gap)
    value: float
    best_control: float
    best_mean: float
    best_std_error: float
    excluded: list = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.best_mean - self.value

    @property
    def passed(self) -> bool:
        feedback_gap = [r[3] for r in self.rows if r[0] == "feedback"]
        return (self.value <= self.best_mean + 2 * self.best_std_error + 1e-2
                and all(g == 0.0 for g in feedback_gap))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["control", "mean", "std_error", "gap"])
            for name, m, se, g in self.rows:
                out.writerow([name, _fmt(m), _fmt(se), _fmt(g)])


def run_optimality_study(cfg: ExperimentConfig, spec=None, delta: float | None = None,
                         max_iter: int = 20, tol: float = 1e-6) -> OptimalityTable:
    """Constant-control sweep through the Picard solver against the feedback value."""
    spec = cfg.spec() if spec is None else spec
    delta = cfg.deltas[-1] if delta is None else delta
    controls = spec.controls
    sweep = controls.grid() if controls.kind == "finite" else controls.refined(cfg.sweep).grid()
    if controls.kind != "finite" and sweep.size < 5:
        raise ValueError("control sweep needs at least 5 points")
    coeffs, fld = solve_field(spec, delta, cfg.grid(), cfg.kernel_resolution)
    p0 = cfg.probes[0]
    t, x = p0[0], np.array(p0[1:])
    value = fld.eval(t, x)
    pol = extract_policy(fld, coeffs, controls)
    fb = estimate_cost(coeffs, fld, AdmissibleControl.feedback(pol), t, x, cfg.sim())
    rows = [("feedback", fb.mean, fb.std_error, fb.mean - value)]
    best = None
    excluded = []
    for u in sweep:
        ctl = AdmissibleControl.constant(u)
        b = solve_coupled_picard(spec, ctl, t, x, cfg.sim(), cfg.basis_degree, max_iter, tol)
        mean, se = b.info["y0"], b.info["y0_se"]
        rows.append((ctl.describe(), mean, se, mean - value))
        if not b.info["converged"]:
            excluded.append(float(u))
            warnings.warn(f"Picard iteration did not converge for constant control {u:g}")
            continue
        if best is None or mean < best[1]:
            best = (float(u), mean, se)
    if best is None:
        best = (float("nan"), float("nan"), float("nan"))
    table = OptimalityTable(rows, value, best[0], best[1], best[2], excluded)
    path = _out_path(cfg, "optimality.csv")
    if path:
        table.write_csv(path)
    return table


# --- chattering ----------------------------------------------------------

def run_chattering(spec, measure: DiscreteMeasure, points, controls=None) -> list:
    """Reduce ``measure`` at each ``(x, y)`` in ``points``."""
    rows = []
    for x, y in points:
        r = chattering_reduce(measure, x, y, spec, controls)
        rows.append((np.atleast_1d(x), float(y), r))
    return rows


def write_chattering_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "y", "u_bar", "w_bar", "theta_bar", "alpha", "residual"])
        for x, y, r in rows:
            out.writerow([_xcell(x), _fmt(y), _fmt(r.u_bar), _xcell(r.w_bar), _fmt(r.theta_bar),
                          _fmt(r.alpha), _fmt(r.residual)])
