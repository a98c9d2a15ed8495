"""Control problems: coefficient quadruples, control sets, presets and audits.

Coefficient maps are numpy-vectorised and broadcast over leading axes:

    b(x, y, u)      x: (..., d), y: (...), u: (...)          -> (..., d)
    sigma(x, y)                                              -> (..., d, d)
    f(x, y, z, u)   z: (..., d)                              -> (...)
    phi(x)                                                   -> (...)

The validators sample a fixed box and report the worst difference quotient,
ellipticity and sup norm they see.  They never prove anything; the constants
declared on the problem stay the source of truth downstream.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ControlSet",
    "ProblemSpec",
    "ValidationReport",
    "SAMPLE_BOX_X",
    "SAMPLE_BOX_Y",
    "SAMPLE_BOX_Z",
    "validate_lipschitz",
    "validate_ellipticity",
    "validate_bounds",
    "validate_all",
    "register_preset",
    "get_preset",
    "preset_names",
]

# Sampling box used by all audits.
SAMPLE_BOX_X = (-4.0, 4.0)
SAMPLE_BOX_Y = (-2.0, 2.0)
SAMPLE_BOX_Z = (-4.0, 4.0)

_REL_SLACK = 1e-6


@dataclass(frozen=True)
class ControlSet:
    """Compact control set: a closed interval or a finite list of reals.

    ``resolution`` is the number of points used when minimising over the
    interval; a finite set always uses its own points.
    """

    kind: str = "interval"
    lo: float = -1.0
    hi: float = 1.0
    points: tuple[float, ...] = ()
    resolution: int = 21

    def __post_init__(self):
        if self.kind == "interval":
            if not self.lo < self.hi:
                raise ValueError(f"interval control set needs lo < hi, got [{self.lo}, {self.hi}]")
            if self.resolution < 2:
                raise ValueError("interval control set needs resolution >= 2")
        elif self.kind == "finite":
            pts = tuple(float(p) for p in self.points)
            if not pts:
                raise ValueError("finite control set needs at least one point")
            if any(b <= a for a, b in zip(pts, pts[1:])):
                raise ValueError("finite control points must be strictly increasing")
            object.__setattr__(self, "points", pts)
            object.__setattr__(self, "resolution", len(pts))
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")

    @classmethod
    def interval(cls, lo: float, hi: float, resolution: int = 21) -> "ControlSet":
        return cls("interval", float(lo), float(hi), (), int(resolution))

    @classmethod
    def finite(cls, points) -> "ControlSet":
        pts = tuple(float(p) for p in points)
        return cls("finite", min(pts), max(pts), pts, len(pts))

    def grid(self) -> np.ndarray:
        if self.kind == "finite":
            return np.array(self.points)
        return np.linspace(self.lo, self.hi, self.resolution)

    def refined(self, resolution: int) -> "ControlSet":
        if self.kind == "finite":
            return self
        return dataclasses.replace(self, resolution=int(resolution))

    @property
    def cell(self) -> float:
        """Largest gap between neighbouring grid points (0 for a singleton)."""
        g = self.grid()
        return float(np.max(np.diff(g))) if g.size > 1 else 0.0

    def contains(self, u, atol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "interval":
            return (u >= self.lo - atol) & (u <= self.hi + atol)
        pts = np.array(self.points)
        return np.min(np.abs(u[..., None] - pts), axis=-1) <= atol


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficient quadruple (b, sigma, f, phi) with declared constants."""

    dim: int
    horizon: float
    b: Callable
    sigma: Callable
    f: Callable
    phi: Callable
    lipschitz_K: float
    ellipticity_lambda: float
    bound_M: float
    controls: ControlSet = field(default_factory=ControlSet)
    name: str = "custom"

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        for attr in ("lipschitz_K", "ellipticity_lambda", "bound_M"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"{attr} must be positive")

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def with_horizon(self, horizon: float) -> "ProblemSpec":
        return dataclasses.replace(self, horizon=float(horizon))

    def shifted_driver(self, shift: float) -> "ProblemSpec":
        """Copy with ``f + shift``; the declared bound grows by ``|shift|``."""
        f0 = self.f
        return dataclasses.replace(
            self,
            f=lambda x, y, z, u: f0(x, y, z, u) + shift,
            bound_M=self.bound_M + abs(shift),
            name=f"{self.name}{shift:+g}",
        )


@dataclass
class ValidationReport:
    empirical_K: float = float("nan")
    empirical_lambda: float = float("nan")
    empirical_bound: float = float("nan")
    violations: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def merged(self, other: "ValidationReport") -> "ValidationReport":
        def pick(a, b, fn):
            vals = [v for v in (a, b) if not np.isnan(v)]
            return fn(vals) if vals else float("nan")

        return ValidationReport(
            empirical_K=pick(self.empirical_K, other.empirical_K, max),
            empirical_lambda=pick(self.empirical_lambda, other.empirical_lambda, min),
            empirical_bound=pick(self.empirical_bound, other.empirical_bound, max),
            violations=self.violations + other.violations,
            details={**self.details, **other.details},
        )


# --- sampling ------------------------------------------------------------

def _scale(col, box):
    lo, hi = box
    return lo + (hi - lo) * col


def _draw_block(spec, samples: int, seed: int):
    """One uniform block, one row per sample, so prefixes are stable."""
    d = spec.dim
    width = 2 * (d + 1 + d) + 2
    rng = np.random.default_rng(seed)
    return rng.random((samples, width))


def _points_from_block(spec, block, second: bool):
    d = spec.dim
    off = (2 * d + 1) if second else 0
    x = _scale(block[:, off:off + d], SAMPLE_BOX_X)
    y = _scale(block[:, off + d], SAMPLE_BOX_Y)
    z = _scale(block[:, off + d + 1:off + 2 * d + 1], SAMPLE_BOX_Z)
    grid = spec.controls.grid()
    iu = np.minimum((block[:, -2] * grid.size).astype(int), grid.size - 1)
    return x, y, z, grid[iu]


def _pairs(spec, samples, seed):
    """Pairs of sample points; odd rows are local perturbations of the first point."""
    block = _draw_block(spec, samples, seed)
    x1, y1, z1, u = _points_from_block(spec, block, second=False)
    x2, y2, z2, _ = _points_from_block(spec, block, second=True)
    local = (np.arange(samples) % 2) == 1
    eps = 0.01
    x2 = np.where(local[:, None], np.clip(x1 + eps * (x2 - x1) / 8.0, *SAMPLE_BOX_X), x2)
    y2 = np.where(local, np.clip(y1 + eps * (y2 - y1) / 4.0, *SAMPLE_BOX_Y), y2)
    z2 = np.where(local[:, None], np.clip(z1 + eps * (z2 - z1) / 8.0, *SAMPLE_BOX_Z), z2)
    return (x1, y1, z1), (x2, y2, z2), u


def _norm(a, axes):
    return np.sqrt(np.sum(np.square(a), axis=axes)) if axes else np.abs(a)


def _worst(values, witness_fn, label, threshold, report, measured_key):
    k = int(np.argmax(values))
    report.details[measured_key] = float(values[k])
    if values[k] > threshold:
        report.violations.append((label, witness_fn(k), float(values[k])))


def validate_lipschitz(spec, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Largest difference quotient of each coefficient over sampled pairs.

    The quotient uses an additive distance over the arguments, e.g.
    ``|b(x,y,u) - b(x',y',u)| / (|x - x'| + |y - y'|)`` with ``u`` shared.
    """
    if samples < 2:
        raise ValueError("validate_lipschitz needs samples >= 2")
    (x1, y1, z1), (x2, y2, z2), u = _pairs(spec, samples, seed)
    dx = _norm(x1 - x2, -1)
    dy = np.abs(y1 - y2)
    dz = _norm(z1 - z2, -1)
    tiny = 1e-300
    limit = spec.lipschitz_K * (1 + _REL_SLACK)
    rep = ValidationReport()

    def quot(num, den):
        return np.where(den > 0, num / np.maximum(den, tiny), 0.0)

    q_phi = quot(np.abs(spec.phi(x1) - spec.phi(x2)), dx)
    q_b = quot(_norm(spec.b(x1, y1, u) - spec.b(x2, y2, u), -1), dx + dy)
    q_s = quot(_norm(spec.sigma(x1, y1) - spec.sigma(x2, y2), (-2, -1)), dx + dy)
    q_f = quot(np.abs(spec.f(x1, y1, z1, u) - spec.f(x2, y2, z2, u)), dx + dy + dz)
    for label, q in (("lipschitz:phi", q_phi), ("lipschitz:b", q_b), ("lipschitz:sigma", q_s), ("lipschitz:f", q_f)):
        _worst(q, lambda k: (x1[k].tolist(), float(y1[k]), z1[k].tolist(), float(u[k])),
               label, limit, rep, f"K[{label}]")
    rep.empirical_K = float(max(q_phi.max(), q_b.max(), q_s.max(), q_f.max()))
    return rep


def validate_ellipticity(spec, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Smallest eigenvalue of sigma sigma^T (gated) and of sym(sigma) (reported)."""
    if samples < 1:
        raise ValueError("validate_ellipticity needs samples >= 1")
    block = _draw_block(spec, samples, seed)
    x, y, _, _ = _points_from_block(spec, block, second=False)
    s = np.broadcast_to(spec.sigma(x, y), (samples, spec.dim, spec.dim))
    a = s @ np.swapaxes(s, -1, -2)
    lam_a = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))[:, 0]
    lam_s = np.linalg.eigvalsh(0.5 * (s + np.swapaxes(s, -1, -2)))[:, 0]
    rep = ValidationReport(empirical_lambda=float(lam_a.min()))
    rep.details["lambda[sym(sigma)]"] = float(lam_s.min())
    if rep.empirical_lambda < spec.ellipticity_lambda:
        k = int(np.argmin(lam_a))
        rep.violations.append(("ellipticity:sigma_sigma_T", (x[k].tolist(), float(y[k])), float(lam_a[k])))
    return rep


def validate_bounds(spec, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Sup norm of each coefficient over sampled points."""
    if samples < 1:
        raise ValueError("validate_bounds needs samples >= 1")
    block = _draw_block(spec, samples, seed)
    x, y, z, u = _points_from_block(spec, block, second=False)
    limit = spec.bound_M * (1 + _REL_SLACK)
    rep = ValidationReport()
    n = samples
    vals = {
        "bound:phi": np.broadcast_to(np.abs(spec.phi(x)), (n,)),
        "bound:b": np.broadcast_to(_norm(np.broadcast_to(spec.b(x, y, u), (n, spec.dim)), -1), (n,)),
        "bound:sigma": _norm(np.broadcast_to(spec.sigma(x, y), (n, spec.dim, spec.dim)), (-2, -1)),
        "bound:f": np.broadcast_to(np.abs(spec.f(x, y, z, u)), (n,)),
    }
    for label, v in vals.items():
        _worst(v, lambda k: (x[k].tolist(), float(y[k]), z[k].tolist(), float(u[k])),
               label, limit, rep, f"M[{label}]")
    rep.empirical_bound = float(max(v.max() for v in vals.values()))
    return rep


def validate_all(spec, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    return (validate_lipschitz(spec, samples, seed)
            .merged(validate_ellipticity(spec, samples, seed))
            .merged(validate_bounds(spec, samples, seed)))


# --- presets -------------------------------------------------------------

_PRESETS: dict[str, Callable[[], ProblemSpec]] = {}


def register_preset(name: str, factory: Callable[[], ProblemSpec]) -> None:
    """Register ``factory`` under ``name``; later registrations replace earlier ones."""
    _PRESETS[name] = factory


def get_preset(name: str) -> ProblemSpec:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(sorted(_PRESETS))}") from None


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def _ones_matrix(lead, d=1):
    return np.ones(tuple(lead) + (d, d))


def _uncontrolled_linear() -> ProblemSpec:
    return ProblemSpec(
        dim=1,
        horizon=1.0,
        b=lambda x, y, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y) + (1,), np.shape(u) + (1,))),
        sigma=lambda x, y: _ones_matrix(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y))),
        f=lambda x, y, z, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y),
                                                          np.shape(z)[:-1], np.shape(u))),
        phi=lambda x: np.tanh(x[..., 0]),
        lipschitz_K=1.0,
        ellipticity_lambda=1.0,
        bound_M=1.0,
        controls=ControlSet.finite([0.0]),
        name="uncontrolled-linear",
    )


def _sigma_b(x, y):
    s = 1.0 + 0.25 * np.tanh(y)
    s = np.broadcast_to(s, np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)))
    return s[..., None, None]


def _b1() -> ProblemSpec:
    return ProblemSpec(
        dim=1,
        horizon=1.0,
        b=lambda x, y, u: (0.5 * np.tanh(x[..., 0] + y) + 0.0 * u)[..., None],
        sigma=_sigma_b,
        f=lambda x, y, z, u: u ** 2 + 0.25 * np.tanh(z[..., 0]) + 0.1 * np.tanh(y) + 0.0 * x[..., 0],
        phi=lambda x: np.tanh(x[..., 0]),
        lipschitz_K=2.0,
        ellipticity_lambda=0.5,
        bound_M=2.0,
        controls=ControlSet.interval(-1.0, 1.0, 21),
        name="B1",
    )


def _b2() -> ProblemSpec:
    return ProblemSpec(
        dim=1,
        horizon=1.0,
        b=lambda x, y, u: np.broadcast_to(
            u, np.broadcast_shapes(np.shape(x)[:-1], np.shape(y), np.shape(u)))[..., None] * 1.0,
        sigma=_sigma_b,
        f=lambda x, y, z, u: (0.5 * u ** 2 + u * np.tanh(x[..., 0])
                              + 0.25 * np.tanh(z[..., 0]) + 0.1 * np.tanh(y)),
        phi=lambda x: np.tanh(x[..., 0]),
        lipschitz_K=2.0,
        ellipticity_lambda=0.5,
        bound_M=2.0,
        controls=ControlSet.interval(-1.0, 1.0, 21),
        name="B2",
    )


register_preset("uncontrolled-linear", _uncontrolled_linear)
register_preset("B1", _b1)
register_preset("B2", _b2)
