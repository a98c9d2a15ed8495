"""Feedback policies from solved value fields, and admissible control wrappers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as _field

import numpy as np

from .hjb import GridSpec, hamiltonian_table, level_derivatives

__all__ = [
    "FeedbackPolicy",
    "AdmissibleControl",
    "extract_policy",
    "control_at",
]


@dataclass
class FeedbackPolicy:
    grid: GridSpec
    table: np.ndarray
    field: object = _field(default=None, repr=False)
    coeffs: object = _field(default=None, repr=False)
    controls: object = None

    def lookup(self, t: float, X) -> np.ndarray:
        """Nearest time level and nearest node (clamped to the box)."""
        g = self.grid
        X = np.asarray(X, dtype=float).reshape(-1, g.d)
        n = nearest_level(g, t)
        idx = np.rint((X - np.array(g.x_lo)) / g.h).astype(int)
        idx = np.clip(idx, 0, g.nx - 1)
        return self.table[n][tuple(idx.T)]

    def write_csv(self, path) -> None:
        g = self.grid
        nodes = g.nodes().reshape(-1, g.d)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i}" for i in range(g.d)] + ["u"])
            for n, t in enumerate(g.times()):
                for xv, u in zip(nodes, self.table[n].reshape(-1)):
                    w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in xv] + [f"{u:.17g}"])

    @classmethod
    def read_csv(cls, path) -> "FeedbackPolicy":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=float)
        d = len(head) - 2
        times = np.unique(body[:, 0])
        axes = [np.unique(body[:, 1 + i]) for i in range(d)]
        nx = axes[0].size
        grid = GridSpec(tuple(a[0] for a in axes), tuple(a[-1] for a in axes), nx,
                        times.size - 1, float(times[0]), float(times[-1]))
        table = body[:, -1].reshape((times.size,) + (nx,) * d)
        return cls(grid, table)


def _copy_boundary(level: np.ndarray) -> np.ndarray:
    out = level.copy()
    for axis in range(level.ndim):
        m = np.moveaxis(out, axis, 0)
        m[0] = m[1]
        m[-1] = m[-2]
    return out


def extract_policy(field, coeffs=None, controls=None, *, recompute: bool = False) -> FeedbackPolicy:
    """Tabulate the pointwise minimiser of H at every node and level.

    Reuses the solver's argmin record when available; ``recompute=True``
    re-derives it from the stored values.  Boundary nodes copy their nearest
    interior neighbour.
    """
    coeffs = field.source if coeffs is None else coeffs
    controls = (field.controls or coeffs.controls) if controls is None else controls
    ugrid = controls.grid()
    g = field.grid
    if field.argmin_index is not None and controls == field.controls and not recompute:
        idx = field.argmin_index
    else:
        d = g.d
        X = g.nodes().reshape(-1, d)
        idx = np.empty(field.values.shape, dtype=np.int32)
        for n, V in enumerate(field.values):
            P, A = level_derivatives(V, g.h)
            H = hamiltonian_table(coeffs, X, V.reshape(-1), P.reshape(-1, d), A.reshape(-1, d, d), ugrid)
            idx[n] = np.argmin(H, axis=1).reshape(V.shape)
    table = np.stack([_copy_boundary(ugrid[k]) for k in idx])
    return FeedbackPolicy(g, table, field, coeffs, controls)


@dataclass(frozen=True)
class AdmissibleControl:
    """Strict control: a constant, an open-loop step function, or a feedback table."""

    kind: str
    value: float = 0.0
    breaks: tuple = ()
    levels: tuple = ()
    policy: FeedbackPolicy | None = None

    @classmethod
    def constant(cls, u: float) -> "AdmissibleControl":
        return cls("constant", value=float(u))

    @classmethod
    def open_loop(cls, breaks, levels) -> "AdmissibleControl":
        """Step function: ``levels[i]`` on ``[breaks[i], breaks[i+1])``; the last level holds to the end."""
        breaks = tuple(float(b) for b in breaks)
        levels = tuple(float(v) for v in levels)
        if len(breaks) != len(levels):
            raise ValueError("need one level per break point")
        if any(b <= a for a, b in zip(breaks, breaks[1:])):
            raise ValueError("break points must increase")
        return cls("open-loop", breaks=breaks, levels=levels)

    @classmethod
    def feedback(cls, policy: FeedbackPolicy) -> "AdmissibleControl":
        return cls("feedback", policy=policy)

    def at(self, t: float, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        n = X.shape[0] if X.ndim == 2 else 1
        if self.kind == "constant":
            return np.full(n, self.value)
        if self.kind == "open-loop":
            i = max(int(np.searchsorted(self.breaks, t, side="right")) - 1, 0)
            return np.full(n, self.levels[i])
        return self.policy.lookup(t, X)

    def describe(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.value:.17g}"
        if self.kind == "open-loop":
            return "open-loop:" + "|".join(f"{b:g}->{v:g}" for b, v in zip(self.breaks, self.levels))
        return "feedback"

    def in_set(self, controls) -> bool:
        if self.kind == "constant":
            return bool(controls.contains(self.value))
        if self.kind == "open-loop":
            return bool(np.all(controls.contains(np.array(self.levels))))
        return bool(np.all(controls.contains(self.policy.table)))


def control_at(control: AdmissibleControl, t: float, x):
    """Control value at ``(t, x)``; scalar for a single point."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    u = control.at(t, X)
    return float(u[0]) if single else u


def nearest_level(grid: GridSpec, t: float) -> int:
    return min(max(int(math.floor((t - grid.t0) / grid.dt + 0.5)), 0), grid.nt)
