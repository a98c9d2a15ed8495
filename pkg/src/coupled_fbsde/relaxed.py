"""Relaxed controls as discrete measures on U x ball(0, C), and the chattering reduction.

A relaxed action at a state ``(x, y)`` is a finite measure ``mu = sum q_i delta_(u_i, w_i)``.
The reduction replaces it by one strict triple ``(u_bar, w_bar, theta_bar)``:

    w_bar     = sum q_i w_i
    u_bar     = argmin of the (b, f) barycentre mismatch over the control grid
                and the atoms' own controls
    alpha     = sum q_i w_i a w_i^T - w_bar a w_bar^T,   a = sigma sigma^T
    theta_bar = sqrt(max(alpha, 0))

``alpha`` equals ``sum q_i |(w_i - w_bar) sigma|^2``, so it is a sum of squares.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import SAMPLE_BOX_X, SAMPLE_BOX_Y

__all__ = [
    "DiscreteMeasure",
    "RelaxedControlMeasure",
    "ChatteringResult",
    "AuditReport",
    "embed_strict",
    "embed_path",
    "chattering_reduce",
    "reduce_batch",
    "alpha_sum_of_squares",
    "audit_convexity",
    "default_radius",
    "relaxed_feedback",
    "chattering_feedback",
]

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteMeasure:
    u: np.ndarray        # (K,)
    w: np.ndarray        # (K, d)
    weights: np.ndarray  # (K,)

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        w = np.asarray(self.w, dtype=float).reshape(u.size, -1)
        q = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if q.shape != u.shape:
            raise ValueError("one weight per atom")
        if np.any(q < 0) or abs(q.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={q.sum():.17g})")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "weights", q)

    @classmethod
    def dirac(cls, u, w) -> "DiscreteMeasure":
        return cls([float(u)], np.atleast_1d(np.asarray(w, dtype=float))[None, :], [1.0])

    @property
    def size(self) -> int:
        return self.u.size

    def permuted(self, order) -> "DiscreteMeasure":
        order = np.asarray(order)
        return DiscreteMeasure(self.u[order], self.w[order], self.weights[order])


@dataclass(frozen=True)
class RelaxedControlMeasure:
    """Piecewise-constant measure-valued control: ``measures[k]`` acts on ``[times[k], times[k+1])``."""

    times: np.ndarray
    measures: tuple
    radius: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if len(self.measures) != times.size - 1:
            raise ValueError("need one measure per time cell")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        for k, m in enumerate(self.measures):
            if np.any(np.linalg.norm(m.w, axis=1) > self.radius * (1 + 1e-12)):
                raise ValueError(f"atom outside the w-ball of radius {self.radius:g} in cell {k}")
        object.__setattr__(self, "times", times)

    def at(self, t: float) -> DiscreteMeasure:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.measures[min(max(k, 0), len(self.measures) - 1)]

    def atoms_in(self, controls) -> bool:
        return all(bool(np.all(controls.contains(m.u))) for m in self.measures)

    def write_csv(self, path) -> None:
        d = self.measures[0].w.shape[1]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "atom"] + ["u"] + [f"w{i}" for i in range(d)] + ["weight"])
            for t, m in zip(self.times[:-1], self.measures):
                for i in range(m.size):
                    out.writerow([f"{t:.17g}", i, f"{m.u[i]:.17g}"] + [f"{v:.17g}" for v in m.w[i]]
                                 + [f"{m.weights[i]:.17g}"])


def _step_values(path, times):
    if callable(path):
        return [path(t) for t in times]
    vals = list(path)
    if len(vals) != len(times):
        raise ValueError("path needs one value per time cell")
    return vals


def embed_strict(control_path, w_path, time_grid, radius: float) -> RelaxedControlMeasure:
    """Dirac measure at ``(u(t_k), w(t_k))`` on each cell of ``time_grid``.

    ``control_path`` and ``w_path`` are callables of t or sequences with one
    entry per cell.
    """
    times = np.asarray(time_grid, dtype=float)
    left = times[:-1]
    us = _step_values(control_path, left)
    ws = _step_values(w_path, left)
    return RelaxedControlMeasure(times, tuple(DiscreteMeasure.dirac(u, w) for u, w in zip(us, ws)), radius)


def default_radius(field_) -> float:
    """1.5 times the largest gradient norm of the solved field."""
    return 1.5 * field_.grad_bound()


def embed_path(bundle, field_, path: int = 0, radius: float | None = None) -> RelaxedControlMeasure:
    """Relaxed embedding of one simulated feedback path: ``u = v(s, X)``, ``w = grad V(s, X)``."""
    radius = default_radius(field_) if radius is None else radius
    times = bundle.times
    X = bundle.X[path]
    us = bundle.U[path, :-1]
    ws = [field_.grad(t, X[k][None, :])[0] for k, t in enumerate(times[:-1])]
    return embed_strict(list(us), ws, times, radius)


@dataclass(frozen=True)
class ChatteringResult:
    u_bar: float
    w_bar: np.ndarray
    theta_bar: float
    residual: float
    alpha: float
    theta_bound: float = np.inf


def reduce_batch(coeffs, ugrid, X, Y, U, W, Q):
    """Vectorised reduction of N measures with K atoms each.

    Shapes: X (N, d), Y (N,), U (N, K), W (N, K, d), Q (N, K).  Padding atoms
    with zero weight is allowed.  Returns ``(u_bar, w_bar, theta_bar,
    residual, alpha)``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    U = np.asarray(U, dtype=float)
    W = np.asarray(W, dtype=float)
    Q = np.asarray(Q, dtype=float)
    ugrid = np.asarray(ugrid, dtype=float)
    s = coeffs.sigma(X, Y)                               # (N, d, d)
    a = s @ np.swapaxes(s, -1, -2)
    w_bar = np.einsum("nk,nkd->nd", Q, W)
    quad = np.einsum("nki,nij,nkj->nk", W, a, W)
    alpha = np.einsum("nk,nk->n", Q, quad) - np.einsum("ni,nij,nj->n", w_bar, a, w_bar)
    theta = np.sqrt(np.maximum(alpha, 0.0))

    Xk = X[:, None, :]
    Yk = Y[:, None]
    b_atoms = np.broadcast_to(coeffs.b(Xk, Yk, U), U.shape + (X.shape[1],))
    b_bar = np.einsum("nk,nkd->nd", Q, b_atoms)
    z_atoms = np.einsum("nki,nij->nkj", W, s)
    f_bar = np.einsum("nk,nk->n", Q, np.broadcast_to(coeffs.f(Xk, Yk, z_atoms, U), U.shape))

    # candidates: the control grid, then the measure's own atoms
    ug = np.concatenate([np.broadcast_to(ugrid, (X.shape[0], ugrid.size)), U], axis=1)
    b_u = np.broadcast_to(coeffs.b(Xk, Yk, ug), ug.shape + (X.shape[1],))
    z_bar = np.einsum("ni,nij->nj", w_bar, s)[:, None, :]
    f_u = np.broadcast_to(coeffs.f(Xk, Yk, z_bar, ug), ug.shape)
    gap = np.maximum(np.max(np.abs(b_u - b_bar[:, None, :]), axis=-1), np.abs(f_u - f_bar[:, None]))
    j = np.argmin(gap, axis=1)
    rows = np.arange(X.shape[0])
    return ug[rows, j], w_bar, theta, gap[rows, j], alpha


def alpha_sum_of_squares(coeffs, measure: DiscreteMeasure, x, y) -> float:
    """``sum q_i |(w_i - w_bar) sigma|^2``, the second form of alpha."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = coeffs.sigma(x, np.asarray(float(y)))
    w_bar = measure.weights @ measure.w
    dz = (measure.w - w_bar) @ s
    return float(measure.weights @ np.sum(dz * dz, axis=1))


def chattering_reduce(measure: DiscreteMeasure, x, y, spec, controls=None,
                      radius: float | None = None) -> ChatteringResult:
    """Reduce one relaxed action at ``(x, y)`` to ``(u_bar, w_bar, theta_bar)``.

    ``theta_bound = 2 C sup|sigma|`` with ``sup|sigma|`` taken as the
    coefficient bound of ``spec``; infinite when no radius is given.
    """
    controls = spec.controls if controls is None else controls
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u, wb, th, res, al = reduce_batch(spec, controls.grid(), x[None, :], np.array([float(y)]),
                                      measure.u[None, :], measure.w[None, :, :], measure.weights[None, :])
    bound = np.inf if radius is None else 2.0 * radius * spec.bound_M
    return ChatteringResult(float(u[0]), wb[0], float(th[0]), float(res[0]), float(al[0]), bound)


@dataclass
class AuditReport:
    x: np.ndarray
    y: np.ndarray
    n_atoms: np.ndarray
    residual: np.ndarray
    alpha: np.ndarray
    theta_bar: np.ndarray
    tol: float
    info: dict = field(default_factory=dict)

    @property
    def fraction_exceeding(self) -> float:
        return float(np.mean(self.residual > self.tol))

    @property
    def passed(self) -> bool:
        return self.fraction_exceeding == 0.0

    def quantiles(self, qs=(0.5, 0.9, 0.99, 1.0)) -> dict:
        return {q: float(np.quantile(self.residual, q)) for q in qs}

    def write_csv(self, path) -> None:
        d = self.x.shape[1]
        xcols = ["x"] if d == 1 else [f"x{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(xcols + ["y", "n_atoms", "residual", "alpha", "theta_bar"])
            for i in range(self.residual.size):
                out.writerow([f"{v:.17g}" for v in self.x[i]] + [f"{self.y[i]:.17g}", int(self.n_atoms[i])]
                             + [f"{v:.17g}" for v in (self.residual[i], self.alpha[i], self.theta_bar[i])])


def _random_measures(rng, n, ugrid, d, radius):
    K = 3
    n_atoms = rng.integers(2, 4, size=n)
    U = ugrid[rng.integers(0, ugrid.size, size=(n, K))]
    direction = rng.standard_normal((n, K, d))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    W = direction * (radius * rng.random((n, K, 1)) ** (1.0 / d))
    Q = rng.dirichlet(np.ones(K), size=n)
    Q[n_atoms == 2, 2] = 0.0
    Q /= Q.sum(axis=1, keepdims=True)
    return n_atoms, U, W, Q


def audit_convexity(spec, n_measures: int = 1000, n_points: int = 100, seed: int = 0,
                    tol: float = 1e-6, radius: float = 1.0, controls=None,
                    chunk: int = 20000) -> AuditReport:
    """Reduce every (random measure, random state point) pair and report residuals.

    Atoms are drawn from the control grid, so a residual above ``tol``
    signals that the barycentre leaves the coefficient image.
    """
    controls = spec.controls if controls is None else controls
    ugrid = controls.grid()
    rng = np.random.default_rng(seed)
    d = spec.dim
    n_atoms, U, W, Q = _random_measures(rng, n_measures, ugrid, d, radius)
    lo, hi = SAMPLE_BOX_X
    pts = lo + (hi - lo) * rng.random((n_points, d))
    ys = SAMPLE_BOX_Y[0] + (SAMPLE_BOX_Y[1] - SAMPLE_BOX_Y[0]) * rng.random(n_points)
    mi, pi = np.meshgrid(np.arange(n_measures), np.arange(n_points), indexing="ij")
    mi, pi = mi.ravel(), pi.ravel()
    parts = []
    for s in range(0, mi.size, chunk):
        m, p = mi[s:s + chunk], pi[s:s + chunk]
        parts.append(reduce_batch(spec, ugrid, pts[p], ys[p], U[m], W[m], Q[m]))
    _, _, theta, res, alpha = (np.concatenate(c) for c in zip(*parts))
    return AuditReport(pts[pi], ys[pi], n_atoms[mi], res, alpha, theta, tol,
                       info={"n_measures": n_measures, "n_points": n_points, "radius": radius, "seed": seed})


def relaxed_feedback(policy, field_):
    """Degenerate relaxed policy ``(v(t, X), grad V(t, X), 0)`` for the relaxed simulator."""

    def rule(t, X, y):
        return policy.lookup(t, X), field_.grad(t, X), np.zeros(X.shape[0])

    return rule


def chattering_feedback(measure: RelaxedControlMeasure, spec, controls=None):
    """Relaxed policy that reduces the time-``t`` measure at every path state."""
    controls = spec.controls if controls is None else controls
    ugrid = controls.grid()

    def rule(t, X, y):
        m = measure.at(t)
        n = X.shape[0]
        U = np.broadcast_to(m.u, (n, m.size))
        W = np.broadcast_to(m.w, (n,) + m.w.shape)
        Q = np.broadcast_to(m.weights, (n, m.size))
        u, w, th, _, _ = reduce_batch(spec, ugrid, X, np.broadcast_to(y, (n,)), U, W, Q)
        return u, w, th

    return rule
