"""Hamiltonians and an explicit monotone solver for the smoothed HJB equation.

The backward step at every node is

    V(t - dt) = V(t) + dt * min_u H(x, V(t), DV(t), D2V(t), u)

with central differences in the interior, second-order one-sided gradients
on the outermost layer and the Hessian of the adjacent interior node copied
outwards.  The value and the z-argument ``p sigma`` are taken explicitly
from the later time level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mollify import smoothed_min_ellipticity

__all__ = [
    "GridSpec",
    "ValueField",
    "SolverError",
    "CFLError",
    "EllipticityError",
    "OutOfBoxError",
    "hamiltonian",
    "hamiltonian_table",
    "min_hamiltonian",
    "level_derivatives",
    "solve_hjb",
    "CFL_SAFETY",
]

CFL_SAFETY = 0.9


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    def __init__(self, cfl: float, required_nt: int):
        super().__init__(f"CFL number {cfl:.4g} exceeds {CFL_SAFETY}; need nt >= {required_nt}")
        self.cfl = cfl
        self.required_nt = required_nt


class EllipticityError(SolverError):
    pass


class OutOfBoxError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    x_lo: tuple
    x_hi: tuple
    nx: int = 241
    nt: int | None = None
    t0: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.x_lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.x_hi))
        object.__setattr__(self, "x_lo", lo)
        object.__setattr__(self, "x_hi", hi)
        if len(lo) != len(hi) or not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("need x_lo < x_hi componentwise")
        if self.nx < 3:
            raise ValueError("nx must be >= 3")
        if self.nt is not None and self.nt < 1:
            raise ValueError("nt must be >= 1")
        if not self.t0 < self.T:
            raise ValueError("need t0 < T")

    @classmethod
    def box(cls, d: int = 1, lo: float = -6.0, hi: float = 6.0, nx: int = 241,
            T: float = 1.0, t0: float = 0.0, nt: int | None = None) -> "GridSpec":
        return cls((lo,) * d, (hi,) * d, nx, nt, t0, T)

    @property
    def d(self) -> int:
        return len(self.x_lo)

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.x_hi) - np.array(self.x_lo)) / (self.nx - 1)

    @property
    def dt(self) -> float:
        if self.nt is None:
            raise ValueError("time step undefined until nt is set")
        return (self.T - self.t0) / self.nt

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, self.nx) for a, b in zip(self.x_lo, self.x_hi)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(nx,) * d + (d,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.nt + 1)

    def with_nt(self, nt: int) -> "GridSpec":
        return GridSpec(self.x_lo, self.x_hi, self.nx, int(nt), self.t0, self.T)


# --- Hamiltonian ---------------------------------------------------------

def hamiltonian(spec, x, y, p, A, u) -> float:
    """``1/2 tr(sigma sigma^T A) + b . p + f(x, y, p sigma, u)`` at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    A = np.asarray(A, dtype=float).reshape(x.size, x.size)
    s = np.asarray(spec.sigma(x, y), dtype=float).reshape(x.size, x.size)
    a = s @ s.T
    z = p @ s
    return float(0.5 * np.sum(a * A) + np.asarray(spec.b(x, y, u)).reshape(-1) @ p
                 + spec.f(x, y, z, u))


def hamiltonian_table(coeffs, X, Y, P, A, ugrid) -> np.ndarray:
    """H at N points for every control grid value, shape (N, len(ugrid))."""
    s = coeffs.sigma(X, Y)                                   # (N, d, d)
    a = s @ np.swapaxes(s, -1, -2)
    trace = 0.5 * np.einsum("nij,nij->n", a, A)
    z = np.einsum("ni,nij->nj", P, s)
    b = coeffs.b(X[:, None, :], Y[:, None], ugrid[None, :])  # (N, U, d)
    bp = np.einsum("nud,nd->nu", b, P)
    f = coeffs.f(X[:, None, :], Y[:, None], z[:, None, :], ugrid[None, :])
    return trace[:, None] + bp + f


def min_hamiltonian(coeffs, x, y, p, A, controls) -> tuple[float, float]:
    """Exhaustive minimum of H over ``controls.grid()``.

    Ties go to the smallest grid point.
    """
    d = coeffs.dim
    X = np.asarray(x, dtype=float).reshape(1, d)
    P = np.asarray(p, dtype=float).reshape(1, d)
    A = np.asarray(A, dtype=float).reshape(1, d, d)
    grid = controls.grid()
    H = hamiltonian_table(coeffs, X, np.array([float(y)]), P, A, grid)[0]
    k = int(np.argmin(H))
    return float(H[k]), float(grid[k])


# --- finite differences --------------------------------------------------

def _second_diff(V, h, axis):
    D = np.empty_like(V)
    Vm = np.moveaxis(V, axis, 0)
    Dm = np.moveaxis(D, axis, 0)
    Dm[1:-1] = (Vm[2:] - 2.0 * Vm[1:-1] + Vm[:-2]) / (h * h)
    Dm[0] = Dm[1]
    Dm[-1] = Dm[-2]
    return D


def level_derivatives(V: np.ndarray, h) -> tuple[np.ndarray, np.ndarray]:
    """Gradient (..., d) and Hessian (..., d, d) of nodal values on one level."""
    d = V.ndim
    h = np.broadcast_to(np.asarray(h, dtype=float), (d,))
    if d == 1:
        P = np.gradient(V, h[0], edge_order=2)[..., None]
        A = _second_diff(V, h[0], 0)[..., None, None]
        return P, A
    grads = np.gradient(V, *h, edge_order=2)
    P = np.stack(grads, axis=-1)
    A = np.empty(V.shape + (d, d))
    for i in range(d):
        A[..., i, i] = _second_diff(V, h[i], i)
        for j in range(i + 1, d):
            cross = np.gradient(grads[i], h[j], axis=j, edge_order=2)
            A[..., i, j] = A[..., j, i] = cross
    return P, A


# --- value field ---------------------------------------------------------

@dataclass
class ValueField:
    grid: GridSpec
    values: np.ndarray
    source: object = None
    controls: object = None
    argmin_index: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def delta(self) -> float:
        return float(getattr(self.source, "delta", self.meta.get("delta", float("nan"))))

    # -- lookup
    def _check(self, t, x, margin):
        g = self.grid
        if not (g.t0 - 1e-12 <= t <= g.T + 1e-12):
            raise OutOfBoxError(f"t={t} outside [{g.t0}, {g.T}]")
        lo = np.array(g.x_lo) + margin * g.h - 1e-12
        hi = np.array(g.x_hi) - margin * g.h + 1e-12
        if np.any(x < lo) or np.any(x > hi):
            raise OutOfBoxError("query point outside the truncation box margin")

    def _interp(self, t, x):
        g = self.grid
        s = (t - g.t0) / g.dt
        n0 = min(max(int(math.floor(s)), 0), g.nt - 1)
        w = min(max(s - n0, 0.0), 1.0)
        v0 = _spatial_interp(self.values[n0], g, x)
        if w == 0.0:
            return v0
        v1 = _spatial_interp(self.values[n0 + 1], g, x)
        return (1.0 - w) * v0 + w * v1

    def _prep(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        return np.atleast_2d(x.reshape(-1, self.grid.d)), single

    def eval(self, t: float, x):
        X, single = self._prep(x)
        self._check(t, X, 2)
        v = self._interp(t, X)
        return float(v[0]) if single else v

    def grad(self, t: float, x):
        X, single = self._prep(x)
        self._check(t, X, 2)
        h = self.grid.h
        out = np.empty_like(X)
        for i in range(self.grid.d):
            e = np.zeros(self.grid.d)
            e[i] = h[i]
            out[:, i] = (self._interp(t, X + e) - self._interp(t, X - e)) / (2 * h[i])
        return out[0] if single else out

    def hess(self, t: float, x):
        X, single = self._prep(x)
        self._check(t, X, 2)
        d = self.grid.d
        h = self.grid.h
        out = np.empty((X.shape[0], d, d))
        v0 = self._interp(t, X)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h[i]
            out[:, i, i] = (self._interp(t, X + e) - 2 * v0 + self._interp(t, X - e)) / h[i] ** 2
            for j in range(i + 1, d):
                f = np.zeros(d)
                f[j] = h[j]
                c = (self._interp(t, X + e + f) - self._interp(t, X + e - f)
                     - self._interp(t, X - e + f) + self._interp(t, X - e - f)) / (4 * h[i] * h[j])
                out[:, i, j] = out[:, j, i] = c
        return out[0] if single else out

    def grad_bound(self) -> float:
        """Largest nodal gradient norm over all levels."""
        return float(max(np.max(np.linalg.norm(level_derivatives(v, self.grid.h)[0], axis=-1))
                         for v in self.values))

    # -- serialisation
    def to_text(self) -> str:
        g = self.grid
        head = ["hjb-field", "v1", str(g.d), str(g.nx), str(g.nt), repr(g.t0), repr(g.T)]
        head += [repr(v) for v in g.x_lo] + [repr(v) for v in g.x_hi] + [repr(self.delta)]
        lines = [" ".join(head)]
        for level in self.values:
            lines.append(" ".join(f"{v:.17g}" for v in level.reshape(-1)))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ValueField":
        lines = text.strip().splitlines()
        tok = lines[0].split()
        if tok[:2] != ["hjb-field", "v1"]:
            raise ValueError("not an hjb-field v1 file")
        d, nx, nt = int(tok[2]), int(tok[3]), int(tok[4])
        t0, T = float(tok[5]), float(tok[6])
        lo = tuple(float(v) for v in tok[7:7 + d])
        hi = tuple(float(v) for v in tok[7 + d:7 + 2 * d])
        delta = float(tok[7 + 2 * d])
        grid = GridSpec(lo, hi, nx, nt, t0, T)
        vals = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
        if vals.shape != (nt + 1, nx ** d):
            raise ValueError(f"expected {nt + 1} levels of {nx ** d} values, got {vals.shape}")
        return cls(grid, vals.reshape((nt + 1,) + (nx,) * d), meta={"delta": delta})

    @classmethod
    def load(cls, path) -> "ValueField":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_csv_rows(self):
        """(t, x..., V) rows for plotting."""
        g = self.grid
        nodes = g.nodes().reshape(-1, g.d)
        for n, t in enumerate(g.times()):
            vals = self.values[n].reshape(-1)
            for xv, v in zip(nodes, vals):
                yield (t, *xv, v)


def _spatial_interp(level, grid, X):
    """Multilinear interpolation of nodal values at points X (N, d)."""
    if grid.d == 1:
        return np.interp(X[:, 0], grid.axes()[0], level)
    h = grid.h
    lo = np.array(grid.x_lo)
    s = (X - lo) / h
    i = np.clip(np.floor(s).astype(int), 0, grid.nx - 2)
    w = np.clip(s - i, 0.0, 1.0)
    i0, i1 = i[:, 0], i[:, 1]
    w0, w1 = w[:, 0], w[:, 1]
    return ((1 - w0) * (1 - w1) * level[i0, i1] + w0 * (1 - w1) * level[i0 + 1, i1]
            + (1 - w0) * w1 * level[i0, i1 + 1] + w0 * w1 * level[i0 + 1, i1 + 1])


# --- solver --------------------------------------------------------------

def _y_range(coeffs, horizon):
    ymax = coeffs.bound_M * (1.0 + horizon)
    return np.linspace(-ymax, ymax, 9)


def cfl_rate(coeffs, grid: GridSpec, controls) -> float:
    """Sup over nodes, sampled y and controls of tr(a)/h^2 + sum|b_i|/h."""
    nodes = grid.nodes().reshape(-1, grid.d)
    stride = max(1, nodes.shape[0] // 4000)
    X = nodes[::stride]
    ys = _y_range(coeffs, grid.T - grid.t0)
    ugrid = controls.grid()
    h = grid.h
    s = coeffs.sigma(X[:, None, :], ys[None, :])
    diff = np.einsum("nyij,nyij->ny", s, s) / np.min(h) ** 2
    b = coeffs.b(X[:, None, None, :], ys[None, :, None], ugrid[None, None, :])
    drift = np.sum(np.abs(b) / h, axis=-1).max(axis=-1)
    return float(np.max(diff + drift))


def solve_hjb(coeffs, grid: GridSpec, controls=None, *, check_ellipticity: bool = True) -> ValueField:
    """Solve the HJB equation backward from ``V(T) = phi_delta``.

    ``grid.nt = None`` picks the smallest step count meeting the CFL bound.
    """
    controls = coeffs.controls if controls is None else controls
    d = grid.d
    if d != coeffs.dim:
        raise ValueError(f"grid dimension {d} != problem dimension {coeffs.dim}")
    lam = coeffs.ellipticity_lambda
    if check_ellipticity:
        nodes = grid.nodes().reshape(-1, d)
        sub = nodes[:: max(1, nodes.shape[0] // 400)]
        lam_hat = smoothed_min_ellipticity(coeffs, sub, _y_range(coeffs, grid.T - grid.t0))
        if lam_hat < 0.5 * lam:
            raise EllipticityError(f"smoothed ellipticity {lam_hat:.4g} below lambda/2 = {0.5 * lam:.4g}")
    else:
        lam_hat = float("nan")

    rate = cfl_rate(coeffs, grid, controls)
    span = grid.T - grid.t0
    required = max(1, math.ceil(span * rate / CFL_SAFETY))
    if grid.nt is None:
        grid = grid.with_nt(required)
    cfl = rate * grid.dt
    if cfl > CFL_SAFETY * (1 + 1e-12):
        raise CFLError(cfl, required)

    nodes = grid.nodes()
    shape = nodes.shape[:-1]
    X = nodes.reshape(-1, d)
    ugrid = controls.grid()
    h = grid.h
    dt = grid.dt

    values = np.empty((grid.nt + 1,) + shape)
    argmin = np.empty((grid.nt + 1,) + shape, dtype=np.int32)
    values[-1] = np.reshape(coeffs.phi(X), shape)
    for n in range(grid.nt, -1, -1):
        V = values[n]
        P, A = level_derivatives(V, h)
        H = hamiltonian_table(coeffs, X, V.reshape(-1), P.reshape(-1, d), A.reshape(-1, d, d), ugrid)
        k = np.argmin(H, axis=1)
        argmin[n] = k.reshape(shape)
        if n > 0:
            hmin = np.take_along_axis(H, k[:, None], axis=1)[:, 0]
            values[n - 1] = V + dt * hmin.reshape(shape)
    meta = {
        "cfl": cfl,
        "cfl_rate": rate,
        "boundary": "one-sided-gradient/copied-hessian",
        "ellipticity_measured": lam_hat,
        "delta": float(getattr(coeffs, "delta", float("nan"))),
    }
    return ValueField(grid, values, coeffs, controls, argmin, meta)
