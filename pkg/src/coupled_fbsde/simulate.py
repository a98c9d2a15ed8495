"""Monte Carlo simulation of the controlled FBSDE.

Three routes to the backward component:

* field decoupling: ``Y = V(s, X)``, ``Z = grad V . sigma`` from a solved field;
* least-squares Monte Carlo regression on a polynomial basis in ``X``;
* Picard iteration on the decoupling field for the genuinely coupled system.

Path ``i`` always draws its Brownian increments from the stream
``SeedSequence(seed, spawn_key=(i,))``, so changing ``n_paths`` never
reshuffles existing paths.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

__all__ = [
    "SimConfig",
    "PathBundle",
    "CostEstimate",
    "RegressionError",
    "brownian_increments",
    "simulate_forward",
    "estimate_cost",
    "solve_backward_regression",
    "solve_coupled_picard",
    "bsde_residual",
    "simulate_relaxed",
    "simulate_synchronous_pair",
    "moment_statistic",
]


class RegressionError(RuntimeError):
    def __init__(self, step: int, rank: int, ncols: int):
        super().__init__(f"rank-deficient regression at step {step}: rank {rank} < {ncols} columns")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 10_000
    n_steps: int = 200
    seed: int = 0
    record_increments: bool = True

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("n_paths and n_steps must be >= 1")


@dataclass
class PathBundle:
    times: np.ndarray
    X: np.ndarray                 # (P, n+1, d)
    Y: np.ndarray                 # (P, n+1)
    Z: np.ndarray                 # (P, n+1, d)
    M: np.ndarray                 # (P, n+1)
    U: np.ndarray                 # (P, n+1) control values used on each step
    dW: np.ndarray | None = None  # (P, n, d)
    dB: np.ndarray | None = None  # (P, n) independent noise of relaxed runs
    exit_count: int = 0
    info: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def write_csv(self, path) -> None:
        P, n1, d = self.X.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t"] + [f"x{i}" for i in range(d)] + ["y"]
                       + [f"z{i}" for i in range(d)] + ["m"])
            for p in range(P):
                for k in range(n1):
                    w.writerow([p, k, f"{self.times[k]:.17g}"]
                               + [f"{v:.17g}" for v in self.X[p, k]] + [f"{self.Y[p, k]:.17g}"]
                               + [f"{v:.17g}" for v in self.Z[p, k]] + [f"{self.M[p, k]:.17g}"])


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int


# --- noise ---------------------------------------------------------------

@lru_cache(maxsize=16)
def _normals(seed: int, n_paths: int, width: int) -> np.ndarray:
    out = np.empty((n_paths, width))
    for i in range(n_paths):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        out[i] = rng.standard_normal(width)
    out.setflags(write=False)
    return out


def brownian_increments(seed: int, n_paths: int, n_steps: int, d: int, dt: float,
                        extra: bool = False):
    """Increments ``dW`` (P, n, d) and, with ``extra``, an independent ``dB`` (P, n).

    ``dW`` is drawn first from each path's stream, so it is the same with or
    without ``extra``.
    """
    width = n_steps * d + (n_steps if extra else 0)
    z = _normals(int(seed), int(n_paths), width)
    sq = np.sqrt(dt)
    dW = z[:, : n_steps * d].reshape(n_paths, n_steps, d) * sq
    dB = z[:, n_steps * d:] * sq if extra else None
    return dW, dB


# --- forward simulation --------------------------------------------------

def _box(field_):
    g = field_.grid
    lo = np.array(g.x_lo) + 2 * g.h
    hi = np.array(g.x_hi) - 2 * g.h
    return lo, hi


def _euler_x(coeffs, X, y, u, dW, dt, s=None):
    s = coeffs.sigma(X, y) if s is None else s
    b = coeffs.b(X, y, u)
    return X + b * dt + np.einsum("pij,pj->pi", s, dW), s


def _clamp(X, lo, hi, exited):
    Xc = np.clip(X, lo, hi)
    exited |= np.any(Xc != X, axis=1)
    return Xc


def _time_grid(t, T, n):
    return t + (T - t) * np.arange(n + 1) / n


def simulate_forward(coeffs, field_, control, t: float, x, cfg: SimConfig) -> PathBundle:
    """Euler-Maruyama for the decoupled forward SDE, Y and Z read off the field."""
    d = coeffs.dim
    T = field_.grid.T
    n = cfg.n_steps
    times = _time_grid(t, T, n)
    dt = (T - t) / n
    dW, _ = brownian_increments(cfg.seed, cfg.n_paths, n, d, dt)
    lo, hi = _box(field_)
    P = cfg.n_paths
    X = np.empty((P, n + 1, d))
    Y = np.empty((P, n + 1))
    Z = np.empty((P, n + 1, d))
    U = np.empty((P, n + 1))
    X[:, 0] = np.broadcast_to(np.asarray(x, dtype=float), (P, d))
    exited = np.zeros(P, dtype=bool)
    for k in range(n + 1):
        tk = times[k]
        Xk = X[:, k]
        Y[:, k] = field_.eval(tk, Xk)
        U[:, k] = control.at(tk, Xk)
        G = field_.grad(tk, Xk)
        s = coeffs.sigma(Xk, Y[:, k])
        Z[:, k] = np.einsum("pi,pij->pj", G, s)
        if k < n:
            Xn, _ = _euler_x(coeffs, Xk, Y[:, k], U[:, k], dW[:, k], dt, s)
            X[:, k + 1] = _clamp(Xn, lo, hi, exited)
    M = np.zeros((P, n + 1))
    return PathBundle(times, X, Y, Z, M, U, dW if cfg.record_increments else None,
                      exit_count=int(exited.sum()), info={"route": "field"})


# --- regression ----------------------------------------------------------

class _Fit:
    """Polynomial regression in standardised coordinates, clipped to the data range."""

    def __init__(self, X, degree):
        self.mean = X.mean(axis=0)
        self.scale = X.std(axis=0)
        self.active = self.scale > 1e-12 * (1.0 + np.abs(self.mean))
        self.lo = X.min(axis=0)
        self.hi = X.max(axis=0)
        na = int(self.active.sum())
        self.degree = degree if na else 0
        self.powers = [p for p in itertools.product(range(self.degree + 1), repeat=na)
                       if sum(p) <= self.degree]
        self.coef = None

    def basis(self, X):
        X = np.clip(X, self.lo, self.hi)
        S = ((X - self.mean) / np.where(self.active, self.scale, 1.0))[:, self.active]
        pw = [[np.ones(X.shape[0])] for _ in range(S.shape[1])]
        for i in range(S.shape[1]):
            for _ in range(self.degree):
                pw[i].append(pw[i][-1] * S[:, i])
        out = np.empty((X.shape[0], len(self.powers)))
        for j, p in enumerate(self.powers):
            col = np.ones(X.shape[0])
            for i, e in enumerate(p):
                if e:
                    col = col * pw[i][e]
            out[:, j] = col
        return out

    def __call__(self, X):
        return self.basis(X) @ self.coef


class _Projector:
    """Least squares on a fixed design matrix via one thin QR factorisation."""

    def __init__(self, B, step):
        self.Q, self.R = np.linalg.qr(B)
        diag = np.abs(np.diag(self.R))
        rank = int(np.sum(diag > 1e-10 * max(diag.max(), 1.0)))
        if rank < B.shape[1]:
            raise RegressionError(step, rank, B.shape[1])

    def coef(self, target):
        return np.linalg.solve(self.R, self.Q.T @ target)


def solve_backward_regression(coeffs, control, forward: PathBundle, basis_degree: int = 6) -> PathBundle:
    """Least-squares Monte Carlo for ``dY = -f ds + Z dW`` with ``Y_T = phi(X_T)``.

    Explicit scheme: ``Z_k = E[(Y_{k+1} - E_k Y_{k+1}) dW_k] / dt`` and
    ``Y_k = E_k[Y_{k+1} + dt f(X_k, E_k Y_{k+1}, Z_k, u_k)]``.
    """
    if forward.dW is None:
        raise ValueError("forward bundle must record increments")
    X, U, dW = forward.X, forward.U, forward.dW
    P, n1, d = X.shape
    n = n1 - 1
    dt = forward.dt
    Y = np.empty((P, n1))
    Z = np.zeros((P, n1, d))
    fits = [None] * n1
    Y[:, n] = coeffs.phi(X[:, n])
    y_next = Y[:, n]
    target = y_next
    for k in range(n - 1, -1, -1):
        fit = _Fit(X[:, k], basis_degree)
        B = fit.basis(X[:, k])
        proj = _Projector(B, k)
        ey = B @ proj.coef(y_next)
        dev = (y_next - ey)[:, None] * dW[:, k] / dt
        Zk = B @ proj.coef(dev)
        target = y_next + dt * coeffs.f(X[:, k], ey, Zk, U[:, k])
        fit.coef = proj.coef(target)
        Y[:, k] = B @ fit.coef
        Z[:, k] = Zk
        fits[k] = fit
        y_next = Y[:, k]
    Z[:, n] = Z[:, n - 1]
    y0_se = float(np.std(target, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    info = dict(forward.info)
    info.update(route="regression", fits=fits, y0=float(Y[:, 0].mean()), y0_se=y0_se,
                basis_degree=basis_degree)
    return replace(forward, Y=Y, Z=Z, M=np.zeros((P, n1)), info=info)


def _forward_with_field(coeffs, control, times, x, dW, yhat):
    P, n, d = dW.shape
    dt = float(times[1] - times[0])
    X = np.empty((P, n + 1, d))
    U = np.empty((P, n + 1))
    X[:, 0] = np.broadcast_to(np.asarray(x, dtype=float), (P, d))
    for k in range(n + 1):
        U[:, k] = control.at(times[k], X[:, k])
        if k < n:
            y = yhat(k, X[:, k])
            X[:, k + 1], _ = _euler_x(coeffs, X[:, k], y, U[:, k], dW[:, k], dt)
    return X, U


def solve_coupled_picard(spec, control, t: float, x, cfg: SimConfig, basis_degree: int = 6,
                         max_iter: int = 20, tol: float = 1e-6) -> PathBundle:
    """Picard iteration between forward simulation and backward regression.

    The working field starts as ``phi`` at every time.  Non-convergence is
    reported in ``info`` rather than raised.
    """
    d = spec.dim
    T = spec.horizon
    n = cfg.n_steps
    times = _time_grid(t, T, n)
    dW, _ = brownian_increments(cfg.seed, cfg.n_paths, n, d, (T - t) / n)
    fits = None
    history = []
    bundle = None
    converged = False
    for it in range(1, max_iter + 1):
        if fits is None:
            def yhat(k, Xk):
                return spec.phi(Xk)
        else:
            def yhat(k, Xk, fits=fits):
                return fits[k](Xk)
        X, U = _forward_with_field(spec, control, times, x, dW, yhat)
        fwd = PathBundle(times, X, np.zeros(X.shape[:2]), np.zeros_like(X), np.zeros(X.shape[:2]), U, dW)
        bundle = solve_backward_regression(spec, control, fwd, basis_degree)
        fits = bundle.info["fits"]
        history.append(bundle.info["y0"])
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
    bundle.info.update(route="picard", iterations=len(history), converged=converged,
                       history=history, increments=list(np.abs(np.diff(history))))
    if not cfg.record_increments:
        bundle = replace(bundle, dW=None)
    return bundle


def estimate_cost(coeffs, field_, control, t: float, x, cfg: SimConfig, basis_degree: int = 6,
                  max_iter: int = 20, tol: float = 1e-6) -> CostEstimate:
    """Cost ``J = Y_t``.

    A feedback control built on ``field_`` is exact by decoupling; other
    controls go through the Picard / regression route.
    """
    if control.kind == "feedback" and control.policy is not None and control.policy.field is field_:
        return CostEstimate(float(field_.eval(t, x)), 0.0, cfg.n_paths)
    b = solve_coupled_picard(coeffs, control, t, x, cfg, basis_degree, max_iter, tol)
    return CostEstimate(b.info["y0"], b.info["y0_se"], cfg.n_paths)


# --- diagnostics ---------------------------------------------------------

def bsde_residual(bundle: PathBundle, coeffs, control=None) -> tuple[float, float]:
    """Mean absolute one-step BSDE residual and the covariation sum dM dW.

    residual_k = Y_{k+1} - Y_k + f(X_k, Y_k, Z_k, u_k) dt - Z_k dW_k - dM_k
    """
    if bundle.dW is None:
        raise ValueError("bundle must record increments")
    X, Y, Z, M, U, dW = bundle.X, bundle.Y, bundle.Z, bundle.M, bundle.U, bundle.dW
    dt = bundle.dt
    n = dW.shape[1]
    total = 0.0
    for k in range(n):
        fk = coeffs.f(X[:, k], Y[:, k], Z[:, k], U[:, k])
        r = Y[:, k + 1] - Y[:, k] + fk * dt - np.einsum("pi,pi->p", Z[:, k], dW[:, k]) - (M[:, k + 1] - M[:, k])
        total += np.abs(r).sum()
    mean_abs = float(total / (n * X.shape[0]))
    dM = np.diff(M, axis=1)
    cov = np.einsum("pk,pki->i", dM, dW) / X.shape[0]
    return mean_abs, float(np.max(np.abs(cov)))


def simulate_relaxed(coeffs, field_, relaxed_policy, t: float, x, cfg: SimConfig,
                     y_source: str = "path") -> PathBundle:
    """Simulate the limit system driven by ``(u_bar, w_bar, theta_bar)``.

    ``dX = b ds + sigma dW``, ``dY = -f ds + w_bar sigma dW + theta_bar dB``
    with ``B`` independent of ``W``.  ``relaxed_policy(t, X, y)`` returns
    ``(u_bar (P,), w_bar (P, d), theta_bar (P,))``.  With
    ``y_source="field"`` the coefficients read y from the field, matching
    :func:`simulate_forward`; with ``"path"`` they use the simulated Y.
    """
    if y_source not in ("path", "field"):
        raise ValueError("y_source must be 'path' or 'field'")
    d = coeffs.dim
    T = field_.grid.T
    n = cfg.n_steps
    times = _time_grid(t, T, n)
    dt = (T - t) / n
    dW, dB = brownian_increments(cfg.seed, cfg.n_paths, n, d, dt, extra=True)
    lo, hi = _box(field_)
    P = cfg.n_paths
    X = np.empty((P, n + 1, d))
    Y = np.empty((P, n + 1))
    Z = np.empty((P, n + 1, d))
    M = np.zeros((P, n + 1))
    U = np.empty((P, n + 1))
    X[:, 0] = np.broadcast_to(np.asarray(x, dtype=float), (P, d))
    Y[:, 0] = field_.eval(t, X[0, 0])
    exited = np.zeros(P, dtype=bool)
    thetas = []
    for k in range(n + 1):
        tk = times[k]
        Xk = X[:, k]
        y = field_.eval(tk, Xk) if y_source == "field" else Y[:, k]
        u, w, theta = relaxed_policy(tk, Xk, y)
        U[:, k] = u
        s = coeffs.sigma(Xk, y)
        Z[:, k] = np.einsum("pi,pij->pj", np.asarray(w).reshape(P, d), s)
        if k == n:
            break
        theta = np.broadcast_to(np.asarray(theta, dtype=float), (P,))
        thetas.append(theta)
        Xn, _ = _euler_x(coeffs, Xk, y, U[:, k], dW[:, k], dt, s)
        X[:, k + 1] = _clamp(Xn, lo, hi, exited)
        drive = np.einsum("pi,pi->p", Z[:, k], dW[:, k])
        M[:, k + 1] = M[:, k] + theta * dB[:, k]
        Y[:, k + 1] = Y[:, k] - coeffs.f(Xk, y, Z[:, k], U[:, k]) * dt + drive + theta * dB[:, k]
    terminal_gap = float(np.mean(np.abs(Y[:, n] - coeffs.phi(X[:, n]))))
    return PathBundle(times, X, Y, Z, M, U, dW, dB, exit_count=int(exited.sum()),
                      info={"route": "relaxed", "y_source": y_source, "terminal_gap": terminal_gap,
                            "theta_max": float(np.max(thetas)) if thetas else 0.0})


def simulate_synchronous_pair(smoothed, original, field_, policy, t: float, x, cfg: SimConfig):
    """Mollified feedback system and the auxiliary system on shared noise.

    Both are forward Euler schemes for ``(X, Y)`` started at
    ``(x, V(t, x))``.  The feedback ``u = v(s, X^delta)`` and the gradient
    ``w = grad V(s, X^delta)`` are read along the mollified path and fed to
    both systems; only the coefficients differ.
    """
    d = smoothed.dim
    T = field_.grid.T
    n = cfg.n_steps
    times = _time_grid(t, T, n)
    dt = (T - t) / n
    dW, _ = brownian_increments(cfg.seed, cfg.n_paths, n, d, dt)
    lo, hi = _box(field_)
    P = cfg.n_paths
    y0 = field_.eval(t, np.asarray(x, dtype=float))
    out = []
    Xs = [np.broadcast_to(np.asarray(x, dtype=float), (P, d)).copy() for _ in range(2)]
    Ys = [np.full(P, y0) for _ in range(2)]
    hist = [([Xs[i].copy()], [Ys[i].copy()]) for i in range(2)]
    exited = np.zeros(P, dtype=bool)
    for k in range(n):
        tk = times[k]
        Xd = Xs[0]
        u = policy.lookup(tk, Xd)
        w = field_.grad(tk, Xd)
        for i, c in enumerate((smoothed, original)):
            X, Y = Xs[i], Ys[i]
            s = c.sigma(X, Y)
            z = np.einsum("pi,pij->pj", w, s)
            Xn = X + c.b(X, Y, u) * dt + np.einsum("pij,pj->pi", s, dW[:, k])
            Yn = Y - c.f(X, Y, z, u) * dt + np.einsum("pi,pi->p", z, dW[:, k])
            Xs[i] = _clamp(Xn, lo, hi, exited)
            Ys[i] = Yn
            hist[i][0].append(Xs[i].copy())
            hist[i][1].append(Yn.copy())
    for i in range(2):
        X = np.stack(hist[i][0], axis=1)
        Y = np.stack(hist[i][1], axis=1)
        out.append(PathBundle(times, X, Y, np.zeros_like(X), np.zeros_like(Y), np.zeros_like(Y), dW,
                              exit_count=int(exited.sum()), info={"route": "synchronous"}))
    return out[0], out[1]


def moment_statistic(bundle: PathBundle) -> float:
    """``E[sup|X|^2 + sup|Y|^2] + E int |Z|^2 ds``."""
    sx = np.max(np.sum(bundle.X ** 2, axis=-1), axis=1)
    sy = np.max(bundle.Y ** 2, axis=1)
    iz = np.sum(np.sum(bundle.Z[:, :-1] ** 2, axis=-1), axis=1) * bundle.dt
    return float(np.mean(sx + sy + iz))
