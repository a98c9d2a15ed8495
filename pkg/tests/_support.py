import numpy as np

from coupled_fbsde.hjb import GridSpec
from coupled_fbsde.lab import solve_field
from coupled_fbsde.model import ControlSet, ProblemSpec, get_preset


def solved(name, delta=0.1, grid=None):
    spec = get_preset(name)
    coeffs, fld = solve_field(spec, delta, grid or GridSpec.box())
    return spec, coeffs, fld


def constant_spec(b=0.0, s=1.0, f=0.0, phi=0.0, horizon=1.0, name="constant"):
    """Problem whose coefficients are all constants (in 1-d)."""

    def lead(x, y, *rest):
        shapes = [np.shape(x)[:-1], np.shape(y)] + [np.shape(r) for r in rest]
        return np.broadcast_shapes(*shapes)

    return ProblemSpec(
        dim=1, horizon=horizon,
        b=lambda x, y, u: np.full(lead(x, y, u) + (1,), b),
        sigma=lambda x, y: np.full(lead(x, y) + (1, 1), s),
        f=lambda x, y, z, u: np.full(lead(x, y, u, np.empty(np.shape(z)[:-1])), f),
        phi=lambda x: np.full(np.shape(x)[:-1], phi),
        lipschitz_K=1.0, ellipticity_lambda=(s * s) or 1.0, bound_M=max(1.0, abs(b), abs(s), abs(f), abs(phi)),
        controls=ControlSet.finite([0.0]), name=name,
    )
