"""Solve the smoothed HJB equation and compare with a Gauss-Hermite oracle.

With no control and no driver the value is just E[tanh(x + W_1)].
"""
import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from coupled_fbsde.hjb import GridSpec, solve_hjb
from coupled_fbsde.model import get_preset
from coupled_fbsde.mollify import smooth_coefficients

spec = get_preset("uncontrolled-linear")
coeffs = smooth_coefficients(spec, 0.1)
fld = solve_hjb(coeffs, GridSpec.box(nx=241))
print(f"grid: nx={fld.grid.nx}, nt={fld.grid.nt}, cfl={fld.meta['cfl']:.3f}")

nodes, w = hermegauss(64)
w = w / np.sqrt(2 * np.pi)
print(f"{'x':>5} {'V(0,x)':>10} {'oracle':>10}")
for x in (-2.0, -1.0, 0.0, 0.5, 1.0, 2.0):
    print(f"{x:5.1f} {fld.eval(0.0, [x]):10.5f} {w @ np.tanh(x + nodes):10.5f}")

# a controlled problem: B2 has a genuine trade-off in u
b2 = get_preset("B2")
f2 = solve_hjb(smooth_coefficients(b2, 0.1), GridSpec.box())
print(f"\nB2: V(0,0) = {f2.eval(0.0, [0.0]):.5f}, dV/dx(0,0) = {f2.grad(0.0, [0.0])[0]:.5f}")
