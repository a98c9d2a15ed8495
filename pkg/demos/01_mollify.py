"""Smoothing a kinked function with the bump mollifier.

Run:  python3 demos/01_mollify.py
"""
import numpy as np

from coupled_fbsde.model import get_preset
from coupled_fbsde.mollify import make_kernel, smooth_coefficients, smooth_scalar

k = make_kernel(1)
print(f"1-d kernel: {k.weights.size} nodes, mass {k.weights.sum():.15f}")

# |x| is the textbook case: the gap to the original peaks at the kink
xs = np.linspace(-1, 1, 9)
for delta in (0.5, 0.1, 0.02):
    g = np.array([smooth_scalar(lambda p: np.abs(p[:, 0]), k, delta, [x]) for x in xs])
    print(f"delta={delta:<5} max gap {np.max(g - np.abs(xs)):.4f}   value at 0: {g[4]:.4f}")

# the same machinery applied to every coefficient of a preset
spec = get_preset("B2")
c = smooth_coefficients(spec, 0.1)
x = np.array([[0.3]])
y = np.array([0.2])
print("\nB2 at (x, y, u) = (0.3, 0.2, 0.5)")
print("  original driver ", spec.f(x, y, np.zeros((1, 1)), np.array([0.5]))[0])
print("  smoothed driver ", c.f(x, y, np.zeros((1, 1)), np.array([0.5]))[0])
