"""Chattering reduction: collapse a measure-valued action to one point."""
import numpy as np

from coupled_fbsde.model import get_preset
from coupled_fbsde.relaxed import DiscreteMeasure, audit_convexity, chattering_reduce

spec = get_preset("B2")

# bang-bang with equal weights: drift averages to 0 but the driver does not
mu = DiscreteMeasure([-1.0, 1.0], [[0.0], [0.0]], [0.5, 0.5])
r = chattering_reduce(mu, [0.0], 0.0, spec)
print(f"+-1 atoms:    u_bar={r.u_bar:+.2f} theta={r.theta_bar:.3f} residual={r.residual:.3f}")

# spread in w turns into an extra martingale volatility theta
mu = DiscreteMeasure([0.2, 0.2], [[0.6], [-0.6]], [0.5, 0.5])
r = chattering_reduce(mu, [0.0], 0.0, spec)
print(f"+-w spread:   w_bar={r.w_bar[0]:+.2f} theta={r.theta_bar:.3f} (|w| sigma = {0.6 * 1.0:.3f})")

rep = audit_convexity(spec, n_measures=1000, n_points=100)
print(f"\naudit over {rep.residual.size} pairs: fraction above tol {rep.fraction_exceeding:.3f}")
print("residual quantiles:", {q: round(v, 4) for q, v in rep.quantiles().items()})
print(f"min alpha {np.min(rep.alpha):.2e}")
