"""Where the first-order smoothing rate actually shows up.

For smooth coefficients a symmetric kernel errs by O(delta^2), so value
differences shrink at rate ~2. A kink is only seen at first order where
diffusion has not yet averaged it out: near the terminal time.
"""
import numpy as np

from coupled_fbsde.lab import ExperimentConfig, fit_loglog, run_value_convergence
from coupled_fbsde.model import get_preset

b2 = get_preset("B2")
kinked = b2.replace(phi=lambda x: np.minimum(np.abs(x[..., 0]), 2.0), name="B2-kinked-terminal")

probes = ((0.0, 0.0), (0.9, 0.0), (0.99, 0.0), (1.0, 0.0))
cfg = ExperimentConfig(deltas=(0.4, 0.2, 0.1, 0.05), probes=probes)
for spec in (b2, kinked):
    tab = run_value_convergence(cfg, spec=spec)
    print(spec.name)
    for p in probes:
        rows = tab.consecutive(p)
        rate = fit_loglog([r[0] for r in rows], [r[4] for r in rows])[0]
        print(f"  probe t={p[0]:<5} rate {rate:.2f}")
