"""Read off the optimal feedback from a solved value field."""
import numpy as np

from coupled_fbsde.hjb import GridSpec, solve_hjb
from coupled_fbsde.model import get_preset
from coupled_fbsde.mollify import smooth_coefficients
from coupled_fbsde.policy import AdmissibleControl, extract_policy

spec = get_preset("B2")
coeffs = smooth_coefficients(spec, 0.1)
fld = solve_hjb(coeffs, GridSpec.box(nx=121))
pol = extract_policy(fld, coeffs, spec.controls)

xs = np.linspace(-3, 3, 7)[:, None]
for t in (0.0, 0.5, 0.99):
    print(f"t={t:<4}  u*(t, x) =", " ".join(f"{u:+.1f}" for u in pol.lookup(t, xs)))

# the table is an ordinary feedback control usable by the simulators
fb = AdmissibleControl.feedback(pol)
print("\ncontrol:", fb.describe(), " in U:", fb.in_set(spec.controls))
