"""The three convergence studies at a reduced size (a couple of minutes)."""
from coupled_fbsde.lab import ExperimentConfig, run_coupling_study, run_optimality_study, run_value_convergence

cfg = ExperimentConfig(preset="B2", deltas=(0.4, 0.2, 0.1), grid_nx=121, paths=2000, steps=100)

tab = run_value_convergence(cfg)
print("value differences:")
for da, db, t, x, diff, bound in tab.consecutive((0.0, 0.0)):
    print(f"  |V^{da} - V^{db}| = {diff:.3e}   (bound {bound:.3e})")
print(f"  fitted rate {tab.rate:.2f}")

cup = run_coupling_study(cfg)
print(f"\ncoupling slopes: X {cup.slope_x:.2f}, Y {cup.slope_y:.2f}")

opt = run_optimality_study(cfg)
print(f"\nbest constant control u={opt.best_control:g}: cost {opt.best_mean:.4f} vs V {opt.value:.4f}")
