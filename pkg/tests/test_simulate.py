import csv

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from coupled_fbsde.hjb import GridSpec, solve_hjb
from coupled_fbsde.model import get_preset
from coupled_fbsde.mollify import smooth_coefficients
from coupled_fbsde.policy import AdmissibleControl
from coupled_fbsde.relaxed import relaxed_feedback
from coupled_fbsde.simulate import (PathBundle, RegressionError, SimConfig, brownian_increments, bsde_residual,
                                    estimate_cost, moment_statistic, simulate_forward, simulate_relaxed,
                                    solve_backward_regression, solve_coupled_picard)

from _support import constant_spec


@pytest.fixture(scope="module")
def flat_field():
    spec = constant_spec(name="flat")
    coeffs = smooth_coefficients(spec, 0.1)
    return spec, coeffs, solve_hjb(coeffs, GridSpec.box(nx=61))


def _spec_with(spec, **kw):
    return spec.replace(**kw)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0, 10)
    with pytest.raises(ValueError):
        SimConfig(10, 0)


def test_substreams_prefix_stable():
    a, _ = brownian_increments(5, 50, 20, 1, 0.05)
    b, _ = brownian_increments(5, 80, 20, 1, 0.05)
    assert np.array_equal(a, b[:50])
    c, dB = brownian_increments(5, 50, 20, 1, 0.05, extra=True)
    assert np.array_equal(a, c) and dB.shape == (50, 20)


def test_driftless_brownian_mean(flat_field):
    spec, coeffs, fld = flat_field
    n = 100_000
    b = simulate_forward(coeffs, fld, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(n, 20, 1))
    assert abs(b.X[:, -1, 0].mean()) <= 3 * 1.0 / np.sqrt(n)
    assert np.all(b.X[:, 0, 0] == 0.0)


def test_decoupling_at_start(linear_field):
    spec, coeffs, fld = linear_field
    b = simulate_forward(coeffs, fld, AdmissibleControl.constant(0.0), 0.2, [0.5], SimConfig(200, 40, 0))
    assert np.all(b.Y[:, 0] == fld.eval(0.2, [0.5]))
    assert np.array_equal(b.Y[:, -1], fld.eval(1.0, b.X[:, -1]))
    assert np.all(b.M == 0.0)


def test_b2_feedback_exit_and_moments(b2_field, b2_policy):
    spec, coeffs, fld = b2_field
    b = simulate_forward(coeffs, fld, AdmissibleControl.feedback(b2_policy), 0.0, [0.0], SimConfig(10_000, 100, 0))
    assert b.exit_count / b.n_paths < 0.01
    sup_x2 = np.mean(np.max(b.X[..., 0] ** 2, axis=1))
    assert np.isfinite(sup_x2) and sup_x2 <= 6.0 ** 2


def test_feedback_cost_is_field_value(b2_field, b2_policy):
    spec, coeffs, fld = b2_field
    c = estimate_cost(coeffs, fld, AdmissibleControl.feedback(b2_policy), 0.0, [0.0], SimConfig(100, 10))
    assert c.mean == fld.eval(0.0, [0.0]) and c.std_error == 0.0


def test_constant_costs_against_hjb(b1_field):
    spec, coeffs, fld = b1_field
    cfg = SimConfig(10_000, 100, 0)
    v = fld.eval(0.0, [0.0])
    c0 = estimate_cost(spec, fld, AdmissibleControl.constant(0.0), 0.0, [0.0], cfg)
    assert abs(c0.mean - v) <= 2 * c0.std_error + 1e-2
    c1 = estimate_cost(spec, fld, AdmissibleControl.constant(1.0), 0.0, [0.0], cfg)
    assert c1.mean >= v - 1e-2


def test_cost_dominance_sweep(b1_field):
    spec, coeffs, fld = b1_field
    v = fld.eval(0.0, [0.0])
    for u in (-1.0, -0.5, 0.5):
        c = estimate_cost(spec, fld, AdmissibleControl.constant(u), 0.0, [0.0], SimConfig(4000, 50, 2))
        assert c.mean >= v - (2 * c.std_error + 1e-2)


def _bundle_for(spec, fld, n=2000, steps=50, x=0.0):
    return simulate_forward(spec, fld, AdmissibleControl.constant(0.0), 0.0, [x], SimConfig(n, steps, 3))


def test_regression_constant_martingale(flat_field):
    spec, coeffs, fld = flat_field
    s = constant_spec(phi=0.4, name="flat-0.4")
    out = solve_backward_regression(s, AdmissibleControl.constant(0.0), _bundle_for(spec, fld))
    assert np.allclose(out.Y, 0.4, atol=1e-12)
    assert np.allclose(out.Z, 0.0, atol=1e-10)


def test_regression_deterministic_integrand(flat_field):
    spec, coeffs, fld = flat_field
    s = constant_spec(f=1.0, name="unit-driver")
    out = solve_backward_regression(s, AdmissibleControl.constant(0.0), _bundle_for(spec, fld))
    assert np.max(np.abs(out.Y - (1.0 - out.times)[None, :])) <= 1e-3


def test_regression_feynman_kac(linear_field):
    spec, coeffs, fld = linear_field
    b = simulate_forward(spec, fld, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(100_000, 50, 0))
    out = solve_backward_regression(spec, AdmissibleControl.constant(0.0), b, basis_degree=6)
    assert abs(out.info["y0"]) <= 1e-2
    b1 = simulate_forward(spec, fld, AdmissibleControl.constant(0.0), 0.0, [1.0], SimConfig(20_000, 50, 0))
    y1 = solve_backward_regression(spec, AdmissibleControl.constant(0.0), b1).info["y0"]
    z, w = hermegauss(64)
    assert y1 == pytest.approx(float(w @ np.tanh(1 + z)) / np.sqrt(2 * np.pi), abs=1e-2)


def test_regression_rank_deficiency_reports_step():
    times = np.linspace(0, 1, 3)
    P = 400
    X = np.zeros((P, 3, 1))
    X[:, 1, 0] = np.where(np.arange(P) % 2, 1.0, -1.0)
    X[:, 2, 0] = X[:, 1, 0]
    zeros = np.zeros((P, 3))
    b = PathBundle(times, X, zeros, np.zeros_like(X), zeros, zeros, np.zeros((P, 2, 1)))
    with pytest.raises(RegressionError) as err:
        solve_backward_regression(get_preset("B1"), AdmissibleControl.constant(0.0), b, basis_degree=6)
    assert err.value.step == 1


def test_picard_decoupled_matches_regression(linear_field):
    spec, coeffs, fld = linear_field
    cfg = SimConfig(3000, 40, 4)
    pic = solve_coupled_picard(spec, AdmissibleControl.constant(0.0), 0.0, [0.3], cfg)
    fwd = simulate_forward(spec, fld, AdmissibleControl.constant(0.0), 0.0, [0.3], cfg)
    reg = solve_backward_regression(spec, AdmissibleControl.constant(0.0), fwd)
    assert pic.info["history"][0] == pytest.approx(pic.info["history"][-1], abs=1e-12)
    assert pic.info["converged"]
    assert abs(pic.info["y0"] - reg.info["y0"]) <= 1e-6


def test_picard_b1_cross_oracle(b1_field):
    spec, coeffs, fld = b1_field
    pic = solve_coupled_picard(spec, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(10_000, 100, 0))
    assert pic.info["converged"]
    assert abs(pic.info["y0"] - fld.eval(0.0, [0.0])) <= 2e-2


def test_picard_short_horizon_contracts():
    spec = get_preset("B1").with_horizon(0.1)
    pic = solve_coupled_picard(spec, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(5000, 50, 0), tol=1e-6)
    assert pic.info["converged"] and pic.info["iterations"] <= 5
    inc = pic.info["increments"]
    assert all(b < a for a, b in zip(inc, inc[1:]))


def test_picard_nonconvergence_is_flagged():
    spec = get_preset("B1")
    pic = solve_coupled_picard(spec, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(500, 20, 0),
                               max_iter=2, tol=1e-14)
    assert not pic.info["converged"] and pic.info["iterations"] == 2


def test_strict_orthogonality_exact(b2_field, b2_policy):
    spec, coeffs, fld = b2_field
    b = simulate_forward(coeffs, fld, AdmissibleControl.feedback(b2_policy), 0.0, [0.0], SimConfig(500, 50, 0))
    res, orth = bsde_residual(b, coeffs)
    assert orth == 0.0 and res > 0.0


def test_relaxed_degenerate_matches_forward(b2_field, b2_policy):
    spec, coeffs, fld = b2_field
    cfg = SimConfig(1000, 60, 9)
    fwd = simulate_forward(coeffs, fld, AdmissibleControl.feedback(b2_policy), 0.0, [0.2], cfg)
    rel = simulate_relaxed(coeffs, fld, relaxed_feedback(b2_policy, fld), 0.0, [0.2], cfg, y_source="field")
    assert np.array_equal(fwd.X, rel.X)
    assert np.array_equal(fwd.Z, rel.Z)
    assert np.array_equal(fwd.U, rel.U)
    assert np.all(rel.M == 0.0)


def test_relaxed_theta_variance(flat_field):
    spec, coeffs, fld = flat_field
    n = 20_000

    def rule(t, X, y):
        return np.zeros(X.shape[0]), np.zeros((X.shape[0], 1)), np.full(X.shape[0], 0.5)

    b = simulate_relaxed(coeffs, fld, rule, 0.0, [0.0], SimConfig(n, 20, 0))
    var = np.var(b.Y[:, -1] - b.Y[:, 0])
    assert var == pytest.approx(0.25, rel=0.05)
    assert np.allclose(b.Y - b.Y[:, :1], b.M, atol=1e-12)
    res, orth = bsde_residual(b, coeffs)
    assert res <= 1e-12
    assert orth <= 4 * 0.5 * 1.0 / np.sqrt(n)


def test_relaxed_orthogonality_shrinks(flat_field):
    spec, coeffs, fld = flat_field

    def rule(t, X, y):
        return np.zeros(X.shape[0]), np.zeros((X.shape[0], 1)), np.full(X.shape[0], 0.5)

    small = bsde_residual(simulate_relaxed(coeffs, fld, rule, 0.0, [0.0], SimConfig(1000, 10, 0)), coeffs)[1]
    big = bsde_residual(simulate_relaxed(coeffs, fld, rule, 0.0, [0.0], SimConfig(64_000, 10, 0)), coeffs)[1]
    assert big < 0.5 * 1.0 / np.sqrt(64_000) * 4
    assert big <= max(small, 1e-3)


def test_reproducible_bundles(b2_field, b2_policy):
    spec, coeffs, fld = b2_field
    cfg = SimConfig(300, 30, 11)
    a = simulate_forward(coeffs, fld, AdmissibleControl.feedback(b2_policy), 0.0, [0.0], cfg)
    b = simulate_forward(coeffs, fld, AdmissibleControl.feedback(b2_policy), 0.0, [0.0], cfg)
    for name in ("X", "Y", "Z", "M", "U", "dW"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("which,seed", [("linear_field", 0), ("b1_field", 1), ("b2_field", 2)])
def test_a_priori_moment_bound(which, seed, request):
    spec, coeffs, fld = request.getfixturevalue(which)
    b = simulate_forward(coeffs, fld, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(2000, 50, seed))
    T, K, M = spec.horizon, spec.lipschitz_K, spec.bound_M
    # sup|X|^2 via Doob, |Y| <= M(1+T), |Z| <= |grad V| |sigma| with |grad V| <= exp(K T)
    bound = 2 * (M * T) ** 2 + 8 * M ** 2 * T + (M * (1 + T)) ** 2 + T * (M * np.exp(K * T)) ** 2
    assert moment_statistic(b) <= bound


def test_bundle_csv(tmp_path, linear_field):
    spec, coeffs, fld = linear_field
    b = simulate_forward(coeffs, fld, AdmissibleControl.constant(0.0), 0.0, [0.0], SimConfig(3, 4, 0))
    path = tmp_path / "paths.csv"
    b.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["path", "step", "t", "x0", "y", "z0", "m"]
    assert len(rows) == 1 + 3 * 5
