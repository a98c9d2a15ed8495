import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from coupled_fbsde.hjb import (CFLError, EllipticityError, GridSpec, OutOfBoxError, ValueField, hamiltonian,
                               min_hamiltonian, solve_hjb)
from coupled_fbsde.model import ControlSet, get_preset
from coupled_fbsde.mollify import smooth_coefficients

from _support import constant_spec

NODES, WEIGHTS = hermegauss(64)
WEIGHTS = WEIGHTS / np.sqrt(2 * np.pi)


def gauss_expect(g):
    """E[g(N)] for a standard normal N, 64-node Gauss-Hermite."""
    return float(WEIGHTS @ g(NODES))


def test_pure_trace_hamiltonian():
    spec = constant_spec()
    for x, y, p, u in [(0.0, 0.0, 0.0, 0.0), (1.3, -0.4, 2.0, 0.0)]:
        assert hamiltonian(spec, [x], y, [p], [[2.0]], u) == pytest.approx(1.0)


def test_b2_hamiltonian_hand_value():
    assert hamiltonian(get_preset("B2"), [0.0], 0.0, [0.0], [[0.0]], 0.5) == pytest.approx(0.125, abs=1e-15)


def test_b2_argmin_bang():
    spec = get_preset("B2")
    _, u = min_hamiltonian(spec, [0.0], 0.0, [1.0], [[0.0]], spec.controls)
    assert u == -1.0


def test_tie_break_smallest():
    spec = get_preset("uncontrolled-linear")
    c = smooth_coefficients(spec, 0.1)
    assert min_hamiltonian(c, [0.3], 0.1, [0.2], [[1.0]], spec.controls)[1] == 0.0
    flat = ControlSet.interval(-1, 1, 5)
    assert min_hamiltonian(c, [0.3], 0.1, [0.2], [[1.0]], flat)[1] == -1.0


@pytest.mark.parametrize("x,y,p,A", [(0.0, 0.0, 0.0, 0.0), (1.0, -0.5, 2.0, 1.0), (-2.0, 1.0, -3.0, -0.5)])
def test_b1_argmin_zero(x, y, p, A):
    spec = get_preset("B1")
    c = smooth_coefficients(spec, 0.1)
    _, u = min_hamiltonian(c, [x], y, [p], [[A]], spec.controls)
    dense = ControlSet.interval(-1, 1, 2001)
    _, ud = min_hamiltonian(c, [x], y, [p], [[A]], dense)
    assert abs(u - ud) <= spec.controls.cell


def test_b2_argmin_near_minus_half():
    spec = get_preset("B2")
    c = smooth_coefficients(spec, 0.05)
    _, u = min_hamiltonian(c, [0.0], 0.0, [0.5], [[0.0]], spec.controls)
    assert abs(u + 0.5) <= spec.controls.cell


def test_constant_terminal_is_preserved():
    spec = constant_spec(phi=0.7, name="const-0.7")
    fld = solve_hjb(smooth_coefficients(spec, 0.1), GridSpec.box(nx=61))
    assert np.allclose(fld.values, 0.7, atol=1e-12, rtol=0)


def test_cfl_violation_reports_required_nt():
    c = smooth_coefficients(get_preset("uncontrolled-linear"), 0.1)
    with pytest.raises(CFLError) as err:
        solve_hjb(c, GridSpec.box(nx=241, nt=10))
    assert err.value.required_nt > 10
    fld = solve_hjb(c, GridSpec.box(nx=241, nt=err.value.required_nt))
    assert fld.meta["cfl"] <= 0.9


def test_ellipticity_gate():
    spec = constant_spec(s=0.1, name="weak-noise").replace(ellipticity_lambda=1.0)
    with pytest.raises(EllipticityError):
        solve_hjb(smooth_coefficients(spec, 0.1), GridSpec.box(nx=31))


def test_feynman_kac_oracle(linear_field):
    _, coeffs, fld = linear_field
    assert abs(fld.eval(0.0, [0.0])) <= 5e-3
    assert fld.eval(0.0, [1.0]) == pytest.approx(gauss_expect(lambda z: np.tanh(1 + z)), abs=1e-2)
    assert fld.grad(0.0, [0.0])[0] == pytest.approx(gauss_expect(lambda z: 1 / np.cosh(z) ** 2), abs=1e-2)


def test_feynman_kac_interior_profile(linear_field):
    _, _, fld = linear_field
    for x in np.linspace(-3, 3, 13):
        assert fld.eval(0.0, [x]) == pytest.approx(gauss_expect(lambda z: np.tanh(x + z)), abs=1e-2)


def test_terminal_consistency(b2_field):
    _, coeffs, fld = b2_field
    nodes = fld.grid.nodes().reshape(-1, 1)
    assert np.array_equal(fld.values[-1], coeffs.phi(nodes))


@pytest.mark.parametrize("which", ["linear_field", "b1_field", "b2_field"])
def test_a_priori_bound(which, request):
    spec, _, fld = request.getfixturevalue(which)
    assert np.max(np.abs(fld.values)) <= spec.bound_M * (1 + spec.horizon)
    # sharper: ||phi|| + T ||f|| with the preset drivers' sup norms
    assert fld.meta["cfl"] <= 0.9


def test_synthetic_linear_field_derivatives():
    g = GridSpec.box(nx=41, nt=2)
    vals = np.broadcast_to(g.axes()[0], (3, 41)).copy()
    fld = ValueField(g, vals)
    for x in (-4.1, 0.0, 2.7):
        assert fld.grad(0.5, [x])[0] == pytest.approx(1.0, abs=1e-8)
        assert fld.hess(0.5, [x])[0, 0] == pytest.approx(0.0, abs=1e-8)
        assert fld.eval(0.25, [x]) == pytest.approx(x, abs=1e-12)


def test_constant_field_derivatives():
    g = GridSpec.box(nx=21, nt=3)
    fld = ValueField(g, np.full((4, 21), 2.5))
    assert fld.eval(0.3, [1.0]) == 2.5
    assert fld.grad(0.3, [1.0])[0] == 0.0
    assert fld.hess(0.3, [1.0])[0, 0] == 0.0


def test_out_of_box_query(linear_field):
    _, _, fld = linear_field
    with pytest.raises(OutOfBoxError):
        fld.eval(0.0, [5.99])
    with pytest.raises(OutOfBoxError):
        fld.eval(1.5, [0.0])


def test_serialisation_round_trip(tmp_path, linear_field):
    _, _, fld = linear_field
    path = tmp_path / "field.txt"
    fld.save(path)
    back = ValueField.load(path)
    assert back.grid == fld.grid
    assert np.array_equal(back.values, fld.values)
    assert back.delta == pytest.approx(0.1)
    assert path.read_text().splitlines()[0].startswith("hjb-field v1 1 241")


def test_csv_rows(linear_field):
    _, _, fld = linear_field
    rows = list(fld.to_csv_rows())
    assert len(rows) == fld.values.size
    assert rows[-1][-1] == fld.values[-1, -1]


def test_control_refinement_monotone():
    spec = get_preset("B2")
    c = smooth_coefficients(spec, 0.2)
    g = GridSpec.box(nx=61)
    coarse = solve_hjb(c, g, ControlSet.interval(-1, 1, 5))
    fine = solve_hjb(c, g, ControlSet.interval(-1, 1, 9))
    assert coarse.grid.nt == fine.grid.nt
    assert np.all(fine.values <= coarse.values + 1e-15)


def test_comparison_small_grid():
    spec = get_preset("B2")
    g = GridSpec.box(nx=61)
    v1 = solve_hjb(smooth_coefficients(spec, 0.2), g).values
    v2 = solve_hjb(smooth_coefficients(spec.shifted_driver(0.05), 0.2), g).values
    assert np.all(v1 <= v2)
