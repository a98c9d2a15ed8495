import csv

import pytest

from coupled_fbsde.cli import main


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_b2_writes_report(tmp_path, capsys):
    code, out, _ = run(["validate", "--preset", "B2", "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "validate.csv")))
    assert rows[0] == ["quantity", "declared", "empirical"]


def test_validate_failure_exit_1(capsys):
    from coupled_fbsde.model import get_preset, register_preset
    register_preset("B2-tight", lambda: get_preset("B2").replace(lipschitz_K=0.5, name="B2-tight"))
    code, _, err = run(["validate", "--preset", "B2-tight"], capsys)
    assert code == 1 and "lipschitz" in err


def test_solve_probe_uncontrolled(tmp_path, capsys):
    code, out, _ = run(["solve", "--preset", "uncontrolled-linear", "--delta", "0.1", "--probe", "0,0",
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    value = float(out.strip().split("=")[-1])
    assert abs(value) <= 5e-3
    assert (tmp_path / "field.txt").read_text().startswith("hjb-field v1")


def test_chattering_atoms(capsys):
    code, out, _ = run(["chattering", "--preset", "B2", "--atoms", "(-1,0,0.5);(1,0,0.5)", "--x", "0", "--y", "0"],
                       capsys)
    assert code == 0
    fields = dict(kv.split("=") for kv in out.split())
    assert float(fields["w_bar"]) == 0.0 and float(fields["theta_bar"]) == 0.0
    assert float(fields["residual"]) > 0.0


def test_chattering_audit_csv(tmp_path, capsys):
    code, out, _ = run(["chattering", "--preset", "B2", "--measures", "20", "--points", "5", "--out", str(tmp_path)],
                       capsys)
    assert code == 0 and (tmp_path / "audit.csv").exists()


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["solve", "--grid-nx", "many"],
    ["solve", "--preset", "nope"],
    ["solve", "--probe", "0,99"],
    ["converge", "--delta", "0.1,0.2,0.4"],
    ["chattering", "--atoms", "(1,0)"],
    ["chattering", "--atoms", "(0.5,0,0.7);(0.1,0,0.7)"],
    ["simulate", "--grid-nx", "41", "--paths", "10", "--steps", "5", "--control", "3"],
])
def test_bad_arguments_exit_3(argv, capsys, tmp_path):
    code, _, err = run(argv + ["--out", str(tmp_path)], capsys)
    assert code == 3
    assert err


def test_solver_error_exit_2(capsys):
    from coupled_fbsde.model import get_preset, register_preset
    register_preset("B1-weak", lambda: get_preset("B1").replace(ellipticity_lambda=5.0, name="B1-weak"))
    code, _, err = run(["solve", "--preset", "B1-weak", "--grid-nx", "41"], capsys)
    assert code == 2 and "ellipticity" in err


def test_config_file_flags_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset = B2\ngrid-nx = 41\nprobe = 0,0\n")
    code, out, _ = run(["solve", "--config", str(cfg), "--preset", "uncontrolled-linear"], capsys)
    assert code == 0
    assert abs(float(out.split("=")[-1])) < 1e-2


def test_simulate_and_policy(tmp_path, capsys):
    base = ["--preset", "B2", "--grid-nx", "41", "--delta", "0.3", "--paths", "50", "--steps", "10",
            "--out", str(tmp_path)]
    assert run(["policy"] + base, capsys)[0] == 0
    assert next(csv.reader(open(tmp_path / "policy.csv"))) == ["t", "x0", "u"]
    code, out, _ = run(["simulate", "--control", "0"] + base, capsys)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "cost.csv")))
    assert rows[0] == ["control", "mean", "std_error", "n_paths"] and len(rows) == 3
    assert next(csv.reader(open(tmp_path / "paths.csv")))[:3] == ["path", "step", "t"]


def test_study_commands_reproducible(tmp_path, capsys):
    base = ["--preset", "B1", "--grid-nx", "41", "--delta", "0.4,0.2,0.1", "--paths", "100", "--steps", "20"]
    for name in ("a", "b"):
        assert run(["couple"] + base + ["--out", str(tmp_path / name)], capsys)[0] == 0
        assert run(["converge"] + base + ["--out", str(tmp_path / name)], capsys)[0] == 0
    for f in ("coupling.csv", "convergence.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
