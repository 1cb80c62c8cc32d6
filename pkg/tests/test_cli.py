import csv
import json

import numpy as np
import pytest

from hawkes_scaling import cli
from hawkes_scaling.matlin import NumericalGuardError

EXP_KERNEL = {"family": "exponential", "a": 0.5, "b": 1.0}


def run(tmp_path, command, cfg, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    out = tmp_path / f"out_{command}"
    code = cli.main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def read(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) if x not in ("True", "False") else x == "True" for x in r]
                              for r in rows[1:]], dtype=object)


def test_resolvent_matches_closed_form(tmp_path):
    code, out = run(tmp_path, "resolvent", {"kernel": EXP_KERNEL, "grid": {"delta": 0.001, "T": 5.0}})
    assert code == 0
    header, rows = read(out / "resolvent.csv")
    assert header == ["t", "R_00", "I_R_00"]
    t, r = rows[:, 0].astype(float), rows[:, 1].astype(float)
    assert np.max(np.abs(r - 0.5 * np.exp(-0.5 * t))) <= 5e-4
    _, summary = read(out / "resolvent_summary.csv")
    assert float(summary[0, 2]) <= 1e-3


def test_resolvent_zero_kernel(tmp_path):
    code, out = run(tmp_path, "resolvent", {"kernel": {"family": "zero"}, "grid": {"delta": 0.01, "T": 1.0}})
    assert code == 0
    _, rows = read(out / "resolvent.csv")
    assert not np.any(rows[:, 1:].astype(float))


def test_resolvent_near_critical_warns(tmp_path, capsys):
    cfg = {"kernel": {"family": "exponential", "a": 0.9995, "b": 1.0}, "grid": {"delta": 0.01, "T": 5.0}}
    code, out = run(tmp_path, "resolvent", cfg)
    assert code == 0
    assert "warning" in capsys.readouterr().err
    _, summary = read(out / "resolvent_summary.csv")
    assert np.isfinite(float(summary[0, 2]))


def test_csv_uses_full_precision(tmp_path):
    code, out = run(tmp_path, "resolvent", {"kernel": EXP_KERNEL, "grid": {"delta": 0.1, "T": 1.0}})
    line = (out / "resolvent.csv").read_text().splitlines()[2]
    value = line.split(",")[1]
    assert float(value) == float("%.17g" % float(value)) and len(value) >= 16


def fl_config(amplitudes, f=-0.3, paths=1500):
    return {"kernel": EXP_KERNEL, "mu": [1.0], "delta": 0.01, "paths": paths, "seed": 3,
            "cases": [{"T": 2.0, "f": f, "h_imag": a} for a in amplitudes]}


def test_fl_verify_zero_test_functions(tmp_path):
    code, out = run(tmp_path, "fl-verify", fl_config([0.0], f=0.0, paths=5))
    assert code == 0
    _, rows = read(out / "fl_verify.csv")
    assert float(rows[0, -1]) == 0.0


def test_fl_verify_amplitude_sweep(tmp_path):
    code, out = run(tmp_path, "fl-verify", fl_config([0.25, 0.5, 1.0]))
    assert code == 0
    header, rows = read(out / "fl_verify.csv")
    assert header[2:] == ["mc_mean_re", "mc_mean_im", "mc_se", "riccati_re", "riccati_im", "z_score"]
    assert rows.shape[0] == 3
    assert np.all(np.abs(rows[:, -1].astype(float)) <= 3)


def test_threads_do_not_change_results(tmp_path):
    cfg = fl_config([0.5], paths=30)
    _, out1 = run(tmp_path, "fl-verify", cfg, "--threads", "1", name="a.json")
    first = (out1 / "fl_verify.csv").read_text()
    _, out2 = run(tmp_path, "fl-verify", cfg, "--threads", "2", name="b.json")
    assert (out2 / "fl_verify.csv").read_text() == first


SCALING = {"ebf": {"family": "affine", "b": 0.5, "sigma": 1.0}, "a": 1.0, "n": [100, 1000, 10000],
           "grid": {"delta": 0.01, "T": 2.0}, "test": {"f": -0.5, "h_imag": 0.5}}


def test_scaling_study_decreasing(tmp_path):
    code, out = run(tmp_path, "scaling-study", SCALING)
    assert code == 0
    _, rows = read(out / "scaling_study.csv")
    gaps = rows[:, 2].astype(float)
    assert np.all(np.diff(gaps) < 0) and gaps[-1] <= 5e-2


def test_scaling_study_single_row_and_zero(tmp_path):
    code, out = run(tmp_path, "scaling-study", {**SCALING, "n": [100]})
    assert code == 0 and read(out / "scaling_study.csv")[1].shape[0] == 1
    code, out = run(tmp_path, "scaling-study", {**SCALING, "test": {"f": 0.0, "h_imag": 0.0}})
    assert code == 0
    assert not np.any(read(out / "scaling_study.csv")[1][:, 2].astype(float))


def test_scaling_study_rejects_inadmissible_target(tmp_path):
    code, _ = run(tmp_path, "scaling-study", {**SCALING, "ebf": {"family": "affine", "b": 0.0, "sigma": 0.0}})
    assert code == 2


ROUGH = {"scheme": "rough_cir", "alpha": 0.75, "beta": 0.0, "a": 1.0, "b": 0.5, "c": 1.0,
         "grid": {"delta": 0.01, "T": 1.0}, "paths": 400, "seed": 5, "trajectories": 2}


def test_sve_rough_cir_summary(tmp_path):
    code, out = run(tmp_path, "sve", ROUGH)
    assert code == 0
    header, rows = read(out / "sve_summary.csv")
    assert "audit_z_0" in header and "Upsilon_0" in header
    z = rows[:, header.index("audit_z_0")].astype(float)
    assert np.all(np.isfinite(z)) and abs(z[-1]) <= 4


def test_sve_seed_repeat_is_byte_identical(tmp_path):
    _, out = run(tmp_path, "sve", ROUGH, name="a.json")
    first = (out / "sve_trajectories.csv").read_bytes()
    _, out = run(tmp_path, "sve", ROUGH, name="b.json")
    assert (out / "sve_trajectories.csv").read_bytes() == first
    _, out = run(tmp_path, "sve", ROUGH, "--seed", "6", name="c.json")
    assert (out / "sve_trajectories.csv").read_bytes() != first


def test_sve_zero_noise_follows_upsilon(tmp_path):
    cfg = {"scheme": "density", "potential": "zero", "upsilon": {"form": "linear", "rate": [2.0]},
           "grid": {"delta": 0.1, "T": 1.0}, "paths": 3}
    code, out = run(tmp_path, "sve", cfg)
    assert code == 0
    _, traj = read(out / "sve_trajectories.csv")
    assert np.allclose(traj[:, 2].astype(float), 2.0 * traj[:, 1].astype(float))


def test_potential_lebesgue(tmp_path):
    cfg = {"ebf": {"family": "affine", "b": 0.0, "sigma": 1.0}, "grid": {"delta": 0.01, "T": 1.0},
           "methods": ["closed"]}
    code, out = run(tmp_path, "potential", cfg)
    assert code == 0
    _, rows = read(out / "potential.csv")
    assert np.allclose(rows[:, 1].astype(float), rows[:, 0].astype(float), atol=1e-12)


def test_potential_cross_methods_and_label(tmp_path):
    cfg = {"ebf": {"family": "affine", "b": 1.0, "sigma": 1.0}, "grid": {"delta": 0.01, "T": 2.0}}
    code, out = run(tmp_path, "potential", cfg)
    assert code == 0
    with open(out / "potential_gaps.csv") as fh:
        gaps = [float(r["sup_gap"]) for r in csv.DictReader(fh)]
    assert len(gaps) == 3 and max(gaps) <= 1e-3
    cfg["ebf"]["b"] = 0.3
    code, out = run(tmp_path, "potential", cfg)
    with open(out / "potential_criticality.csv") as fh:
        assert next(csv.DictReader(fh))["label"] == "subcritical"


def test_config_errors_name_the_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"kernel": {"family": "exponential",\n "a": }')
    assert cli.main(["resolvent", "--config", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    code, _ = run(tmp_path, "resolvent", {"kernel": EXP_KERNEL, "grid": {"delta": 0.01}})
    assert code == 2 and "grid.T" in capsys.readouterr().err
    code, _ = run(tmp_path, "resolvent", {"kernel": EXP_KERNEL, "grid": {"delta": -1.0, "T": 1.0}})
    assert code == 2 and "grid.delta" in capsys.readouterr().err
    code, _ = run(tmp_path, "sve", {**ROUGH, "paths": 0})
    assert code == 2 and "paths" in capsys.readouterr().err
    code, _ = run(tmp_path, "sve", {**ROUGH, "alpha": 0.3})
    assert code == 2 and "alpha" in capsys.readouterr().err
    code, _ = run(tmp_path, "resolvent", {"kernel": {"family": "weird"}, "grid": {"delta": 0.1, "T": 1.0}})
    assert code == 2 and "kernel" in capsys.readouterr().err


def test_numerical_guard_exit_code(tmp_path, monkeypatch):
    def boom(*args):
        raise NumericalGuardError("forced")
    monkeypatch.setitem(cli.COMMANDS, "resolvent", boom)
    code, _ = run(tmp_path, "resolvent", {})
    assert code == 3
