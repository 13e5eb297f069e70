import json

import pytest

from shapeoc.cli import main
from shapeoc.io import read_report


def write(path, data):
    path.write_text(json.dumps(data, indent=2))
    return str(path)


def three_landmarks(constraints=(), **extra):
    pts = [[0.0, 0.0], [1.0, 0.0], [0.3, 0.9]]
    data = {
        "name": "three",
        "q0": [{"name": "shape", "points": pts}],
        "target": [{"name": "shape", "points": [[x + 0.4, 1.1 * y] for x, y in pts]}],
        "kernels": [{"family": "gaussian", "sigma": 1.0}],
        "constraints": list(constraints),
        "options": {"steps": 10},
    }
    data.update(extra)
    return data


def test_example_emits_loadable_config(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["example", "volume-circle", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["kernels"][0]["sigma"] == 1.0
    assert main(["example", "multishape-stitched"]) == 0
    printed = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    kernels = {k["sigma"] for k in printed["kernels"]}
    assert kernels == {1.0, 0.1}
    assert all(k["family"] == "cubic" for k in printed["kernels"])


def test_run_volume_circle_deterministic(tmp_path):
    cfg = tmp_path / "v.json"
    main(["example", "volume-circle", "--out", str(cfg)])
    for name in ("a", "b"):
        assert main(["run", str(cfg), "--steps", "10", "--out", str(tmp_path / name)]) == 0
    report = read_report(tmp_path / "a" / "report.json")
    assert report["diagnostics"]["volume_drift[shape]"] < 1e-3
    assert report["steps"] == 10
    for f in ("trajectory.csv", "grid.csv", "report.json", "final_shape.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    lines = (tmp_path / "a" / "trajectory.csv").read_text().splitlines()
    assert len(lines) - 2 == 11 * 32


def test_run_stitched_keeps_pairs(tmp_path):
    cfg = tmp_path / "s.json"
    main(["example", "multishape-stitched", "--out", str(cfg)])
    assert main(["run", str(cfg), "--steps", "10", "--out", str(tmp_path / "o")]) == 0
    diag = read_report(tmp_path / "o" / "report.json")["diagnostics"]
    assert diag["pair_mismatch[shape_up]"] < 1e-6
    assert diag["pair_mismatch[shape_down]"] < 1e-6


def test_check_grad_unconstrained(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", three_landmarks())
    assert main(["check-grad", cfg]) == 0
    err = float(capsys.readouterr().out.split(":")[1].split()[0])
    assert err < 1e-4


def test_check_grad_volume(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", three_landmarks([{"type": "volume", "group": "shape"}]))
    assert main(["check-grad", cfg]) == 0
    err = float(capsys.readouterr().out.split(":")[1].split()[0])
    assert err < 1e-3


def test_check_grad_al(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", three_landmarks([{"type": "volume", "group": "shape"}],
                                                     solver="augmented_lagrangian"))
    assert main(["check-grad", cfg]) == 0
    assert float(capsys.readouterr().out.split(":")[1].split()[0]) < 1e-3


def test_check_grad_zero_momentum(tmp_path, capsys):
    data = three_landmarks(p0=[[0.0, 0.0]] * 3)
    data["target"] = data["q0"]
    cfg = write(tmp_path / "c.json", data)
    assert main(["check-grad", cfg]) == 0
    assert "n/a" in capsys.readouterr().out


def test_shoot_writes_report(tmp_path):
    cfg = write(tmp_path / "c.json", three_landmarks(p0=[[0.1, 0.0], [0.0, 0.2], [0.0, 0.0]]))
    assert main(["shoot", cfg, "--out", str(tmp_path / "o")]) == 0
    report = read_report(tmp_path / "o" / "report.json")
    assert report["energy_drift"] < 1e-6


def test_oracle_command(tmp_path, capsys):
    data = {
        "name": "one",
        "q0": [{"name": "shape", "points": [[0.0, 0.0]]}],
        "target": [{"name": "shape", "points": [[0.5, 1.0]]}],
        "kernels": [{"family": "gaussian", "sigma": 1.0}],
        "constraints": [{"type": "fixed", "rows": [[1.0, 0.0]]}],
        "options": {"steps": 4, "grad_tol": 1e-8},
    }
    cfg = write(tmp_path / "o.json", data)
    assert main(["oracle", cfg, "--grid", "7"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["max_relative_gap"] < 1e-2


def test_schema_error_exit_code(tmp_path, capsys):
    data = three_landmarks()
    del data["kernels"][0]["sigma"]
    cfg = write(tmp_path / "c.json", data)
    assert main(["run", cfg]) == 2
    assert "sigma" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.json")]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", three_landmarks(p0=[[1e12, 0.0]] * 3))
    assert main(["shoot", cfg]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_one_subcommand_required():
    with pytest.raises(SystemExit):
        main([])
