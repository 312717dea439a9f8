import hashlib
import json

import pytest

from cascadelab.cli import main
from cascadelab.model import GridSpec, load_preset, preset_names


@pytest.fixture
def small_config_path(tmp_path):
    c = load_preset("default").with_grid(GridSpec.aligned(24, 20, 0.4, 1.0))
    path = tmp_path / "small.json"
    path.write_text(c.to_json())
    return path


@pytest.fixture
def run(capsys, caplog):
    def _run(*argv):
        caplog.clear()
        code = main(list(argv))
        return code, capsys.readouterr().out, caplog.text

    return _run


@pytest.mark.parametrize("name", preset_names())
def test_validate_exit_codes(run, tmp_path, name):
    path = tmp_path / f"{name}.json"
    path.write_text(load_preset(name).to_json())
    code, out, _ = run("validate", "--config", str(path), "--out", str(tmp_path / "o"))
    body = json.loads(out)
    if name.startswith("mutant_"):
        assert code == 1 and len(body["failed_clauses"]) == 1
    else:
        assert code == 0 and body["passed"]


def test_validate_repo_preset_file(run, tmp_path):
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "presets" / "power_half.json"
    code, out, _ = run("validate", "--config", str(path), "--out", str(tmp_path))
    assert code == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config_sha256"] == hashlib.sha256(path.read_bytes()).hexdigest()


def test_malformed_json_exit_2(run, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    code, out, err = run("validate", "--config", str(bad), "--out", str(tmp_path))
    assert code == 2 and out == "" and "malformed" in err


def test_unknown_flag_exit_2(run):
    code, _, _ = run("simulate", "--bogus")
    assert code == 2


def test_simulate_deterministic(run, tmp_path, small_config_path):
    outs = []
    for tag in ("a", "b"):
        code, stdout, _ = run("simulate", "--config", str(small_config_path), "--out", str(tmp_path / tag))
        assert code == 0
        outs.append(stdout)
    assert outs[0] == outs[1]
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for name in man["outputs"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads(outs[0])["terminal_mass_target"]["total"] > 0


def test_simulate_zero_data(run, tmp_path, small_config_path):
    code, out, _ = run("simulate", "--config", str(small_config_path), "--preset", "zero",
                       "--slices", "all", "--out", str(tmp_path))
    assert code == 0
    body = json.loads(out)
    assert body["terminal_mass_target"]["total"] == 0.0
    for f in (tmp_path / "slices").iterdir():
        rows = f.read_text().splitlines()[1:]
        assert all(float(r.split(",")[3]) == 0.0 and float(r.split(",")[4]) == 0.0 for r in rows)


def test_control_then_simulate_roundtrip(run, tmp_path, small_config_path):
    code, out, _ = run("control", "--config", str(small_config_path), "--epsilon", "1e-3",
                       "--out", str(tmp_path / "c"))
    assert code == 0
    body = json.loads(out)
    assert body["converged"] and body["residuals"]["total"] < body["baseline"]["total"]
    code, out, _ = run("simulate", "--config", str(small_config_path), "--control",
                       str(tmp_path / "c" / "control.csv"), "--out", str(tmp_path / "s"))
    sim = json.loads(out)
    assert sim["terminal_mass_target"]["total"] == pytest.approx(body["residuals"]["total"], rel=1e-9)


def test_control_zero_data(run, tmp_path, small_config_path):
    code, out, _ = run("control", "--config", str(small_config_path), "--preset", "zero",
                       "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["iterations"] == 0


def test_control_sweep_monotone(run, tmp_path, small_config_path):
    code, out, _ = run("control", "--config", str(small_config_path), "--sweep", "1e-1,1e-2,1e-3",
                       "--out", str(tmp_path))
    body = json.loads(out)
    res = [r["residual_y"] + r["residual_p"] for r in body["rows"]]
    assert code == 0 and all(b <= a for a, b in zip(res, res[1:]))
    assert (tmp_path / "sweep.csv").exists()


def test_control_nonconverged_exit_1(run, tmp_path, small_config_path):
    code, _, _ = run("control", "--config", str(small_config_path), "--tol", "1e-15",
                     "--max-iter", "1", "--out", str(tmp_path))
    assert code == 1


def test_certify_s_grid_too_small(run, tmp_path):
    code, out, err = run("certify", "--s-grid", "1e-2:1e3:1", "--out", str(tmp_path))
    assert code == 2 and "s-grid too small" in err and out == ""


def test_certify_seeded_identical(run, tmp_path, small_config_path):
    args = ["certify", "--config", str(small_config_path), "--variants", "omega_2_49,hardy",
            "--s-grid", "1e-9:1e-6:8", "--draws", "2", "--seed", "5"]
    _, a, _ = run(*args, "--out", str(tmp_path / "a"))
    _, b, _ = run(*args, "--out", str(tmp_path / "b"))
    assert a == b
    body = json.loads(a)
    assert set(body["reports"]) == {"omega_2_49", "hardy"}
    assert (tmp_path / "a" / "scan_omega_2_49.csv").read_text() == (tmp_path / "b" / "scan_omega_2_49.csv").read_text()


def test_certify_unknown_variant(run, tmp_path):
    code, _, err = run("certify", "--variants", "nope", "--out", str(tmp_path))
    assert code == 2 and "unknown variants" in err


def test_manifest_lists_existing_files(run, tmp_path, small_config_path):
    run("simulate", "--config", str(small_config_path), "--out", str(tmp_path))
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["seed"] == 0
    assert man["config_sha256"] == hashlib.sha256(small_config_path.read_bytes()).hexdigest()
    assert all((tmp_path / f).exists() for f in man["outputs"])
