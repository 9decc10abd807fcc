import csv
import json

import numpy as np
import pytest

from coherent_sets.cli import main
from coherent_sets.ensemble import load_ensemble


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def gyre_file(tmp_path):
    path = tmp_path / "gyre.csv"
    assert main(["generate", "--flow", "double-gyre", "--n", "64", "--tau", "1", "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture
def map_file(tmp_path):
    path = tmp_path / "map.csv"
    assert main(["generate", "--flow", "interval-map-3", "--n", "300", "--iters", "9", "--seed", "1", "--out", str(path)]) == 0
    return path


def test_generate_shapes(tmp_path, map_file):
    path = tmp_path / "g.csv"
    assert main(["generate", "--flow", "double-gyre", "--n", "512", "--tau", "5", "--stride", "0.1", "--seed", "1", "--out", str(path)]) == 0
    e = load_ensemble(path)
    assert e.positions.shape == (512, 51, 2)
    assert json.loads(path.with_suffix(".json").read_text())["flow"]["kind"] == "double-gyre"
    assert load_ensemble(map_file).positions.shape == (300, 10, 1)


def test_generate_invalid_flow_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--flow", "vortex", "--n", "4", "--tau", "1", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code != 0


def test_thin(tmp_path, gyre_file):
    out = tmp_path / "thin.csv"
    assert main(["thin", "--input", str(gyre_file), "--fraction", "0.8", "--seed", "2", "--out", str(out)]) == 0
    e = load_ensemble(out)
    assert e.mask.any(axis=1).all()
    assert e.mask.mean() < 0.5


def test_thin_fraction_zero_keeps_data_bytes(tmp_path, gyre_file):
    out = tmp_path / "same.csv"
    assert main(["thin", "--input", str(gyre_file), "--fraction", "0", "--out", str(out)]) == 0
    assert out.read_bytes() == gyre_file.read_bytes()


def test_thin_fraction_one_rejected(tmp_path, gyre_file, capsys):
    out = tmp_path / "none.csv"
    assert main(["thin", "--input", str(gyre_file), "--fraction", "1.0", "--out", str(out)]) == 1
    assert not out.exists()
    assert capsys.readouterr().err.strip().startswith("error:")


def test_cluster_outputs_and_determinism(tmp_path, map_file):
    args = ["cluster", "--input", str(map_file), "--k", "3", "--m", "1.1", "--geometry", "circle", "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("memberships.csv", "centers.csv", "objective.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_rows(tmp_path / "a" / "memberships.csv")
    assert rows[0] == ["trajectory_id", "k", "u"]
    u = np.array([float(r[2]) for r in rows[1:]]).reshape(300, 3)
    np.testing.assert_allclose(u.sum(axis=1), 1.0, atol=1e-12)
    assert np.mean(u.max(axis=1) > 0.95) > 0.9
    centers = read_rows(tmp_path / "a" / "centers.csv")
    assert centers[0] == ["k", "t", "c0", "defined"]
    assert len(centers) == 1 + 3 * 10
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["K"] == 3 and manifest["geometry"]["kind"] == "circle"


def test_cluster_circle_rejects_planar_data(tmp_path, gyre_file, capsys):
    out = tmp_path / "run"
    assert main(["cluster", "--input", str(gyre_file), "--geometry", "circle", "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "d=1" in err and len(err.strip().splitlines()) == 1
    assert not (out / "memberships.csv").exists()


def test_run_seed_environment(tmp_path, gyre_file, monkeypatch):
    base = ["cluster", "--input", str(gyre_file)]
    monkeypatch.setenv("RUN_SEED", "7")
    assert main(base + ["--out", str(tmp_path / "env")]) == 0
    assert main(base + ["--seed", "7", "--out", str(tmp_path / "flag")]) == 0
    assert main(base + ["--seed", "3", "--out", str(tmp_path / "override")]) == 0
    env = (tmp_path / "env" / "memberships.csv").read_bytes()
    assert env == (tmp_path / "flag" / "memberships.csv").read_bytes()
    assert env != (tmp_path / "override" / "memberships.csv").read_bytes()
    assert json.loads((tmp_path / "override" / "manifest.json").read_text())["config"]["seed"] == 3


def test_manifest_rerun_reproduces(tmp_path, gyre_file):
    assert main(["cluster", "--input", str(gyre_file), "--k", "2", "--seed", "4", "--restarts", "2", "--out", str(tmp_path / "a")]) == 0
    assert main(["cluster", "--from-manifest", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    ua = np.array([float(r[2]) for r in read_rows(tmp_path / "a" / "memberships.csv")[1:]])
    ub = np.array([float(r[2]) for r in read_rows(tmp_path / "b" / "memberships.csv")[1:]])
    np.testing.assert_allclose(ua, ub, atol=1e-12)


def test_diagnose(tmp_path, map_file):
    run = tmp_path / "run"
    assert main(["cluster", "--input", str(map_file), "--k", "3", "--m", "1.1", "--geometry", "circle", "--restarts", "3", "--out", str(run)]) == 0
    assert main(["diagnose", "--input-run", str(run)]) == 0
    h = np.array([float(r[1]) for r in read_rows(run / "entropy.csv")[1:]])
    assert h.shape == (300,) and np.all((h >= 0) & (h <= 1))
    labels = read_rows(run / "labels.csv")
    assert labels[0] == ["trajectory_id", "label"]
    collapse = json.loads((run / "collapse.json").read_text())
    assert collapse["pairs"] == [] and collapse["ratio"] == 0.05
    summary = json.loads((run / "summary.json").read_text())
    assert len(summary["ml_trajectories"]) == 3


def test_diagnose_uniform_and_one_hot_entropy(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("id,t,c0\na,0,0\nb,0,0\n")
    run = tmp_path / "run"
    assert main(["cluster", "--input", str(path), "--k", "2", "--out", str(run)]) == 0
    # overwrite memberships to uniform, then to one-hot
    (run / "memberships.csv").write_text("trajectory_id,k,u\na,0,0.5\na,1,0.5\nb,0,0.5\nb,1,0.5\n")
    assert main(["diagnose", "--input-run", str(run)]) == 0
    assert [r[1] for r in read_rows(run / "entropy.csv")[1:]] == ["1", "1"]
    (run / "memberships.csv").write_text("trajectory_id,k,u\na,0,1\na,1,0\nb,0,0\nb,1,1\n")
    assert main(["diagnose", "--input-run", str(run)]) == 0
    assert [r[1] for r in read_rows(run / "entropy.csv")[1:]] == ["0", "0"]


def test_sweep_m_duplicates(tmp_path, gyre_file):
    out = tmp_path / "m.csv"
    assert main(["sweep", "--input", str(gyre_file), "--vary", "m", "--values", "2.0,2.0", "--out", str(out)]) == 0
    rows = read_rows(out)
    header, body = rows[0], rows[1:]
    drift = header.index("drift")
    assert len(body) == 4
    assert all(r[drift] == "" for r in body[:2])
    assert all(float(r[drift]) == 0.0 for r in body[2:])


def test_sweep_single_k(tmp_path, gyre_file):
    out = tmp_path / "k.csv"
    assert main(["sweep", "--input", str(gyre_file), "--vary", "k", "--values", "2", "--confidence", "0.8", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 2 and "count_u_gt_0.8" in rows[0]


def test_missing_input_is_one_line_error(tmp_path, capsys):
    assert main(["cluster", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "r")]) == 1
    assert len(capsys.readouterr().err.strip().splitlines()) == 1
