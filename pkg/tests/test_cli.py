import json
import math
import subprocess
import sys

import numpy as np
import pytest

from chargesharp import experiment
from chargesharp.cli import main, parse_grid
from chargesharp.experiment import SCHEMA_VERSION, RunPlan, read_csv

FAST = ["--burnIn", "2", "--snapshotEvery", "2", "--snapshots", "2"]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_parse_grid():
    assert parse_grid("0.2:0.45:0.05") == [0.2, 0.25, 0.3, 0.35, 0.4, 0.45]
    assert len(parse_grid("0.2:0.45:0.01")) == 26
    assert parse_grid("0.1, 0.3") == [0.1, 0.3]


def test_run_is_byte_identical(tmp_path):
    args = ["run", "--L", "16", "--p", "0.1", "--trajectories", "100", "--seed", "1", *FAST]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and len(a) == 2


def test_run_independent_of_workers(tmp_path, monkeypatch):
    args = ["run", "--Ls", "6,8", "--pGrid", "0.1,0.3", "--trajectories", "23", "--batches", "5", *FAST]
    assert main(args + ["--out", str(tmp_path / "w1"), "--workers", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "w3"), "--workers", "3"]) == 0
    monkeypatch.setenv("CHARGESHARP_WORKERS", "2")
    assert main(args + ["--out", str(tmp_path / "env")]) == 0
    ref = tree_bytes(tmp_path / "w1")
    assert len(ref) == 8
    assert tree_bytes(tmp_path / "w3") == ref == tree_bytes(tmp_path / "env")


def test_run_csv_layout(tmp_path):
    assert main(["run", "--L", "8", "--p", "0.2", "--trajectories", "6", "--batches", "3", *FAST,
                 "--out", str(tmp_path)]) == 0
    comments, rows = read_csv(tmp_path / "run_L8_p0.2000.csv")
    assert "schema_version = 1" in comments
    assert "boundary = periodic" in comments and "p = 0.2" in comments
    assert set(rows[0]) == {"p", "L", "observable", "x", "estimate", "stderr", "nSamples"}
    assert {r["observable"] for r in rows} == {"cz", "zz", "cw", "vq", "z", "qvar"}
    assert all(r["nSamples"] == "6" for r in rows)
    summary = json.loads((tmp_path / "run_L8_p0.2000.json").read_text())
    assert summary["batch_counts"] == [2, 2, 2]


def test_weak_mode_run(tmp_path):
    assert main(["run", "--L", "6", "--p", "0.5", "--mode", "weak", "--gamma", "1.0", "--dt", "0.5",
                 "--trajectories", "4", "--batches", "2", *FAST, "--out", str(tmp_path)]) == 0
    comments, _ = read_csv(tmp_path / "run_L6_p0.5000.csv")
    assert "mode = weak" in comments and "gamma = 1.0" in comments


def test_resume_skips_completed_points(tmp_path, monkeypatch):
    plan = RunPlan(L=6, p=0.2, trajectories=5, batches=2, burn_in=1, snapshot_every=1, snapshots=2)
    path = experiment.run_point(plan, tmp_path)
    before = tree_bytes(tmp_path)

    def boom(*a, **k):
        raise AssertionError("completed point was recomputed")

    monkeypatch.setattr(experiment, "simulate", boom)
    experiment.run_point(plan, tmp_path)
    assert tree_bytes(tmp_path) == before
    # a different configuration is a different point
    with pytest.raises(AssertionError):
        experiment.run_point(RunPlan(L=6, p=0.2, trajectories=6, batches=2, burn_in=1, snapshot_every=1,
                                     snapshots=2), tmp_path)
    monkeypatch.undo()
    # a truncated result file is not complete and gets rewritten
    csv = path.with_suffix(".csv")
    csv.write_text(csv.read_text()[:50])
    experiment.run_point(plan, tmp_path)
    assert tree_bytes(tmp_path) == before


def test_resume_after_interrupted_sweep(tmp_path, monkeypatch):
    kw = dict(trajectories=4, batches=2, burn_in=1, snapshot_every=1, snapshots=1)
    experiment.run_sweep([6], [0.1, 0.2, 0.3], tmp_path / "full", **kw)
    calls = []
    real = experiment.simulate

    def flaky(plan, workers=1):
        calls.append(plan.p)
        if len(calls) == 2:
            raise KeyboardInterrupt
        return real(plan, workers)

    monkeypatch.setattr(experiment, "simulate", flaky)
    with pytest.raises(KeyboardInterrupt):
        experiment.run_sweep([6], [0.1, 0.2, 0.3], tmp_path / "part", **kw)
    experiment.run_sweep([6], [0.1, 0.2, 0.3], tmp_path / "part", **kw)
    assert calls == [0.1, 0.2, 0.2, 0.3]
    assert tree_bytes(tmp_path / "part") == tree_bytes(tmp_path / "full")


def test_percolation_smoke(tmp_path):
    out = tmp_path / "perc"
    assert main(["percolation", "--Ls", "16,32,64", "--pGrid", "0.2:0.45:0.01", "--realizations", "4",
                 "--out", str(out)]) == 0
    for rule in ("outcome", "measured"):
        comments, rows = read_csv(out / f"wrap_{rule}.csv")
        assert len(rows) == 3 * 26
        assert set(rows[0]) == {"p", "L", "depth", "P_wrap", "stderr", "nRealizations"}
        assert {r["depth"] for r in rows if r["L"] == "32"} == {"64"}
        report = json.loads((out / f"collapse_{rule}.json").read_text())
        assert {"argmin", "p_grid", "nu_grid", "score_surface", "crossings"} <= set(report)
    before = tree_bytes(out)
    assert main(["percolation", "--Ls", "16,32,64", "--pGrid", "0.2:0.45:0.01", "--realizations", "4",
                 "--out", str(out), "--workers", "2"]) == 0
    assert tree_bytes(out) == before


def test_percolation_worker_independence(tmp_path):
    args = ["percolation", "--Ls", "8,16", "--pGrid", "0.3,0.5", "--realizations", "30", "--rule", "structural"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_oracle_report(tmp_path, capsys):
    assert main(["oracle", "--L", "4", "--depth", "2", "--p", "0.5", "--trajectories", "3000",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "oracle_L4_d2_p0.5000.json").read_text())
    assert [r["observable"] for r in rep["rows"]] == ["E<s0>", "E<s0 s1>", "E<s0 s1>_c"]
    assert all(r["within_3sigma"] for r in rep["rows"])
    assert "exact=" in capsys.readouterr().out


def test_hydro_csv(tmp_path):
    assert main(["hydro", "--pGrid", "0.1,0.4", "--nk", "20", "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "hydro.csv")
    assert len(rows) == 40
    assert max(float(r["relErr"]) for r in rows) < 1e-8


# ---- fit

def write_fixture(root, L, p, rho, alpha=2.0, n_batches=20, seed=0):
    """A schema-valid run result whose correlators follow known laws."""
    rng = np.random.default_rng(seed)
    x = np.arange(L // 2 + 1, dtype=float)
    xs = np.maximum(x, 1)
    law = {
        "cz": np.where(x > 0, -0.1 * xs ** -alpha, 0.9),
        "zz": np.zeros_like(x),
        "cw": np.where(x > 0, xs ** (-2 * math.pi * rho), 1.0),
        "vq": np.where(x > 0, 8 * rho / math.pi * np.log(xs) + 1.0, 0.0),
        "z": np.zeros(1),
        "qvar": np.ones(1),
    }
    batches = {k: v * (1 + 0.002 * rng.standard_normal((n_batches, v.size))) for k, v in law.items()}
    means = {k: b.mean(axis=0) for k, b in batches.items()}
    plan = RunPlan(L=L, p=p, trajectories=10 * n_batches, batches=n_batches)
    rows = [(p, L, k, i, float(m), float(np.std(batches[k][:, i], ddof=1) / math.sqrt(n_batches)),
             plan.trajectories) for k in ("cz", "zz", "cw", "vq", "z", "qvar") for i, m in enumerate(means[k])]
    text = experiment._csv(experiment._run_header(plan), ["p", "L", "observable", "x", "estimate", "stderr",
                                                          "nSamples"], rows)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{plan.stem()}.csv").write_text(text)
    summary = {"config": experiment._plan_config(plan), "csv": f"{plan.stem()}.csv",
               "csv_sha256": experiment._sha(text),
               "batch_means": {k: b.tolist() for k, b in batches.items()},
               "batch_counts": [10] * n_batches}
    (root / f"{plan.stem()}.json").write_text(json.dumps(summary))
    return root / f"{plan.stem()}.json"


def test_fit_synthetic_fixtures(tmp_path, capsys):
    ps = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35]
    for p in ps:
        write_fixture(tmp_path / "runs", 40, p, rho=0.6 - p, seed=int(p * 100))
    out = tmp_path / "fit.json"
    assert main(["fit", str(tmp_path / "runs"), "--window", "2:10", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["points"]) == len(ps)
    for r in rep["points"]:
        assert abs(r["alpha"] - 2) < 0.02
        assert r["cz_sign"] == -1
        assert abs(r["rho_varq"] - (0.6 - r["p"])) < 0.01
        assert abs(r["rho_cw"] - (0.6 - r["p"])) < 0.01
        assert r["window_sensitivity"]
    th = rep["thresholds"]["40"]
    assert abs(th["p_sharp"] - (0.6 - 1 / math.pi)) < 0.01
    assert abs(th["varq_log_slope_at_p_sharp"] - 8 / math.pi ** 2) < 0.02
    assert "p_sharp" in capsys.readouterr().out


def test_fit_empty_is_no_data(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["fit", str(tmp_path / "empty")]) == 1
    assert "no data" in capsys.readouterr().err
    assert main(["fit"]) == 1


def test_fit_schema_mismatch(tmp_path, capsys):
    path = write_fixture(tmp_path, 16, 0.1, 0.5)
    summary = json.loads(path.read_text())
    summary["config"]["schema_version"] = SCHEMA_VERSION + 1
    path.write_text(json.dumps(summary))
    assert main(["fit", str(path)]) == 1
    assert "schema" in capsys.readouterr().err
    path = write_fixture(tmp_path / "t", 16, 0.1, 0.5)
    csv = path.with_suffix(".csv")
    csv.write_text(csv.read_text().replace("run", "rum"))
    assert main(["fit", str(path)]) == 1
    assert "checksum" in capsys.readouterr().err
    path = write_fixture(tmp_path / "m", 16, 0.1, 0.5)
    summary = json.loads(path.read_text())
    del summary["batch_means"]
    path.write_text(json.dumps(summary))
    assert main(["fit", str(path)]) == 1


# ---- configuration and errors

def test_config_file_defaults(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nL = 6\np = 0.25\ntrajectories = 3\nbatches = 1\nburnIn = 1\nsnapshotEvery = 1\n"
                   "snapshots = 1\n")
    assert main(["--config", str(cfg), "run", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "run_L6_p0.2500.csv").exists()
    # command-line flags override the file
    assert main(["--config", str(cfg), "run", "--p", "0.5", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "run_L6_p0.5000.csv").exists()


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nlength = 6\n")
    assert main(["--config", str(cfg), "run"]) == 2
    assert "unknown key" in capsys.readouterr().err


@pytest.mark.parametrize("args, needle", [
    (["run", "--L", "7", "--p", "0.1"], "L: must be an even integer"),
    (["run", "--L", "8"], "--p"),
    (["run", "--L", "8", "--p", "0.1", "--trajectories", "0"], ">= 1"),
    (["run", "--L", "8", "--p", "1.5", "--trajectories", "1"], "p: must lie"),
    (["run", "--L", "8", "--p", "0.1", "--mode", "weak"], "gamma"),
    (["oracle", "--L", "8"], "limited"),
    (["percolation", "--Ls", "8", "--p", "0.3", "--realizations", "0"], "realizations"),
    (["hydro", "--p", "0.1", "--kMin", "0"], "kMin"),
])
def test_errors_exit_nonzero(tmp_path, capsys, args, needle):
    assert main(args + ["--out", str(tmp_path)]) != 0
    assert needle in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "chargesharp", "hydro", "--p", "0.2", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "hydro.csv").exists()
    res = subprocess.run([sys.executable, "-m", "chargesharp", "run", "--L", "5", "--p", "0.1"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 1 and "error" in res.stderr


def test_bad_grid_fails_before_writing(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--Ls", "6,7", "--p", "0.1", "--trajectories", "2", "--out", str(out)]) == 1
    assert not out.exists()
