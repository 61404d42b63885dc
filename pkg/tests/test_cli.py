import csv
import json

import numpy as np
import pytest

from conftest import gee_data
from raocd import cli


def write_gee_csv(path, seed=0, n_clusters=120):
    d = gee_data(np.random.default_rng(seed), n_clusters=n_clusters, l=4)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "id"])
        for i in range(d.n_rows):
            w.writerow([repr(float(d.X[i, 1])), repr(float(d.y[i])), int(d.cluster[i])])
    return path


def write_quantile_csv(path, seed=0, n=400):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = 1 + x + rng.standard_normal(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in zip(x, y)])
    return path


GEE_SCHEMA = '{"response": "y", "cluster_id": "id"}'
GEE = ["--model", "gee", "--corr", "ar1", "--schema", GEE_SCHEMA]


def run(argv):
    return cli.main([str(a) for a in argv])


def test_fit_equals_map_then_reduce(tmp_path):
    data = write_gee_csv(tmp_path / "g.csv")
    part = ["--partition", "random:4:11"]
    assert run(["fit", *GEE, "--data", data, *part, "--out", tmp_path / "fit.json"]) == 0
    assert run(["map", *GEE, "--data", data, *part, "--out", tmp_path / "s.ndjson",
                "--export-shards", tmp_path / "shards"]) == 0
    assert run(["reduce", "--summaries", tmp_path / "s.ndjson", "--schema", GEE_SCHEMA,
                "--data", data, *part, "--out", tmp_path / "r1.json"]) == 0
    # per-shard files mapped and reduced independently
    files, pairs = [], []
    for k in range(4):
        shard = tmp_path / "shards" / f"shard_{k}.csv"
        out = tmp_path / f"s{k}.ndjson"
        assert run(["map", *GEE, "--data", shard, "--shard-id", k, "--out", out]) == 0
        files.append(out)
        pairs.append(f"{k}={shard}")
    assert run(["reduce", "--summaries", *files, "--shard-data", *pairs, "--schema", GEE_SCHEMA,
                "--out", tmp_path / "r2.json"]) == 0
    fit = (tmp_path / "fit.json").read_bytes()
    assert fit == (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


def test_fit_single_shard_and_with_full(tmp_path):
    data = write_gee_csv(tmp_path / "g.csv")
    assert run(["fit", *GEE, "--data", data, "--partition", "random:1:0", "--with-full",
                "--out", tmp_path / "f.json"]) == 0
    rep = json.loads((tmp_path / "f.json").read_text())
    np.testing.assert_allclose(rep["theta_rcd"], rep["theta_wcd"], atol=1e-8)
    np.testing.assert_allclose(rep["theta_rcd"], rep["theta_full"], atol=1e-8)
    assert len(rep["p_values"]) == 2 and rep["format_version"] == 1


def test_reduce_without_data_gives_wald_only(tmp_path, capsys):
    data = write_quantile_csv(tmp_path / "q.csv")
    assert run(["map", "--model", "quantile", "--tau", 0.5, "--data", data, "--schema",
                '{"response": "y"}', "--out", tmp_path / "s.ndjson"]) == 0
    assert run(["reduce", "--summaries", tmp_path / "s.ndjson"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["theta_rcd"] is None and rep["K"] == 1


def test_reduce_refuses_mixed_tau(tmp_path, capsys):
    data = write_quantile_csv(tmp_path / "q.csv")
    for tau, name in ((0.5, "a"), (0.25, "b")):
        assert run(["map", "--model", "quantile", "--tau", tau, "--data", data, "--schema",
                    '{"response": "y"}', "--shard-id", int(tau * 4), "--out", tmp_path / f"{name}.ndjson"]) == 0
    code = run(["reduce", "--summaries", tmp_path / "a.ndjson", tmp_path / "b.ndjson"])
    assert code == cli.EXIT_DATA
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FingerprintError"


def test_exit_codes(tmp_path, capsys):
    data = write_gee_csv(tmp_path / "g.csv")
    with pytest.raises(SystemExit) as info:
        run(["fit", "--model", "gee"])
    assert info.value.code == 2
    assert run(["fit", "--model", "quantile", "--data", data, "--schema", GEE_SCHEMA,
                "--partition", "random:2:0"]) == cli.EXIT_USAGE
    assert run(["fit", *GEE, "--data", tmp_path / "missing.csv", "--partition", "random:2:0"]) == cli.EXIT_DATA
    assert run(["fit", *GEE, "--data", data, "--partition", "random:100:0"]) == cli.EXIT_DATA
    assert run(["fit", *GEE, "--data", data, "--partition", "bogus"]) == cli.EXIT_USAGE
    # a shard whose covariate is constant is rank deficient; with one shard nothing is left
    (tmp_path / "c.csv").write_text("x,y\n" + "".join(f"1,{i % 3}\n" for i in range(40)))
    assert run(["fit", "--model", "quantile", "--tau", 0.5, "--data", tmp_path / "c.csv",
                "--schema", '{"response": "y"}', "--partition", "random:1:0"]) == cli.EXIT_NUMERICAL
    lines = [json.loads(l) for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    assert len(lines) == 5
    assert all({"error", "message", "exit_code"} <= set(l) for l in lines)
    assert lines[-1]["error"] == "CombinationError" and "RankDeficientError" in lines[-1]["message"]



def test_simulate_smoke_and_repeatable(tmp_path):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"type": "GeeHomog", "n": 300, "K": 3}))
    for out in ("a", "b"):
        assert run(["simulate", "--scenario", scen, "--reps", 2, "--seed", 4, "--out", tmp_path / out]) == 0
    for name in ("metrics.csv", "metrics.txt", "metrics.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["reps"] == 2 and "scenario_sha256" in manifest
    assert json.loads((tmp_path / "a" / "metrics.json").read_text())["reps"] == 2


def test_simulate_rejects_bad_scenario(tmp_path):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"type": "GeeHomog", "rho": 2.0}))
    assert run(["simulate", "--scenario", scen, "--reps", 2, "--out", tmp_path / "o"]) == cli.EXIT_DATA


def test_report_renders_fit_and_metrics(tmp_path, capsys):
    data = write_gee_csv(tmp_path / "g.csv")
    run(["fit", *GEE, "--data", data, "--partition", "random:2:0", "--out", tmp_path / "f.json"])
    assert run(["report", "--input", tmp_path / "f.json"]) == 0
    assert "(intercept)" in capsys.readouterr().out
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"type": "GeeHomog", "n": 300, "K": 3}))
    run(["simulate", "--scenario", scen, "--reps", 2, "--out", tmp_path / "o"])
    capsys.readouterr()
    assert run(["report", "--input", tmp_path / "o" / "metrics.json", "--format", "csv"]) == 0
    assert capsys.readouterr().out == (tmp_path / "o" / "metrics.csv").read_text()
