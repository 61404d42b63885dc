import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import gee_data, quantile_data
from raocd import combine, runtime
from raocd.data import Dataset
from raocd.errors import FingerprintError, FormatError, PartitionError, SchemaError
from raocd.models import Cox, Gee, Quantile, WorkingCorrelation
from raocd.runtime import ByKeyPlan, RandomPlan, Schema, parse_partition, partition, run_map
from raocd.solver import ShardSummary, solve_shard


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- ingestion -----------------------------------------------------------------


def test_ingest_three_rows(tmp_path):
    p = write(tmp_path, "y,x1\n1.0,2\n2.5,3\n-1,4e-1\n")
    d = runtime.ingest_csv(p, Schema(("x1",), response="y"))
    assert d.n_rows == 3 and d.names == ("(intercept)", "x1")
    np.testing.assert_array_equal(d.X[:, 1], [2.0, 3.0, 0.4])


def test_ingest_rejects_non_binary_status(tmp_path):
    p = write(tmp_path, "t,s,x\n1,1,0.1\n2,2,0.3\n3,0,0.2\n")
    with pytest.raises(SchemaError, match="line.*3"):
        runtime.ingest_csv(p, Schema(("x",), time="t", status="s"), Cox())


def test_ingest_reports_unparseable_rows(tmp_path):
    p = write(tmp_path, "y,x\n1,2\n2,abc\n3,4\n")
    with pytest.raises(SchemaError, match=r"\[3\]"):
        runtime.ingest_csv(p, Schema(("x",), response="y"))


def test_ingest_missing_column_and_empty_file(tmp_path):
    with pytest.raises(SchemaError, match="missing"):
        runtime.ingest_csv(write(tmp_path, "y,x\n1,2\n"), Schema(("z",), response="y"))
    with pytest.raises(SchemaError, match="empty"):
        runtime.ingest_csv(write(tmp_path, "", "e.csv"), Schema(("x",), response="y"))


def test_ingest_groups_clusters_by_value(tmp_path):
    p = write(tmp_path, "y,x,id\n1,1,a\n2,2,b\n3,3,a\n4,4,c\n5,5,b\n")
    d = runtime.ingest_csv(p, Schema(("x",), response="y", cluster_id="id"), Gee())
    assert d.n_units == 3
    assert sorted(len(np.flatnonzero(d.row_units() == u)) for u in range(3)) == [1, 2, 2]


def test_ingest_infers_covariates_and_drops_cox_intercept(tmp_path):
    p = write(tmp_path, "t,s,a,b\n1,1,0.1,2\n2,0,0.3,1\n")
    d = runtime.ingest_csv(p, Schema(time="t", status="s"), Cox())
    assert d.names == ("a", "b")


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    d = gee_data(rng, n_clusters=5)
    d = Dataset(X=d.X, y=d.y, cluster=d.cluster, names=("(intercept)", "x"))
    schema = Schema(("x",), response="y", cluster_id="id")
    runtime.write_csv(d, tmp_path / "o.csv", schema)
    back = runtime.ingest_csv(tmp_path / "o.csv", schema)
    assert back.X.tobytes() == d.X.tobytes() and back.y.tobytes() == d.y.tobytes()


# -- partitioning -------------------------------------------------------------


def rows(n, p=1):
    return Dataset(X=np.ones((n, p)), y=np.arange(float(n)))


def test_random_partition_sizes():
    assert [s.n_rows for s in partition(rows(100), RandomPlan(4, 1, 1))] == [25] * 4
    assert [s.n_rows for s in partition(rows(10), RandomPlan(3, 1, 1))] == [4, 3, 3]


def test_same_seed_same_membership():
    a = partition(rows(50), RandomPlan(3, 77, 1))
    b = partition(rows(50), RandomPlan(3, 77, 1))
    assert all(np.array_equal(x.y, y.y) for x, y in zip(a, b))
    c = partition(rows(50), RandomPlan(3, 78, 1))
    assert not all(np.array_equal(x.y, y.y) for x, y in zip(a, c))


def test_minimum_shard_size_default_is_ten_p():
    with pytest.raises(PartitionError):
        partition(rows(59, p=2), RandomPlan(3, 0))
    assert len(partition(rows(60, p=2), RandomPlan(3, 0))) == 3


def test_by_key_lists_small_shards():
    d = Dataset(X=np.ones((30, 1)), y=np.zeros(30), group=np.array(["a"] * 25 + ["b"] * 5))
    with pytest.raises(PartitionError, match=r"1 \(5\)"):
        partition(d, ByKeyPlan("g", min_shard_size=10))
    shards = partition(d, ByKeyPlan("g", min_shard_size=5))
    assert [s.n_rows for s in shards] == [25, 5]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**64 - 1), st.integers(40, 200), st.booleans())
def test_partition_is_a_bijection_on_units(K, seed, n_clusters, ragged):
    rng = np.random.default_rng(seed % 2**32)
    d = gee_data(rng, n_clusters=n_clusters, l=3, ragged=ragged)
    shards = partition(d, RandomPlan(K, seed, min_shard_size=1))
    labels = [set(s.cluster.tolist()) for s in shards]
    assert sum(len(x) for x in labels) == d.n_units
    assert set().union(*labels) == set(d.cluster.tolist())
    assert sum(s.n_rows for s in shards) == d.n_rows
    sizes = [len(x) for x in labels]
    assert max(sizes) - min(sizes) <= 1


def test_parse_partition():
    assert parse_partition("random:4:9") == RandomPlan(4, 9)
    assert parse_partition("by-key:site") == ByKeyPlan("site")
    for bad in ("random", "random:x:1", "shuffle:3", "random:0:1", "random:2:-1"):
        with pytest.raises(ValueError):
            parse_partition(bad)


# -- map ---------------------------------------------------------------------------


def test_run_map_captures_shard_failures():
    rng = np.random.default_rng(1)
    good = quantile_data(rng, n=100, p=2)
    X = good.X.copy()
    X[:, 1] = 1.0
    bad = Dataset(X=X, y=good.y)
    out = run_map(Quantile(0.5), [good, bad, good])
    assert [s.shard_id for s in out] == [0, 1, 2]
    assert out[1].error and "RankDeficientError" in out[1].error
    assert out[0].error is None and out[2].converged


def test_run_map_worker_count_invariance():
    rng = np.random.default_rng(2)
    d = gee_data(rng, n_clusters=400)
    shards = partition(d, RandomPlan(20, 3))
    model = Gee("identity", WorkingCorrelation("ar1"))
    a = run_map(model, shards, parallelism=1)
    b = run_map(model, shards, parallelism=4)
    assert len(b) == 20
    rec = [json.dumps(runtime.summary_to_record(s)) for s in a]
    assert rec == [json.dumps(runtime.summary_to_record(s)) for s in b]


# -- summary files -------------------------------------------------------------


def test_summary_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    sums = [solve_shard(Gee("logit", WorkingCorrelation("cs")), gee_data(rng, link="logit", n_clusters=60), shard_id=k)
            for k in range(2)]
    sums.append(ShardSummary(2, 5, np.array([0.1, 0.2]), np.eye(2) / 3, np.eye(2) / 7, sums[0].model,
                             converged=True))
    path = tmp_path / "s.ndjson"
    runtime.write_summaries(sums, path)
    back = runtime.read_summaries(path)
    for a, b in zip(sums, back):
        for attr in ("theta_hat", "S_hat", "V_hat"):
            assert getattr(a, attr).tobytes() == getattr(b, attr).tobytes()
        assert repr((a.rho_hat, a.sigma2_hat, a.final_psi_norm)) == repr((b.rho_hat, b.sigma2_hat, b.final_psi_norm))
        assert (a.shard_id, a.n_k, a.converged, a.iterations) == (b.shard_id, b.n_k, b.converged, b.iterations)
        assert a.model == b.model
    assert back[2].theta_hat.tolist() == [0.1, 0.2]


def test_failed_summary_round_trips(tmp_path):
    s = ShardSummary(4, 10, None, None, None, Cox(), error="NonIdentifiableError: no events",
                     names=("a",))
    runtime.write_summaries([s], tmp_path / "f.ndjson")
    back = runtime.read_summaries(tmp_path / "f.ndjson")[0]
    assert back.error == s.error and back.theta_hat is None


def test_empty_summary_file(tmp_path):
    (tmp_path / "e.ndjson").write_text("")
    assert runtime.read_summaries(tmp_path / "e.ndjson") == []


def test_mixed_fingerprints_read_then_refused(tmp_path):
    a = ShardSummary(0, 10, np.array([1.0]), np.eye(1), np.eye(1), Quantile(0.5), converged=True)
    b = ShardSummary(1, 10, np.array([1.0]), np.eye(1), np.eye(1), Quantile(0.25), converged=True)
    runtime.write_summaries([a, b], tmp_path / "m.ndjson")
    back = runtime.read_summaries(tmp_path / "m.ndjson")
    assert len(back) == 2
    with pytest.raises(FingerprintError):
        combine.meta_estimate(back)


def test_unsupported_version_rejected(tmp_path):
    a = ShardSummary(0, 10, np.array([1.0]), np.eye(1), np.eye(1), Quantile(0.5), converged=True)
    rec = runtime.summary_to_record(a)
    rec["format_version"] = 99
    (tmp_path / "v.ndjson").write_text(json.dumps(rec) + "\n")
    with pytest.raises(FormatError):
        runtime.read_summaries(tmp_path / "v.ndjson")
