"""Ingestion, partitioning, parallel map execution and summary files.

Random partitions use numpy's Philox counter-based generator seeded with the
plan's 64-bit seed, so shard membership is reproducible across platforms.
Summary files are newline-delimited JSON, one record per shard.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from . import models
from .data import Dataset
from .errors import FingerprintError, FormatError, PartitionError, RaoCDError, SchemaError
from .models import Cox, Gee, ModelSpec
from .solver import ShardSummary, SolverConfig, solve_shard

log = logging.getLogger(__name__)

SUMMARY_FORMAT_VERSION = 1
INTERCEPT = "(intercept)"


# --------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class Schema:
    """Column roles.  ``covariates`` lists design columns in order."""

    covariates: tuple = ()
    response: Optional[str] = None
    cluster_id: Optional[str] = None
    time: Optional[str] = None
    status: Optional[str] = None
    group: Optional[str] = None
    intercept: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        known = {"covariates", "response", "cluster_id", "time", "status", "group", "intercept"}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown schema keys: {sorted(extra)}")
        d = dict(d)
        d["covariates"] = tuple(d.get("covariates", ()))
        return cls(**d)

    def for_model(self, model: ModelSpec) -> "Schema":
        if isinstance(model, Cox) and self.intercept:
            # the baseline hazard absorbs any intercept
            return Schema(self.covariates, self.response, self.cluster_id, self.time,
                          self.status, self.group, False)
        return self


def ingest_csv(path: Union[str, os.PathLike], schema: Schema,
               model: Optional[ModelSpec] = None) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Numeric fields must parse as decimals; failures are reported with their
    1-based file line numbers.
    """
    if model is not None:
        schema = schema.for_model(model)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = list(reader)
    rows = [r for r in rows if any(field.strip() for field in r)]
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    roles = [getattr(schema, r) for r in ("response", "cluster_id", "time", "status", "group")]
    if not schema.covariates:
        # unlisted covariates: every column without another role
        schema = Schema(tuple(h for h in header if h not in roles), schema.response,
                        schema.cluster_id, schema.time, schema.status, schema.group,
                        schema.intercept)
    needed = list(schema.covariates)
    for role in ("response", "cluster_id", "time", "status", "group"):
        col = getattr(schema, role)
        if col is not None:
            needed.append(col)
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    pos = {c: header.index(c) for c in needed}

    def column(name, parse=float):
        out, bad = [], []
        for lineno, row in enumerate(rows, start=2):
            try:
                out.append(parse(row[pos[name]].strip()))
            except (ValueError, IndexError):
                bad.append(lineno)
        if bad:
            raise SchemaError(f"{path}: column {name!r} unparseable at lines {bad[:20]}")
        return out

    cov = [column(c) for c in schema.covariates]
    X = np.array(cov, dtype=float).T if cov else np.empty((len(rows), 0))
    names = list(schema.covariates)
    if schema.intercept:
        X = np.column_stack([np.ones(len(rows)), X])
        names.insert(0, INTERCEPT)
    if X.shape[1] == 0:
        raise SchemaError("no design columns")
    kw = {}
    if schema.response:
        kw["y"] = np.array(column(schema.response))
    if schema.cluster_id:
        kw["cluster"] = np.array(column(schema.cluster_id, str))
    if schema.group:
        kw["group"] = np.array(column(schema.group, str))
    if schema.time:
        kw["time"] = np.array(column(schema.time))
    if schema.status:
        raw = column(schema.status)
        bad = [i + 2 for i, v in enumerate(raw) if v not in (0.0, 1.0)]
        if bad:
            raise SchemaError(f"{path}: status must be 0 or 1, offending lines {bad[:20]}")
        kw["status"] = np.array(raw, dtype=np.int64)
    data = Dataset(X=X, names=tuple(names), **kw)
    if model is not None:
        models.check_roles(model, data)
    return data


def write_csv(data: Dataset, path, schema: Schema) -> None:
    """Write a Dataset back out under ``schema`` (used to export shards)."""
    cols, values = [], []
    for j, name in enumerate(data.names):
        if name == INTERCEPT:
            continue
        cols.append(name)
        values.append(data.X[:, j])
    for role, attr in (("response", "y"), ("cluster_id", "cluster"), ("time", "time"),
                       ("status", "status"), ("group", "group")):
        name = getattr(schema, role)
        if name is not None:
            cols.append(name)
            values.append(getattr(data, attr))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(data.n_rows):
            w.writerow([repr(float(v[i])) if np.issubdtype(np.asarray(v).dtype, np.floating)
                        else str(v[i]) for v in values])


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class RandomPlan:
    K: int
    seed: int = 0
    min_shard_size: Optional[int] = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class ByKeyPlan:
    column: str = "group"
    min_shard_size: Optional[int] = None


PartitionPlan = Union[RandomPlan, ByKeyPlan]


def parse_partition(text: str, min_shard_size: Optional[int] = None) -> PartitionPlan:
    """``random:K:seed`` or ``by-key:column``."""
    parts = text.split(":")
    try:
        if parts[0] == "random" and len(parts) in (2, 3):
            seed = int(parts[2]) if len(parts) == 3 else 0
            return RandomPlan(int(parts[1]), seed, min_shard_size)
        if parts[0] == "by-key" and len(parts) == 2:
            return ByKeyPlan(parts[1], min_shard_size)
    except ValueError as exc:
        raise ValueError(f"bad partition {text!r}: {exc}") from None
    raise ValueError(f"bad partition {text!r}; expected random:K:seed or by-key:column")


def partition(data: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split into disjoint shards; shard i of the returned list has shard_id i.

    Units are clusters when the data carry a cluster column, rows otherwise,
    so a cluster never straddles two shards.
    """
    n_units = data.n_units
    min_size = plan.min_shard_size if plan.min_shard_size is not None else 10 * data.p
    if isinstance(plan, RandomPlan):
        if plan.K * min_size > n_units:
            raise PartitionError(
                f"{n_units} units cannot fill {plan.K} shards of at least {min_size}")
        rng = np.random.Generator(np.random.Philox(plan.seed))
        perm = rng.permutation(n_units)
        groups = [np.sort(perm[k::plan.K]) for k in range(plan.K)]
    else:
        # the column named in the plan is loaded into the group role at ingestion
        if data.group is None:
            raise PartitionError(f"dataset has no key column {plan.column!r}")
        unit_of_row = data.row_units()
        keys = np.empty(n_units, dtype=data.group.dtype)
        keys[unit_of_row] = data.group
        if np.any(data.group != keys[unit_of_row]):
            raise PartitionError("group key varies within a cluster")
        groups = [np.flatnonzero(keys == key) for key in _sorted_keys(keys)]
    sizes = [len(g) for g in groups]
    small = [k for k, size in enumerate(sizes) if size < min_size]
    if small:
        raise PartitionError(
            f"shards below the minimum size {min_size}: "
            + ", ".join(f"{k} ({sizes[k]})" for k in small))
    return [data.take_units(g) for g in groups]


def _sorted_keys(keys: np.ndarray) -> list:
    uniq = list(np.unique(keys))
    try:
        return sorted(uniq, key=lambda v: float(v))
    except (TypeError, ValueError):
        return uniq


# --------------------------------------------------------------------------
# map


def _solve_one(args) -> ShardSummary:
    model, data, cfg, shard_id = args
    with threadpool_limits(limits=1):
        try:
            return solve_shard(model, data, cfg, shard_id)
        except RaoCDError as exc:
            return ShardSummary(shard_id=shard_id, n_k=int(data.n_units), theta_hat=None,
                                S_hat=None, V_hat=None, model=model, converged=False,
                                error=f"{type(exc).__name__}: {exc}", names=data.names)


def run_map(model: ModelSpec, shards: Sequence[Dataset], cfg: SolverConfig = SolverConfig(),
            parallelism: int = 1, shard_ids: Optional[Sequence[int]] = None) -> list[ShardSummary]:
    """Solve every shard; the result is sorted by shard_id whatever the schedule."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    ids = list(range(len(shards))) if shard_ids is None else list(shard_ids)
    jobs = [(model, shard, cfg, k) for shard, k in zip(shards, ids)]
    if parallelism == 1 or len(jobs) <= 1:
        out = [_solve_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            out = list(pool.map(_solve_one, jobs))
    return sorted(out, key=lambda s: s.shard_id)


# --------------------------------------------------------------------------
# summary files


def summary_to_record(s: ShardSummary) -> dict:
    def arr(a):
        return None if a is None else [float(v) for v in np.ravel(a)]

    return {
        "format_version": SUMMARY_FORMAT_VERSION,
        "shard_id": s.shard_id,
        "n_k": s.n_k,
        "p": s.p if s.theta_hat is not None else len(s.names),
        "names": list(s.names),
        "model": s.model.fingerprint(),
        "theta_hat": arr(s.theta_hat),
        "S_hat": arr(s.S_hat),
        "V_hat": arr(s.V_hat),
        "rho_hat": s.rho_hat,
        "sigma2_hat": s.sigma2_hat,
        "converged": s.converged,
        "iterations": s.iterations,
        "final_psi_norm": s.final_psi_norm,
        "error": s.error,
    }


def record_to_summary(rec: dict) -> ShardSummary:
    version = rec.get("format_version")
    if version != SUMMARY_FORMAT_VERSION:
        raise FormatError(f"unsupported summary format_version {version!r}")
    try:
        p = int(rec["p"])
        model = models.model_from_fingerprint(rec["model"])

        def vec(key):
            v = rec[key]
            return None if v is None else np.array(v, dtype=float)

        def mat(key):
            v = vec(key)
            if v is None:
                return None
            if v.size != p * p:
                raise FormatError(f"{key} has {v.size} entries, expected {p * p}")
            return v.reshape(p, p)

        theta = vec("theta_hat")
        if theta is not None and theta.size != p:
            raise FormatError(f"theta_hat has {theta.size} entries, expected {p}")
        return ShardSummary(
            shard_id=int(rec["shard_id"]), n_k=int(rec["n_k"]), theta_hat=theta,
            S_hat=mat("S_hat"), V_hat=mat("V_hat"), model=model,
            rho_hat=None if rec["rho_hat"] is None else float(rec["rho_hat"]),
            sigma2_hat=None if rec["sigma2_hat"] is None else float(rec["sigma2_hat"]),
            converged=bool(rec["converged"]), iterations=int(rec["iterations"]),
            final_psi_norm=float(rec["final_psi_norm"]), error=rec.get("error"),
            names=tuple(rec.get("names", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed summary record: {exc}") from None


def write_summaries(summaries: Iterable[ShardSummary], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in summaries:
            fh.write(json.dumps(summary_to_record(s), allow_nan=True) + "\n")


def read_summaries(path) -> list[ShardSummary]:
    """Parse a summary file; mixed fingerprints are allowed here and refused by
    the combiner."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(record_to_summary(rec))
    return out


def check_fingerprints(summaries: Sequence[ShardSummary]) -> None:
    fps = {json.dumps(s.model.fingerprint(), sort_keys=True) for s in summaries}
    if len(fps) > 1:
        raise FingerprintError(f"summaries come from different models: {sorted(fps)}")
