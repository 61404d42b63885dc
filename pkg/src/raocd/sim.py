"""Monte-Carlo scenarios, replication driver and metric tables.

Each replication draws its data from ``numpy.random.SeedSequence([base_seed,
rep])`` so results do not depend on how replications are scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from . import models
from .combine import ExcludedShardWarning, meta_estimate, solve_full
from .data import Dataset
from .errors import RaoCDError
from .models import Cox, Gee, Quantile, WorkingCorrelation
from .runtime import ByKeyPlan, RandomPlan, partition, run_map
from .solver import SolverConfig, evaluate_at

log = logging.getLogger(__name__)

ESTIMATORS = ("rao_cd", "wald_cd", "aee", "full")


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class QuantileSim:
    """Linear model with CS-correlated normal covariates and N(0,1) errors."""

    tau: float = 0.5
    p: int = 10
    rho_x: float = 0.5
    theta_true: float = 1.0
    m: int = 500
    K: int = 20

    @property
    def n(self) -> int:
        return self.m * self.K


@dataclass(frozen=True)
class GeeHomog:
    """Clustered linear (or logistic) model with a common within-cluster correlation.

    ``n`` counts subjects, each observed ``l`` times.  Logistic responses are
    drawn through a Gaussian copula with correlation ``R(rho)``.
    """

    theta_true: tuple = (1 / 3, 1 / 2)
    l: int = 5
    rho: float = 0.5
    corr_kind: str = "ar1"
    n: int = 20000
    K: int = 20
    sigma2: float = 1.0
    link: str = "identity"


@dataclass(frozen=True)
class GeeContaminated:
    """A few subjects get one response multiplied by ``multiplier``."""

    base: GeeHomog = GeeHomog(n=10000, K=50)
    contam_rate: float = 0.002
    allocation: str = "random"
    multiplier: float = 100.0

    @property
    def K(self) -> int:
        return self.base.K


@dataclass(frozen=True)
class GeeHeteroCorr:
    """Q subject blocks, each with its own correlation structure and rho."""

    Q: int = 4
    n: int = 20000
    K: int = 20
    l: int = 5
    theta_true: tuple = (1 / 3, 1 / 2)
    working: str = "ar1"


@dataclass(frozen=True)
class CoxHetero:
    """Weibull proportional hazards with heterogeneous baseline hazards.

    H1: two halves with their own (lambda, shape); shards cut contiguously so
    each holds one half (for odd K the middle shard mixes both 50/50).
    H2: baseline (1, 1) with a quarter of the rows redrawn from a random
    (lambda, shape), randomly partitioned.
    """

    kind: str = "H1"
    n: int = 10000
    K: int = 10
    censor_prob: float = 0.3
    theta_true: tuple = (0.5, -0.5, 1.0)


Scenario = Union[QuantileSim, GeeHomog, GeeContaminated, GeeHeteroCorr, CoxHetero]

_SCENARIO_TYPES = {cls.__name__: cls for cls in
                   (QuantileSim, GeeHomog, GeeContaminated, GeeHeteroCorr, CoxHetero)}


def scenario_from_dict(d: dict) -> Scenario:
    """Build a scenario from ``{"type": "GeeHomog", ...fields}``."""
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _SCENARIO_TYPES:
        raise ValueError(f"unknown scenario type {kind!r}; choose from {sorted(_SCENARIO_TYPES)}")
    if kind == "GeeContaminated" and "base" in d:
        d["base"] = scenario_from_dict({"type": "GeeHomog", **d["base"]})
    for key in ("theta_true",):
        if isinstance(d.get(key), list):
            d[key] = tuple(d[key])
    try:
        scen = _SCENARIO_TYPES[kind](**d)
    except TypeError as exc:
        raise ValueError(f"bad {kind} fields: {exc}") from None
    validate(scen)
    return scen


def scenario_to_dict(s: Scenario) -> dict:
    out = {"type": type(s).__name__, **asdict(s)}
    if isinstance(s, GeeContaminated):
        out["base"] = asdict(s.base)
    return out


def validate(s: Scenario) -> None:
    if isinstance(s, QuantileSim):
        if not 0 < s.tau < 1 or s.p < 1 or s.m < 1 or s.K < 1 or not -1 / (s.p - 1 or 1) < s.rho_x < 1:
            raise ValueError(f"infeasible scenario {s}")
    elif isinstance(s, GeeHomog):
        if s.l < 1 or s.n < s.K or not -1 < s.rho < 1 or s.sigma2 <= 0:
            raise ValueError(f"infeasible scenario {s}")
        WorkingCorrelation(s.corr_kind, 0.0 if s.corr_kind == "independence" else s.rho)
        Gee(s.link)
    elif isinstance(s, GeeContaminated):
        validate(s.base)
        if s.contam_rate * s.base.n < 1:
            raise ValueError("contam_rate * n < 1: no subject would be contaminated")
        if s.allocation not in ("random", "fixed"):
            raise ValueError("allocation must be 'random' or 'fixed'")
    elif isinstance(s, GeeHeteroCorr):
        if s.Q < 1 or s.n < s.Q or s.l < 2:
            raise ValueError(f"infeasible scenario {s}")
        WorkingCorrelation(s.working)
    elif isinstance(s, CoxHetero):
        if s.kind not in ("H1", "H2") or not 0 <= s.censor_prob < 1 or s.n < 2 * s.K:
            raise ValueError(f"infeasible scenario {s}")
    else:
        raise TypeError(f"not a scenario: {s!r}")


def model_for(s: Scenario):
    if isinstance(s, QuantileSim):
        return Quantile(s.tau)
    if isinstance(s, GeeHomog):
        return Gee(s.link, WorkingCorrelation(s.corr_kind))
    if isinstance(s, GeeContaminated):
        return model_for(s.base)
    if isinstance(s, GeeHeteroCorr):
        return Gee("identity", WorkingCorrelation(s.working))
    return Cox()


def truth(s: Scenario) -> np.ndarray:
    """Target parameter; the quantile intercept absorbs the error quantile."""
    if isinstance(s, QuantileSim):
        theta = np.full(s.p, float(s.theta_true))
        theta[0] += norm.ppf(s.tau)
        return theta
    if isinstance(s, GeeContaminated):
        return truth(s.base)
    return np.array(s.theta_true, dtype=float)


def plan_for(s: Scenario, seed: int = 0):
    """Partition plan used by the replication driver."""
    if isinstance(s, GeeContaminated) and s.allocation == "fixed":
        return ByKeyPlan("group")
    if isinstance(s, CoxHetero) and s.kind == "H1":
        return ByKeyPlan("group")
    return RandomPlan(s.K, seed)


# --------------------------------------------------------------------------
# generators


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(int(seed)))


def _clustered_normal(rng, n, l, kind, rho) -> np.ndarray:
    """(n, l) draws with unit variances and correlation R(rho)."""
    L = np.linalg.cholesky(models.correlation_matrix(kind, l, rho))
    return rng.standard_normal((n, l)) @ L.T


def _gee_frame(X, y, n, l, group=None) -> Dataset:
    cluster = np.repeat(np.arange(n), l)
    return Dataset(X=X, y=y, cluster=cluster, group=group, names=("(intercept)", "x"))


def _gee_response(rng, s: GeeHomog, x: np.ndarray) -> np.ndarray:
    eta = s.theta_true[0] + s.theta_true[1] * x
    z = _clustered_normal(rng, s.n, s.l, s.corr_kind, s.rho)
    if s.link == "identity":
        return eta + math.sqrt(s.sigma2) * z
    return (z <= norm.ppf(1.0 / (1.0 + np.exp(-eta)))).astype(float)


def generate(s: Scenario, seed=0) -> Dataset:
    """Draw one dataset; deterministic in ``seed`` (int or SeedSequence)."""
    validate(s)
    rng = _rng(seed)
    if isinstance(s, QuantileSim):
        q = s.p - 1
        cov = np.full((q, q), s.rho_x) + (1 - s.rho_x) * np.eye(q)
        Z = rng.standard_normal((s.n, q)) @ np.linalg.cholesky(cov).T if q else np.empty((s.n, 0))
        X = np.column_stack([np.ones(s.n), Z])
        y = X @ np.full(s.p, float(s.theta_true)) + rng.standard_normal(s.n)
        names = ("(intercept)",) + tuple(f"x{j}" for j in range(1, s.p))
        return Dataset(X=X, y=y, names=names)

    if isinstance(s, GeeHomog):
        x = rng.standard_normal((s.n, s.l))
        y = _gee_response(rng, s, x)
        X = np.column_stack([np.ones(s.n * s.l), x.ravel()])
        return _gee_frame(X, y.ravel(), s.n, s.l)

    if isinstance(s, GeeContaminated):
        b = s.base
        x = rng.standard_normal((b.n, b.l))
        y = _gee_response(rng, b, x)
        n_bad = math.ceil(s.contam_rate * b.n)
        group = None
        if s.allocation == "fixed":
            shard = np.empty(b.n, dtype=np.int64)
            shard[rng.permutation(b.n)] = np.arange(b.n) % b.K
            members = np.flatnonzero(shard == 0)
            if n_bad > len(members):
                raise ValueError("more contaminated subjects than the designated shard holds")
            bad = rng.choice(members, n_bad, replace=False)
            group = np.repeat(shard, b.l)
        else:
            bad = rng.choice(b.n, n_bad, replace=False)
        y[bad, rng.integers(0, b.l, n_bad)] *= s.multiplier
        X = np.column_stack([np.ones(b.n * b.l), x.ravel()])
        return _gee_frame(X, y.ravel(), b.n, b.l, group)

    if isinstance(s, GeeHeteroCorr):
        sizes = np.full(s.Q, s.n // s.Q)
        sizes[: s.n % s.Q] += 1
        x = rng.standard_normal((s.n, s.l))
        blocks = []
        for size in sizes:
            kind = models.CORRELATION_KINDS[rng.integers(0, 3)]
            rho = rng.uniform(0.1, 0.9)
            blocks.append(_clustered_normal(rng, int(size), s.l, kind, rho))
        eps = np.vstack(blocks)
        y = s.theta_true[0] + s.theta_true[1] * x + eps
        X = np.column_stack([np.ones(s.n * s.l), x.ravel()])
        return _gee_frame(X, y.ravel(), s.n, s.l)

    # Cox
    theta = np.array(s.theta_true, dtype=float)
    X = rng.standard_normal((s.n, theta.size))
    lam = np.ones(s.n)
    shape = np.ones(s.n)
    group = None
    if s.kind == "H1":
        half = s.n // 2
        for rows in (slice(0, half), slice(half, s.n)):
            lam[rows], shape[rows] = rng.uniform(0.5, 5.0, 2)
        # shuffle within each half, then cut into K contiguous chunks
        order = np.concatenate([rng.permutation(half), half + rng.permutation(s.n - half)])
        X, lam, shape = X[order], lam[order], shape[order]
        group = (np.arange(s.n) * s.K) // s.n
    else:
        swap = rng.choice(s.n, s.n // 4, replace=False)
        lam[swap], shape[swap] = rng.uniform(0.5, 5.0, 2)
    u = rng.uniform(size=s.n)
    t = (-np.log(u) / (lam * np.exp(X @ theta))) ** (1.0 / shape)
    status = (rng.uniform(size=s.n) >= s.censor_prob).astype(np.int64)
    names = tuple(f"x{j + 1}" for j in range(theta.size))
    return Dataset(X=X, time=t, status=status, group=group, names=names)


# --------------------------------------------------------------------------
# replication driver


@dataclass(frozen=True, eq=False)
class RepResult:
    """Estimates and ASEs of one replication, keyed by estimator."""

    rep: int
    theta: dict
    ase: dict
    error: Optional[str] = None
    seconds: float = 0.0


def fit_rep(s: Scenario, data: Dataset, estimators: Sequence[str] = ESTIMATORS,
            cfg: SolverConfig = SolverConfig(), plan_seed: int = 0):
    """Run partition, map and reduce (plus the full fit) on one dataset."""
    model = model_for(s)
    theta, ase = {}, {}
    need_meta = any(e != "full" for e in estimators)
    if need_meta:
        shards = partition(data, plan_for(s, plan_seed))
        summaries = run_map(model, shards, cfg)
        summary_by_id = {x.shard_id: x for x in summaries}
        evaluate = None
        if "rao_cd" in estimators:
            def evaluate(k, th):
                return evaluate_at(model, shards[k], th, summary_by_id[k])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExcludedShardWarning)
            est = meta_estimate(summaries, evaluate, with_aee="aee" in estimators)
        if "rao_cd" in estimators:
            theta["rao_cd"], ase["rao_cd"] = est.theta_rcd, est.ase
        if "wald_cd" in estimators:
            theta["wald_cd"], ase["wald_cd"] = est.theta_wcd, est.ase
        if "aee" in estimators:
            theta["aee"], ase["aee"] = est.theta_aee, est.aee_ase
    if "full" in estimators:
        full = solve_full(model, data, cfg)
        if not full.summary.converged:
            raise RaoCDError("full-data solve did not converge")
        theta["full"], ase["full"] = full.theta, full.ase
    return theta, ase


def _run_rep(args) -> RepResult:
    s, rep, base_seed, estimators, cfg = args
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        try:
            data = generate(s, np.random.SeedSequence([base_seed, rep]))
            theta, ase = fit_rep(s, data, estimators, cfg, plan_seed=base_seed * 100003 + rep)
        except RaoCDError as exc:
            return RepResult(rep, {}, {}, f"{type(exc).__name__}: {exc}",
                             time.perf_counter() - start)
    return RepResult(rep, theta, ase, None, time.perf_counter() - start)


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """Per-estimator, per-coefficient Monte-Carlo summaries.

    ARE is the mean over replications of ASE_est / ASE_full and PRE_lt_1 the
    percentage of replications where that ratio is below one; both are
    undefined (NaN) for FULL itself and when FULL was not run.
    """

    estimators: tuple
    names: tuple
    theta_true: np.ndarray
    abias: dict
    ese: dict
    ase: dict
    cp: dict
    are: dict
    pre_lt_1: dict
    reps: int
    dropped: int
    level: float = 0.95
    drop_reasons: list = field(default_factory=list)
    estimates: dict = field(default_factory=dict)
    ases: dict = field(default_factory=dict)

    def rows(self):
        """(estimator, coefficient, ABIAS, ESE, ASE, CP, ARE, PRE<1) tuples."""
        for e in self.estimators:
            for j, name in enumerate(self.names):
                yield (e, name, self.abias[e][j], self.ese[e][j], self.ase[e][j],
                       self.cp[e][j], self.are[e][j], self.pre_lt_1[e][j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "coefficient", "abias", "ese", "ase", "cp", "are", "pre_lt_1"])
        for row in self.rows():
            e, name, *vals = row
            w.writerow([e, name] + ["--" if not np.isfinite(v) else repr(float(v)) for v in vals])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'estimator':<9} {'coef':<12} {'ABIAS':>10} {'ESE':>10} {'ASE':>10} " \
               f"{'CP':>6} {'ARE':>7} {'PRE<1':>7}"
        lines = [f"reps={self.reps} dropped={self.dropped} level={self.level}", head,
                 "-" * len(head)]
        for e, name, ab, es, a, cp, are, pre in self.rows():
            are_s = "--" if not np.isfinite(are) else f"{are:.3f}"
            pre_s = "--" if not np.isfinite(pre) else f"{pre:.1f}"
            lines.append(f"{e:<9} {name:<12} {ab:10.3e} {es:10.3e} {a:10.3e} "
                         f"{cp:6.3f} {are_s:>7} {pre_s:>7}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        def clean(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        metrics = {e: {"abias": clean(self.abias[e]), "ese": clean(self.ese[e]),
                       "ase": clean(self.ase[e]), "cp": clean(self.cp[e]),
                       "are": clean(self.are[e]), "pre_lt_1": clean(self.pre_lt_1[e])}
                   for e in self.estimators}
        return {"reps": self.reps, "dropped": self.dropped, "level": self.level,
                "names": list(self.names), "theta_true": clean(self.theta_true),
                "drop_reasons": list(self.drop_reasons), "metrics": metrics}


def summarize(results: Sequence[RepResult], estimators: Sequence[str], theta_true,
              names: Sequence[str], level: float = 0.95) -> MetricsReport:
    ok = sorted((r for r in results if r.error is None), key=lambda r: r.rep)
    dropped = sorted((r for r in results if r.error is not None), key=lambda r: r.rep)
    if len(ok) < 2:
        raise RaoCDError(f"only {len(ok)} replications succeeded; need at least 2")
    theta_true = np.asarray(theta_true, dtype=float)
    z = norm.ppf(0.5 + level / 2)
    est = {e: np.array([r.theta[e] for r in ok]) for e in estimators}
    ase = {e: np.array([r.ase[e] for r in ok]) for e in estimators}
    nan = np.full(theta_true.size, np.nan)
    abias, ese, mase, cp, are, pre = {}, {}, {}, {}, {}, {}
    for e in estimators:
        err = est[e] - theta_true
        abias[e] = np.mean(np.abs(err), axis=0)
        ese[e] = np.std(est[e], axis=0, ddof=1)
        mase[e] = np.mean(ase[e], axis=0)
        cp[e] = np.mean(np.abs(err) <= z * ase[e], axis=0)
        if e != "full" and "full" in estimators:
            ratio = ase[e] / ase["full"]
            are[e] = np.mean(ratio, axis=0)
            pre[e] = 100.0 * np.mean(ratio < 1.0, axis=0)
        else:
            are[e] = np.ones_like(nan) if e == "full" else nan
            pre[e] = nan
    return MetricsReport(tuple(estimators), tuple(names), theta_true, abias, ese, mase, cp, are,
                         pre, reps=len(ok), dropped=len(dropped), level=level,
                         drop_reasons=[f"rep {r.rep}: {r.error}" for r in dropped],
                         estimates=est, ases=ase)


def run_study(s: Scenario, reps: int, estimators: Sequence[str] = ESTIMATORS,
              base_seed: int = 0, parallelism: int = 1, cfg: SolverConfig = SolverConfig(),
              level: float = 0.95) -> MetricsReport:
    """Replicate generate, partition, map and reduce ``reps`` times and summarize.

    ABIAS is the mean absolute error per coefficient.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
    validate(s)
    jobs = [(s, r, int(base_seed), tuple(estimators), cfg) for r in range(reps)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_rep, jobs))
    else:
        results = [_run_rep(j) for j in jobs]
    names = generate_names(s)
    return summarize(results, estimators, truth(s), names, level)


def generate_names(s: Scenario) -> tuple:
    if isinstance(s, QuantileSim):
        return ("(intercept)",) + tuple(f"x{j}" for j in range(1, s.p))
    if isinstance(s, CoxHetero):
        return tuple(f"x{j + 1}" for j in range(len(s.theta_true)))
    return ("(intercept)", "x")


# --------------------------------------------------------------------------
# single-machine scaling


@dataclass(frozen=True)
class ScalingPoint:
    n: int
    K: int
    map_reduce_seconds: float
    full_seconds: Optional[float]
    full_capped: bool


def scaling_benchmark(m: int = 500, K_values: Sequence[int] = (5, 10, 20, 40), p: int = 10,
                      parallelism: int = 1, full_max_rows: Optional[int] = None,
                      seed: int = 0) -> list[ScalingPoint]:
    """Wall time of map+reduce at fixed shard size m against the full-data fit.

    The full fit is skipped (``full_capped``) once n exceeds ``full_max_rows``.
    """
    from .errors import MemoryCapExceeded

    out = []
    for K in K_values:
        s = QuantileSim(p=p, m=m, K=K)
        data = generate(s, seed)
        model = model_for(s)
        t0 = time.perf_counter()
        shards = partition(data, RandomPlan(K, seed))
        summaries = run_map(model, shards, SolverConfig(), parallelism)
        by_id = {x.shard_id: x for x in summaries}
        meta_estimate(summaries, lambda k, th: evaluate_at(model, shards[k], th, by_id[k]))
        t_mr = time.perf_counter() - t0
        t_full, capped = None, False
        try:
            t0 = time.perf_counter()
            solve_full(model, data, SolverConfig(), max_rows=full_max_rows)
            t_full = time.perf_counter() - t0
        except MemoryCapExceeded:
            capped = True
        out.append(ScalingPoint(s.n, K, t_mr, t_full, capped))
    return out


def load_scenario(path) -> Scenario:
    """Read a scenario from JSON, or TOML when the file ends in .toml."""
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return scenario_from_dict(tomllib.load(fh))
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
