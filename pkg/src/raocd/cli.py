"""Command-line entry points: fit, map, reduce, simulate and report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Failures print a one-line JSON object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__, runtime, sim
from .combine import meta_estimate, solve_full
from .errors import DataError, NumericalError, RaoCDError
from .models import Cox, Gee, Quantile, WorkingCorrelation
from .solver import SolverConfig, evaluate_at

log = logging.getLogger("raocd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared helpers


def _model(args):
    if args.model == "quantile":
        if args.tau is None:
            raise UsageError("--model quantile needs --tau")
        return Quantile(args.tau)
    if args.model == "gee":
        return Gee(args.link, WorkingCorrelation(args.corr))
    if args.model == "cox":
        return Cox()
    raise UsageError("--model is required")


def _config(args) -> SolverConfig:
    return SolverConfig(max_iter=args.max_iter, tol=args.tol,
                        rho_init=getattr(args, "rho_init", None))


def _schema(args, plan=None) -> runtime.Schema:
    if args.schema is None:
        raise UsageError("--schema is required")
    text = args.schema
    if not text.lstrip().startswith("{"):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        schema = runtime.Schema.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--schema is not valid JSON: {exc}") from None
    if isinstance(plan, runtime.ByKeyPlan):
        schema = runtime.Schema(schema.covariates, schema.response, schema.cluster_id,
                                schema.time, schema.status, plan.column, schema.intercept)
    return schema


def _plan(args):
    if args.partition is None:
        return None
    try:
        return runtime.parse_partition(args.partition, args.min_shard_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_shards(args, model):
    plan = _plan(args)
    if plan is None:
        raise UsageError("--partition is required")
    data = runtime.ingest_csv(args.data, _schema(args, plan), model)
    return data, runtime.partition(data, plan)


def _emit(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _reduce(summaries, shards, args):
    evaluate = None
    if shards is not None:
        by_id = {s.shard_id: s for s in summaries}

        def evaluate(k, theta):
            if k not in shards:
                raise DataError(f"no data for shard {k} in the refinement pass")
            return evaluate_at(by_id[k].model, shards[k], theta, by_id[k])

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = meta_estimate(summaries, evaluate, level=args.level, extra_steps=args.extra_steps,
                            include_nonconverged=args.include_nonconverged)
    for w in caught:
        log.warning("%s", w.message)
    return est


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    model = _model(args)
    cfg = _config(args)
    data, shards = _load_shards(args, model)
    summaries = runtime.run_map(model, shards, cfg, args.parallelism)
    est = _reduce(summaries, dict(enumerate(shards)), args)
    report = est.to_dict()
    if args.with_full:
        full = solve_full(model, data, cfg)
        report["theta_full"] = [float(v) for v in full.theta]
        report["ase_full"] = [float(v) for v in full.ase]
    _emit(_dumps(report), args.out)
    return EXIT_OK


def cmd_map(args) -> int:
    model = _model(args)
    cfg = _config(args)
    plan = _plan(args)
    if plan is None:
        data = runtime.ingest_csv(args.data, _schema(args), model)
        shards, ids = [data], [args.shard_id]
    else:
        data = runtime.ingest_csv(args.data, _schema(args, plan), model)
        shards = runtime.partition(data, plan)
        ids = list(range(len(shards)))
        if args.export_shards:
            os.makedirs(args.export_shards, exist_ok=True)
            schema = _schema(args, plan)
            for k, shard in zip(ids, shards):
                runtime.write_csv(shard, os.path.join(args.export_shards, f"shard_{k}.csv"), schema)
    summaries = runtime.run_map(model, shards, cfg, args.parallelism, shard_ids=ids)
    if args.out is None or args.out == "-":
        for s in summaries:
            sys.stdout.write(json.dumps(runtime.summary_to_record(s)) + "\n")
    else:
        runtime.write_summaries(summaries, args.out)
    return EXIT_OK


def cmd_reduce(args) -> int:
    if not args.summaries:
        raise UsageError("--summaries needs at least one file")
    summaries = []
    for path in args.summaries:
        summaries.extend(runtime.read_summaries(path))
    if not summaries:
        raise DataError("summary files contain no records")
    runtime.check_fingerprints(summaries)
    ids = [s.shard_id for s in summaries]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate shard ids across summary files: {sorted(ids)}")
    model = summaries[0].model
    shards = None
    if args.data is not None:
        _, parts = _load_shards(args, model)
        shards = dict(enumerate(parts))
    elif args.shard_data:
        shards = {}
        for item in args.shard_data:
            key, _, path = item.partition("=")
            if not path:
                raise UsageError(f"--shard-data expects ID=PATH, got {item!r}")
            shards[int(key)] = runtime.ingest_csv(path, _schema(args), model)
    est = _reduce(summaries, shards, args)
    _emit(_dumps(est.to_dict()), args.out)
    return EXIT_OK


def _manifest(args, scenario, scenario_bytes: bytes) -> dict:
    return {
        "command": "simulate",
        "scenario": sim.scenario_to_dict(scenario),
        "scenario_sha256": hashlib.sha256(scenario_bytes).hexdigest(),
        "reps": args.reps,
        "seed": args.seed,
        "rep_seeds": "SeedSequence([seed, rep]) for rep in range(reps)",
        "estimators": list(args.estimators),
        "level": args.level,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "versions": {"raocd": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }


def cmd_simulate(args) -> int:
    if args.scenario is None:
        raise UsageError("--scenario is required")
    try:
        scenario = sim.load_scenario(args.scenario)
    except (ValueError, TypeError) as exc:
        raise DataError(f"invalid scenario: {exc}") from None
    with open(args.scenario, "rb") as fh:
        raw = fh.read()
    try:
        report = sim.run_study(scenario, args.reps, args.estimators, args.seed, args.parallelism,
                               _config(args), args.level)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    files = {"metrics.csv": report.to_csv(), "metrics.txt": report.to_text(),
             "metrics.json": _dumps(report.to_dict()),
             "manifest.json": _dumps(_manifest(args, scenario, raw))}
    for name, text in files.items():
        with open(os.path.join(args.out, name), "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _render_meta(d: dict) -> str:
    names = d.get("names") or [f"x{j}" for j in range(len(d["theta_wcd"]))]
    theta = d["theta_rcd"] or d["theta_wcd"]
    lines = [f"K={d['K']} n={d['n']} level={d['level']}",
             f"{'coef':<14} {'estimate':>12} {'ase':>11} {'lower':>12} {'upper':>12} {'p-val':>9}"]
    for j, name in enumerate(names):
        lines.append(f"{name:<14} {theta[j]:12.6g} {d['ase'][j]:11.4g} {d['ci_lower'][j]:12.6g} "
                     f"{d['ci_upper'][j]:12.6g} {d['p_values'][j]:9.3g}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.input}: {exc}") from None
    if "metrics" in d:
        est = tuple(d["metrics"])
        nan = float("nan")

        def unpack(e, key):
            return np.array([nan if v is None else v for v in d["metrics"][e][key]])

        rep = sim.MetricsReport(
            est, tuple(d["names"]), np.array(d["theta_true"], dtype=float),
            *({e: unpack(e, k) for e in est} for k in ("abias", "ese", "ase", "cp", "are", "pre_lt_1")),
            reps=d["reps"], dropped=d["dropped"], level=d["level"])
        text = rep.to_csv() if args.format == "csv" else rep.to_text()
    elif "theta_wcd" in d:
        text = _render_meta(d)
    else:
        raise DataError(f"{args.input}: neither a metrics report nor a fit report")
    _emit(text, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raocd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"raocd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p):
        p.add_argument("--model", choices=("quantile", "gee", "cox"), required=True)
        p.add_argument("--tau", type=float)
        p.add_argument("--link", choices=("identity", "logit"), default="identity")
        p.add_argument("--corr", choices=("independence", "ar1", "cs"), default="independence")
        p.add_argument("--rho-init", type=float, dest="rho_init")

    def solver_flags(p):
        p.add_argument("--tol", type=float, default=SolverConfig.tol)
        p.add_argument("--max-iter", type=int, default=SolverConfig.max_iter, dest="max_iter")

    def data_flags(p, required):
        p.add_argument("--data", required=required)
        p.add_argument("--schema", help="JSON object or path to a JSON file mapping column roles")
        p.add_argument("--partition", help="random:K:seed or by-key:column")
        p.add_argument("--min-shard-size", type=int, dest="min_shard_size")

    def reduce_flags(p):
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--extra-steps", type=int, default=1, dest="extra_steps")
        p.add_argument("--include-nonconverged", action="store_true", dest="include_nonconverged")

    p = sub.add_parser("fit", help="partition, map and reduce in one run")
    model_flags(p)
    data_flags(p, True)
    solver_flags(p)
    reduce_flags(p)
    p.add_argument("--with-full", action="store_true", dest="with_full")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("map", help="solve shards and write summary records")
    model_flags(p)
    data_flags(p, True)
    solver_flags(p)
    p.add_argument("--shard-id", type=int, default=0, dest="shard_id")
    p.add_argument("--export-shards", dest="export_shards",
                   help="directory for per-shard CSV files (with --partition)")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("reduce", help="combine summary records into a meta estimate")
    p.add_argument("--summaries", nargs="+", required=True)
    data_flags(p, False)
    p.add_argument("--shard-data", nargs="+", dest="shard_data", metavar="ID=PATH")
    reduce_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("simulate", help="run a Monte-Carlo study from a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--estimators", nargs="+", default=list(sim.ESTIMATORS),
                   choices=sim.ESTIMATORS)
    p.add_argument("--level", type=float, default=0.95)
    solver_flags(p)
    p.add_argument("--out", default="sim_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render a fit or simulation JSON as a table")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if getattr(args, "parallelism", 1) < 1:
            raise UsageError("--parallelism must be >= 1")
        if hasattr(args, "level") and not 0 < args.level < 1:
            raise UsageError("--level must lie in (0, 1)")
        if getattr(args, "extra_steps", 1) < 1:
            raise UsageError("--extra-steps must be >= 1")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (DataError, OSError, UnicodeDecodeError) as exc:
        return _fail(EXIT_DATA, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except RaoCDError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
