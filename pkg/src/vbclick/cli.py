"""Command-line entry point: ``vbclick {split,train,evaluate,simulate,inspect,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import metrics
from .clicklog import (ClickLogError, chronological_split, filter_test, load_features, load_sessions,
                       query_frequency_index, save_features, save_sessions)
from .em import EmConfig, run_em
from .models import ModelKind, UnknownKeyError, load_params, save_params
from .regem import MlpTrainConfig, run_regression_em
from .synth import SimConfig, generate_ground_truth, save_ground_truth, simulate_sessions

logger = logging.getLogger("vbclick")


def default_threads() -> int:
    env = os.environ.get("VBCLICK_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def cmd_split(args) -> int:
    data = load_sessions(args.sessions)
    train, test = chronological_split(data, args.fraction)
    if not args.no_filter:
        test = filter_test(test, train)
    save_sessions(train, args.train_out)
    save_sessions(test, args.test_out)
    print(f"train: {len(train)} sessions -> {args.train_out}")
    print(f"test:  {len(test)} sessions -> {args.test_out}")
    return 0


def cmd_train(args) -> int:
    kind = ModelKind.parse(args.model)
    train = load_sessions(args.sessions)
    cfg = EmConfig(max_iters=args.max_iters, tol=args.tol, init_alpha=args.init_alpha,
                   init_gamma=args.init_gamma, init_sigma=args.init_sigma,
                   threads=args.threads, backend=args.backend)
    if args.em == "regression":
        if not args.features:
            raise ValueError("--features is required with --em regression")
        features = load_features(args.features)
        mlp_cfg = MlpTrainConfig(learning_rate=args.lr, epochs=args.epochs,
                                 batch_size=args.batch_size, seed=args.seed)
        params, _, trace = run_regression_em(train, features, kind, cfg, mlp_cfg, labels=args.labels)
    else:
        params, trace = run_em(train, kind, cfg)
    save_params(params, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    print(f"{kind.label} ({args.em} EM): {trace.iterations} iterations, "
          f"converged={trace.converged}, final avg LL {trace.avg_ll[-1]:.6f}")
    return 0


def _report_for(path: str, test, idx, max_rank: int):
    params = load_params(path)
    if idx is None:
        return params, metrics.evaluate(test, params, max_rank)
    return params, metrics.bucketed_report(test, params, idx, max_rank)


def _write_tables(tables: dict, prefix: str | None) -> None:
    for name, rows in tables.items():
        print(f"\n## {name}\n")
        print(metrics.to_markdown(rows), end="")
        if prefix:
            Path(f"{prefix}_{name}.csv").write_text(metrics.to_csv(rows), encoding="utf-8")
            Path(f"{prefix}_{name}.md").write_text(metrics.to_markdown(rows), encoding="utf-8")


def cmd_evaluate(args) -> int:
    test = load_sessions(args.test)
    idx = query_frequency_index(load_sessions(args.train)) if args.train else None
    params, rep = _report_for(args.model, test, idx, args.max_rank)
    reports = {params.kind.label: rep}
    baseline = None
    if args.baseline:
        base_params, base_rep = _report_for(args.baseline, test, idx, args.max_rank)
        baseline = f"baseline:{base_params.kind.label}"
        reports = {baseline: base_rep, **reports}
    _write_tables(metrics.comparison_tables(reports, baseline, args.max_rank), args.out_prefix)
    return 0


def cmd_report(args) -> int:
    test = load_sessions(args.test)
    idx = query_frequency_index(load_sessions(args.train)) if args.train else None
    reports = {}
    for spec in args.model:
        name, _, path = spec.rpartition("=")
        params, rep = _report_for(path, test, idx, args.max_rank)
        reports[name or params.kind.label] = rep
    if args.baseline and args.baseline not in reports:
        raise ValueError(f"baseline {args.baseline!r} is not one of the reported models")
    _write_tables(metrics.comparison_tables(reports, args.baseline, args.max_rank), args.out_prefix)
    return 0


def cmd_simulate(args) -> int:
    cfg = SimConfig(n_queries=args.n_queries, docs_per_query=args.docs_per_query,
                    n_sessions=args.n_sessions, min_len=args.min_len, max_len=args.max_len,
                    doc_skew=args.doc_skew, query_skew=args.query_skew,
                    sigma_scale=args.sigma_scale, sigma_bias=args.sigma_bias)
    kind = ModelKind.parse(args.kind)
    gt, features = generate_ground_truth(cfg, args.seed)
    data = simulate_sessions(gt, cfg, kind, args.seed + 1)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_sessions(data, out / "sessions.jsonl")
    save_features(features, out / "features.csv")
    save_ground_truth(gt, out / "ground_truth.json")
    print(f"wrote {len(data)} sessions, {len(features)} documents to {out}")
    return 0


def cmd_inspect(args) -> int:
    params = load_params(args.model)
    if params.sigma is None:
        raise ValueError("model has no vision bias")
    ranked = sorted(params.sigma.as_dict().items(), key=lambda kv: (-kv[1], kv[0]))
    k = args.k
    if 2 * k >= len(ranked):
        sections = [("all documents by vision bias", ranked)]
    else:
        sections = [(f"top {k} by vision bias", ranked[:k]),
                    (f"bottom {k} by vision bias", ranked[-k:])]
    for title, rows in sections:
        print(title)
        for doc, value in rows:
            print(f"  {value:.6f}  {doc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vbclick", description=__doc__)
    p.add_argument("--config", help="JSON file of default option values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="chronological train/test split with test filtering")
    s.add_argument("--sessions", required=True)
    s.add_argument("--train-out", required=True)
    s.add_argument("--test-out", required=True)
    s.add_argument("--fraction", type=float, default=0.75)
    s.add_argument("--no-filter", action="store_true", help="keep unseen queries/documents in test")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="fit a click model with standard or regression-based EM")
    t.add_argument("--sessions", required=True)
    t.add_argument("--model", default="vubm2", help="pbm, ubm, vpbm1, vpbm2, vubm1, vubm2")
    t.add_argument("--em", choices=("standard", "regression"), default="standard")
    t.add_argument("--features")
    t.add_argument("--out", required=True)
    t.add_argument("--trace")
    t.add_argument("--max-iters", type=int, default=200)
    t.add_argument("--tol", type=float, default=1e-5)
    t.add_argument("--init-alpha", type=float, default=None)
    t.add_argument("--init-gamma", type=float, default=0.5)
    t.add_argument("--init-sigma", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--labels", choices=("soft", "threshold"), default="soft",
                   help="MLP targets: sigma itself, or 0/1 around the mean sigma")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--backend", choices=("numba", "numpy"), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics for one model, optionally against a baseline")
    e.add_argument("--model", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--train", help="training sessions, enables query-frequency buckets")
    e.add_argument("--baseline")
    e.add_argument("--max-rank", type=int, default=metrics.DEFAULT_MAX_RANK)
    e.add_argument("--out-prefix")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="comparison tables over several models")
    r.add_argument("--model", action="append", required=True, help="[name=]path, repeatable")
    r.add_argument("--test", required=True)
    r.add_argument("--train")
    r.add_argument("--baseline", help="name of the baseline model")
    r.add_argument("--max-rank", type=int, default=metrics.DEFAULT_MAX_RANK)
    r.add_argument("--out-prefix")
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("simulate", help="write a synthetic click log with known parameters")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--kind", default="vubm2")
    m.add_argument("--n-queries", type=int, default=50)
    m.add_argument("--docs-per-query", type=int, default=10)
    m.add_argument("--n-sessions", type=int, default=10_000)
    m.add_argument("--min-len", type=int, default=3)
    m.add_argument("--max-len", type=int, default=8)
    m.add_argument("--doc-skew", type=float, default=0.0)
    m.add_argument("--query-skew", type=float, default=0.0)
    m.add_argument("--sigma-scale", type=float, default=1.5)
    m.add_argument("--sigma-bias", type=float, default=-1.0)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_simulate)

    i = sub.add_parser("inspect", help="documents with the largest and smallest vision bias")
    i.add_argument("--model", required=True)
    i.add_argument("-k", type=int, default=10)
    i.set_defaults(func=cmd_inspect)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, encoding="utf-8") as fh:
        values = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})
            # config values satisfy required options
            for a in sp._actions:
                if a.dest in values and a.required:
                    a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 0) is None:
        args.threads = default_threads()
    try:
        return args.func(args)
    except UnknownKeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ClickLogError, ValueError, OSError, KeyError, ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
