"""Command-line pipeline: ingest -> pool -> train -> evaluate / benchmark.

Stages communicate only through versioned files (the catalog/behavior store,
the DNNR-EMB embedding file, the pool file, and per-user DNNR-MOD models), so
any stage can run on a different machine from the others. Exit codes: 0 ok,
1 usage, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from newsrec import __version__
from newsrec.binio import derive_seed
from newsrec.config import RunConfig, load_config_file, make_config, resolve_data_path
from newsrec.encoder import FeatureSet
from newsrec.errors import DataError, NewsrecError, NumericError, UsageError
from newsrec import evaluation, ingest, model as model_mod, sampler as sampler_mod

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

CATALOG_FILE = "catalog.jsonl"
BEHAVIORS_FILE = "behaviors.jsonl"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--user-limit", type=int, default=None, dest="user_limit")
    p.add_argument("--verbose", action="store_true")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sampler", choices=sampler_mod.SAMPLER_KINDS, default=None)
    p.add_argument("--feature-set", default=None, dest="feature_set",
                   help="emb | tc | embc | embt | embtc")
    p.add_argument("--max-samples", type=int, default=None, dest="max_samples")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--dropout-rate", type=float, default=None, dest="dropout_rate")
    p.add_argument("--embeddings", default=None, dest="embeddings_path",
                   help="DNNR-EMB file; implies --embedding-mode file")
    p.add_argument("--embedding-mode", choices=("file", "hash"), default=None, dest="embedding_mode")
    p.add_argument("--hash-dim", type=int, default=None, dest="hash_dim")
    p.add_argument("--train-fraction", type=float, default=None, dest="train_fraction")


def build_parser() -> _Parser:
    parser = _Parser(prog="newsrec", description=__doc__)
    parser.add_argument("--version", action="version", version=f"newsrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse MIND TSVs into the versioned store")
    p.add_argument("--news", required=True, help="news.tsv path")
    p.add_argument("--behaviors", required=True, help="behaviors.tsv path")
    p.add_argument("--out", required=True, help="output directory for the store")
    p.add_argument("--strict", action="store_true", help="fail on malformed rows instead of skipping")
    _add_common_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pool", help="build per-user training pools")
    p.add_argument("--store", required=True, help="directory written by `newsrec ingest`")
    p.add_argument("--out", required=True, help="pool file to write")
    _add_run_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="train one model per user from a pool file")
    p.add_argument("--store", required=True)
    p.add_argument("--pools", required=True, help="pool file from `newsrec pool`")
    p.add_argument("--out", required=True, help="directory for per-user model files")
    _add_run_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run the full experiment and write reports")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="directory for report files")
    p.add_argument("--sweep-max-samples", default=None, dest="sweep",
                   help="comma-separated list, e.g. 15,30,60,120")
    _add_run_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="repeat timed runs and write a timing report")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--sweep-max-samples", default=None, dest="sweep")
    _add_run_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_benchmark)

    return parser


def _config_from_args(args: argparse.Namespace, base: dict | None = None, **extra) -> RunConfig:
    file_values = load_config_file(resolve_data_path(args.config)) if getattr(args, "config", None) else {}
    merged_base = {**(base or {}), **file_values}
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "sampler", "feature_set", "max_samples", "epochs", "batch_size",
            "learning_rate", "dropout_rate", "seed", "workers", "user_limit",
            "embeddings_path", "embedding_mode", "hash_dim", "train_fraction",
        )
    }
    overrides.update(extra)
    if overrides.get("embeddings_path"):
        overrides["embeddings_path"] = str(resolve_data_path(overrides["embeddings_path"]))
        if not overrides.get("embedding_mode") and "embedding_mode" not in merged_base:
            overrides["embedding_mode"] = "file"
    cfg = make_config(merged_base, overrides)
    if cfg.embedding_mode == "file" and not cfg.embeddings_path:
        raise UsageError("embedding_mode=file needs --embeddings (or use --embedding-mode hash)")
    return cfg


def _load_store(store_dir: str, user_limit: int | None = None):
    store = resolve_data_path(store_dir)
    catalog_path = store / CATALOG_FILE
    behaviors_path = store / BEHAVIORS_FILE
    for path in (catalog_path, behaviors_path):
        if not path.exists():
            raise DataError(f"store file not found: {path}")
    catalog = ingest.load_catalog(catalog_path)
    records = ingest.load_behaviors(behaviors_path)
    if user_limit:
        keep = set(evaluation.select_users(records, user_limit))
        records = [r for r in records if r.user_id in keep]
    return catalog, records


def _print_stats(catalog, records) -> None:
    histories = ingest.build_user_history(records, include_clicks=True)
    stats = ingest.user_activity_stats(histories)
    n_candidates = sum(len(r.candidates) for r in records)
    type_vocab = ingest.build_vocab(catalog, "type")
    category_vocab = ingest.build_vocab(catalog, "category")
    print(f"users              {stats['users']:>10,}")
    print(f"news               {len(catalog):>10,}")
    print(f"impression rows    {len(records):>10,}")
    print(f"candidate entries  {n_candidates:>10,}")
    print(f"news types         {len(type_vocab):>10,}")
    print(f"news categories    {len(category_vocab):>10,}")
    if stats["users"]:
        print(
            f"reads per user     mean {stats['mean']:.2f}  median {stats['median']:.0f}  max {stats['max']}"
        )


def cmd_ingest(args: argparse.Namespace) -> int:
    news_path = resolve_data_path(args.news)
    behaviors_path = resolve_data_path(args.behaviors)
    for path in (news_path, behaviors_path):
        if not Path(path).exists():
            raise DataError(f"input file not found: {path}")
    t0 = time.perf_counter()
    with open(news_path, encoding="utf-8") as fh:
        catalog = ingest.parse_news(fh, strict=args.strict)
    with open(behaviors_path, encoding="utf-8") as fh:
        records = ingest.parse_behaviors(fh, strict=args.strict)
    if args.user_limit:
        keep = set(evaluation.select_users(records, args.user_limit))
        records = [r for r in records if r.user_id in keep]
    out = Path(args.out)
    ingest.save_catalog(catalog, out / CATALOG_FILE)
    ingest.save_behaviors(records, out / BEHAVIORS_FILE)
    _print_stats(catalog, records)
    print(f"ingest time        {time.perf_counter() - t0:10.2f}s")
    print(f"store written to   {out}")
    return EXIT_OK


# Fork-shared state for the pool/train worker processes.
_POOL_CTX = None
_TRAIN_CTX = None


def _pool_one(user_id: str):
    ctx = _POOL_CTX
    try:
        pool = evaluation.build_pool(ctx, user_id)
        for entry in pool.entries:
            entry.features = None  # features are rebuilt at training time
        return pool, None
    except NewsrecError as exc:
        return None, (user_id, str(exc))


def cmd_pool(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args, store_dir=args.store, pools_path=args.out)
    catalog, records = _load_store(cfg.store_dir, cfg.user_limit)
    ctx = evaluation.build_context(catalog, records, cfg)
    users = evaluation.select_users(records)

    global _POOL_CTX
    t0 = time.perf_counter()
    _POOL_CTX = ctx
    try:
        results = _map_users(_pool_one, users, cfg.workers)
    finally:
        _POOL_CTX = None
    elapsed = time.perf_counter() - t0

    pools = sorted((p for p, _ in results if p is not None), key=lambda p: p.user_id)
    skipped = sorted((s for _, s in results if s is not None))
    meta = {
        "sampler": cfg.sampler,
        "feature_set": FeatureSet.parse(cfg.feature_set).value,
        "max_samples": cfg.max_samples,
        "seed": cfg.seed,
        "embedding_mode": cfg.embedding_mode,
        "hash_dim": cfg.hash_dim,
        "train_fraction": cfg.train_fraction,
        "include_clicked_history": cfg.include_clicked_history,
        "skipped": [{"user_id": uid, "reason": reason} for uid, reason in skipped],
    }
    sampler_mod.save_pools(pools, Path(cfg.pools_path), meta)
    print(f"pools written      {len(pools):>10,} users ({len(skipped)} skipped)")
    print(f"pooling time       {elapsed:10.2f}s"
          f"  ({evaluation.minutes_per_users(elapsed, len(users)):.2f} min per 4k users)")
    return EXIT_OK


def _train_one(pool: "sampler_mod.SyntheticPool"):
    ctx, net_template, run_seed, out_dir = _TRAIN_CTX
    for entry in pool.entries:
        entry.features = ctx.encoder.encode(ctx.catalog[entry.news_id])
    net_cfg = replace(net_template, seed=derive_seed("init", run_seed, pool.user_id))
    rng = np.random.default_rng(derive_seed("train", run_seed, pool.user_id))
    trained = model_mod.train_user(model_mod.init_network(net_cfg, user_id=pool.user_id), pool, rng=rng)
    path = Path(out_dir) / f"{pool.user_id}.dnnrmod"
    model_mod.save_model(trained, path)
    return pool.user_id


def cmd_train(args: argparse.Namespace) -> int:
    pools_path = resolve_data_path(args.pools)
    if not Path(pools_path).exists():
        raise DataError(f"pool file not found: {pools_path}")
    pools, meta = sampler_mod.load_pools(pools_path)
    if not pools:
        raise DataError(f"pool file {pools_path} contains no users")
    meta_defaults = {k: meta[k] for k in
                     ("sampler", "feature_set", "max_samples", "seed", "embedding_mode",
                      "hash_dim", "train_fraction", "include_clicked_history") if k in meta}
    # Flags not given fall back to what the pool stage recorded.
    cfg = _config_from_args(args, base=meta_defaults, store_dir=args.store, models_dir=args.out)
    catalog, records = _load_store(cfg.store_dir, cfg.user_limit)
    ctx = evaluation.build_context(catalog, records, cfg)
    out_dir = Path(cfg.models_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    global _TRAIN_CTX
    t0 = time.perf_counter()
    _TRAIN_CTX = (ctx, ctx.net_template, cfg.seed, out_dir)
    try:
        trained = _map_users(_train_one, pools, cfg.workers)
    finally:
        _TRAIN_CTX = None
    elapsed = time.perf_counter() - t0
    print(f"models written     {len(trained):>10,} files in {out_dir}")
    print(f"train time         {elapsed:10.2f}s"
          f"  ({evaluation.minutes_per_users(elapsed, len(trained)):.2f} min per 4k users)")
    return EXIT_OK


def _map_users(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    import multiprocessing

    mp = multiprocessing.get_context("fork")
    with mp.Pool(workers) as pool:
        return pool.map(fn, items, chunksize=max(1, len(items) // (workers * 4)))


def _report_name(cfg: RunConfig) -> str:
    return f"report_{cfg.sampler}_{FeatureSet.parse(cfg.feature_set).value}_ms{cfg.max_samples}"


def _sweep_values(arg: str | None) -> list[int] | None:
    if not arg:
        return None
    try:
        return [int(tok) for tok in arg.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --sweep-max-samples value {arg!r}: {exc}") from exc


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args, store_dir=args.store, report_dir=args.out)
    catalog, records = _load_store(cfg.store_dir, cfg.user_limit)
    out_dir = Path(cfg.report_dir)
    sweep = _sweep_values(args.sweep)
    values = sweep or [cfg.max_samples]
    for value in values:
        run_cfg = replace(cfg, max_samples=value)
        report = evaluation.run_experiment(catalog, records, run_cfg)
        base = out_dir / _report_name(run_cfg)
        report.write_json(base.with_suffix(".json"))
        report.write_csv(base.with_suffix(".csv"))
        mean = report.stats.get("mean")
        mean_str = f"{mean:.4f}" if mean is not None else "n/a"
        group_str = f"{report.group_auc:.4f}" if report.group_auc is not None else "n/a"
        print(
            f"[{run_cfg.sampler}/{FeatureSet.parse(cfg.feature_set).value}/ms{value}] "
            f"users={report.metadata['users_evaluated']}/{report.metadata['users_requested']} "
            f"mean_auc={mean_str} group_auc={group_str}"
        )
        print(f"  reports: {base}.json / .csv")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args, store_dir=args.store, report_dir=args.out)
    catalog, records = _load_store(cfg.store_dir, cfg.user_limit)
    out_dir = Path(cfg.report_dir)
    values = _sweep_values(args.sweep) or [cfg.max_samples]
    repetitions = max(1, args.repetitions)
    results = {}
    for value in values:
        run_cfg = replace(cfg, max_samples=value)
        reps = []
        for rep in range(repetitions):
            report = evaluation.run_experiment(catalog, records, run_cfg)
            reps.append({"timing": report.timing, "group_auc": report.group_auc,
                         "mean_individual_auc": report.stats.get("mean")})
        agg = {}
        for stage in ("pooling", "train", "predict"):
            samples = [r["timing"][f"{stage}_s"] for r in reps]
            agg[stage] = {
                "mean_s": float(np.mean(samples)),
                "std_s": float(np.std(samples)),
                "min_s": float(np.min(samples)),
                "minutes_per_4k_users": evaluation.minutes_per_users(
                    float(np.mean(samples)), reps[0]["timing"]["users_timed"]
                ),
            }
        results[str(value)] = {"repetitions": reps, "aggregate": agg}
        print(
            f"max_samples={value} ({repetitions} reps): "
            f"pooling {agg['pooling']['mean_s']:.2f}s "
            f"train {agg['train']['mean_s']:.2f}s "
            f"predict {agg['predict']['mean_s']:.2f}s | per 4k users: "
            f"pool {agg['pooling']['minutes_per_4k_users']:.2f} min, "
            f"predict {agg['predict']['minutes_per_4k_users']:.2f} min | "
            f"group_auc={reps[-1]['group_auc']}"
        )
    doc = {
        "schema_version": 1,
        "config": {k: v for k, v in asdict(cfg).items() if v is not None},
        "repetitions": repetitions,
        "results": results,
    }
    out_path = out_dir / "benchmark.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"benchmark report: {out_path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
