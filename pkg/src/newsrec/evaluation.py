"""Ranking evaluation (AUC), the experiment runner, and stage timing.

Protocol: per-user training pools are built from the user's reading history
only; each user's impression log is split chronologically and the later part
is held out for testing. Test candidates that already occur in the training
history (or in the training half of the impressions) are dropped, so no
sampler is ever evaluated on something it saw at training time.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from newsrec.binio import derive_seed, write_atomic
from newsrec.config import RunConfig
from newsrec.encoder import EmbeddingStore, FeatureEncoder, FeatureSet, HashEmbedder, load_embeddings
from newsrec.errors import DataError, NewsrecError, SkipUser, UndefinedAUCError, UsageError
from newsrec.ingest import Catalog, ImpressionRecord, build_user_history, build_vocab, records_by_user
from newsrec.model import NetworkConfig, UserModel, init_network, predict, train_user
from newsrec.sampler import (
    InnerProductIndex,
    SyntheticPool,
    impressions_pool,
    random_pool,
    synthetic_pool,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

STAGES = ("pooling", "train", "predict")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC via the rank (Mann-Whitney) formulation; ties count half.

    Equals exhaustive counting of (positive, negative) pairs with
    score_pos > score_neg plus half the tied pairs, divided by P*N.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise UsageError(f"scores and labels must be 1-d and equal length, got {scores.shape} / {labels.shape}")
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0:
        raise UndefinedAUCError("no positives")
    if neg == 0:
        raise UndefinedAUCError("no negatives")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    # Tie groups share the mean of the ranks they span.
    boundaries = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1], True])
    for start, end in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[start:end]] = 0.5 * (start + 1 + end)
    return ranks


def group_auc(all_scores: Sequence[float], all_labels: Sequence[int]) -> float:
    """AUC over the pooled predictions of every evaluated user."""
    return auc(all_scores, all_labels)


def evaluate_user(
    model: UserModel, test_impressions: Sequence[tuple[str, int]], encoder: FeatureEncoder, catalog: Catalog
) -> float:
    """Individual AUC of `model` over (news_id, label) test candidates."""
    if not test_impressions:
        raise UndefinedAUCError("no test candidates")
    feats = {}
    for nid, _ in test_impressions:
        if nid not in feats:
            feats[nid] = encoder.encode(catalog[nid])
    scored = dict(predict(model, [(nid, feats[nid]) for nid in feats]))
    return auc([scored[nid] for nid, _ in test_impressions], [label for _, label in test_impressions])


def timing_probe(stage: str, work: Callable, sink: dict | None = None):
    """Run `work()` and return (result, seconds); optionally accumulate in sink."""
    t0 = time.perf_counter()
    result = work()
    elapsed = time.perf_counter() - t0
    if sink is not None:
        sink[stage] = sink.get(stage, 0.0) + elapsed
    return result, elapsed


def minutes_per_users(seconds: float, n_users: int, per: int = 4000) -> float:
    if n_users <= 0:
        return 0.0
    return (seconds / 60.0) * (per / n_users)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class UserResult:
    user_id: str
    auc: float | None = None
    skip_reason: str | None = None
    n_test: int = 0
    pool_size: int = 0
    pool_warning: str | None = None
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    metadata: dict
    per_user: list[UserResult]
    stats: dict
    group_auc: float | None
    timing: dict
    schema_version: int = REPORT_SCHEMA_VERSION

    def evaluated(self) -> list[UserResult]:
        return [r for r in self.per_user if r.auc is not None]

    def individual_aucs(self) -> np.ndarray:
        return np.array([r.auc for r in self.evaluated()], dtype=np.float64)

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "metadata": self.metadata,
            "stats": self.stats,
            "group_auc": self.group_auc,
            "timing": self.timing,
            "per_user": [
                {
                    "user_id": r.user_id,
                    "auc": r.auc,
                    "skip_reason": r.skip_reason,
                    "n_test": r.n_test,
                    "pool_size": r.pool_size,
                    "pool_warning": r.pool_warning,
                    "loss_trace": r.loss_trace,
                }
                for r in self.per_user
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise DataError(f"unsupported report schema version {doc.get('schema_version')!r}")
        per_user = [UserResult(**r) for r in doc["per_user"]]
        return cls(
            metadata=doc["metadata"],
            per_user=per_user,
            stats=doc["stats"],
            group_auc=doc["group_auc"],
            timing=doc["timing"],
        )

    def write_json(self, path: str | Path) -> None:
        write_atomic(path, (self.to_json() + "\n").encode("utf-8"))

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["user_id", "sampler", "feature_set", "max_samples", "auc", "skip_reason"])
        meta = self.metadata
        for r in self.per_user:
            writer.writerow(
                [
                    r.user_id,
                    meta.get("sampler", ""),
                    meta.get("feature_set", ""),
                    meta.get("max_samples", ""),
                    "" if r.auc is None else f"{r.auc:.10f}",
                    r.skip_reason or "",
                ]
            )
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        write_atomic(path, self.csv_text().encode("utf-8"))


def _describe(values: np.ndarray) -> dict:
    if values.size == 0:
        return {"count": 0}
    return {
        "count": int(values.size),
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
        "q25": float(np.percentile(values, 25)),
        "q75": float(np.percentile(values, 75)),
        "min": float(values.min()),
        "max": float(values.max()),
    }


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


@dataclass
class ExperimentContext:
    """Immutable shared state for per-user work; safe under fork."""

    catalog: Catalog
    encoder: FeatureEncoder
    index: InnerProductIndex | None
    histories: dict[str, list[str]]
    user_records: dict[str, list[ImpressionRecord]]
    candidate_ids: list[str]
    cfg: "RunConfig"
    net_template: NetworkConfig


@dataclass
class _UserOutcome:
    result: UserResult
    scores: list[float]
    labels: list[int]
    timings: dict


def build_embedding_store(catalog: Catalog, cfg: "RunConfig") -> EmbeddingStore:
    if cfg.embedding_mode == "hash":
        return HashEmbedder(dim=cfg.hash_dim, seed=cfg.seed).embed_catalog(catalog)
    if cfg.embedding_mode == "file":
        if not cfg.embeddings_path:
            raise UsageError("embedding_mode=file requires embeddings_path")
        return load_embeddings(cfg.embeddings_path)
    raise UsageError(f"unknown embedding_mode {cfg.embedding_mode!r}")


def build_context(catalog: Catalog, records: Sequence[ImpressionRecord], cfg: "RunConfig") -> ExperimentContext:
    feature_set = FeatureSet.parse(cfg.feature_set)
    type_vocab = build_vocab(catalog, "type")
    category_vocab = build_vocab(catalog, "category")
    store = build_embedding_store(catalog, cfg) if feature_set.has_embedding or cfg.sampler == "synthetic" else None
    encoder = FeatureEncoder(
        store if feature_set.has_embedding else None, type_vocab, category_vocab, feature_set
    )
    index = InnerProductIndex.from_store(store) if cfg.sampler == "synthetic" else None
    histories = build_user_history(records, include_clicks=cfg.include_clicked_history)
    user_records = records_by_user(records)
    candidate_ids = sorted(nid for nid in catalog.ids if encoder.can_encode(nid))
    net_template = NetworkConfig(
        input_dim=encoder.input_dim,
        embedding_dim=encoder.layout.embedding_dim,
        dropout_rate=cfg.dropout_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
    )
    return ExperimentContext(
        catalog=catalog,
        encoder=encoder,
        index=index,
        histories=histories,
        user_records=user_records,
        candidate_ids=candidate_ids,
        cfg=cfg,
        net_template=net_template,
    )


def select_users(records: Sequence[ImpressionRecord], user_limit: int | None = None) -> list[str]:
    """Distinct users in first-appearance order, optionally truncated."""
    seen: dict[str, None] = {}
    for rec in records:
        seen.setdefault(rec.user_id, None)
    users = list(seen)
    return users[:user_limit] if user_limit else users


def split_impressions(
    recs: Sequence[ImpressionRecord], train_fraction: float
) -> tuple[list[ImpressionRecord], list[ImpressionRecord]]:
    """Chronological per-user split: earlier records train, later records test."""
    recs = sorted(recs, key=lambda r: (r.timestamp, r.impression_id))
    cut = int(len(recs) * train_fraction)
    return list(recs[:cut]), list(recs[cut:])


def build_pool(ctx: ExperimentContext, user_id: str) -> SyntheticPool:
    cfg = ctx.cfg
    history = ctx.histories.get(user_id, [])
    if cfg.sampler == "synthetic":
        fallback_rng = np.random.default_rng(derive_seed("negatives", cfg.seed, user_id))
        return synthetic_pool(
            user_id, history, ctx.index, ctx.catalog, ctx.encoder,
            max_samples=cfg.max_samples, rng=fallback_rng,
        )
    if cfg.sampler == "random":
        rng = np.random.default_rng(derive_seed("negatives", cfg.seed, user_id))
        return random_pool(
            user_id, history, ctx.candidate_ids, ctx.catalog, ctx.encoder, rng,
            max_samples=cfg.max_samples,
        )
    if cfg.sampler == "impressions":
        train_recs, _ = split_impressions(ctx.user_records[user_id], cfg.train_fraction)
        return impressions_pool(
            user_id, train_recs, ctx.catalog, ctx.encoder, max_samples=cfg.max_samples
        )
    raise UsageError(f"unknown sampler {cfg.sampler!r}")


def held_out_candidates(ctx: ExperimentContext, user_id: str) -> list[tuple[str, int]]:
    """Held-out (news_id, label) occurrences for one user, leakage removed."""
    train_recs, test_recs = split_impressions(ctx.user_records[user_id], ctx.cfg.train_fraction)
    banned = set(ctx.histories.get(user_id, []))
    for rec in train_recs:
        banned.update(nid for nid, _ in rec.candidates)
    out = []
    for rec in test_recs:
        for nid, label in rec.candidates:
            if nid not in banned and ctx.encoder.can_encode(nid) and nid in ctx.catalog:
                out.append((nid, label))
    return out


def process_user(ctx: ExperimentContext, user_id: str) -> _UserOutcome:
    """Pool -> train -> score one user; never raises for per-user data issues."""
    cfg = ctx.cfg
    timings = dict.fromkeys(STAGES, 0.0)
    result = UserResult(user_id=user_id)
    try:
        pool, _ = timing_probe("pooling", lambda: build_pool(ctx, user_id), timings)
        result.pool_size = len(pool.entries)
        result.pool_warning = pool.warning

        net_cfg = replace(ctx.net_template, seed=derive_seed("init", cfg.seed, user_id))
        train_rng = np.random.default_rng(derive_seed("train", cfg.seed, user_id))
        fresh = init_network(net_cfg, user_id=user_id)
        model, _ = timing_probe("train", lambda: train_user(fresh, pool, rng=train_rng), timings)
        result.loss_trace = list(model.loss_trace)

        cands = held_out_candidates(ctx, user_id)
        result.n_test = len(cands)

        def _score():
            feats = {}
            for nid, _ in cands:
                if nid not in feats:
                    feats[nid] = ctx.encoder.encode(ctx.catalog[nid])
            scored = dict(predict(model, list(feats.items())))
            return [scored[nid] for nid, _ in cands]

        scores, _ = timing_probe("predict", _score, timings)
        labels = [label for _, label in cands]
        result.auc = auc(scores, labels)
        return _UserOutcome(result, scores, labels, timings)
    except (SkipUser, UndefinedAUCError) as exc:
        result.skip_reason = exc.reason
    except NewsrecError as exc:
        result.skip_reason = f"error: {exc}"
    return _UserOutcome(result, [], [], timings)


# Fork-shared context for worker processes; set by run_experiment before the
# pool starts so children inherit it without pickling.
_FORK_CTX: ExperimentContext | None = None


def _process_user_forked(user_id: str) -> _UserOutcome:
    return process_user(_FORK_CTX, user_id)


def run_experiment(
    catalog: Catalog, records: Sequence[ImpressionRecord], cfg: "RunConfig"
) -> EvalReport:
    """Train and evaluate one model per user; returns the full report.

    Per-user work is independent and runs across `cfg.workers` forked
    processes; per-user RNG streams are derived from (seed, user_id) so the
    outcome is identical for any worker count.
    """
    global _FORK_CTX
    t_wall = time.perf_counter()
    ctx = build_context(catalog, records, cfg)
    users = select_users(records, cfg.user_limit)
    if not users:
        raise DataError("no users to evaluate")

    if cfg.workers > 1:
        _FORK_CTX = ctx
        try:
            mp = multiprocessing.get_context("fork")
            chunk = max(1, len(users) // (cfg.workers * 4))
            with mp.Pool(cfg.workers) as pool:
                outcomes = pool.map(_process_user_forked, users, chunksize=chunk)
        finally:
            _FORK_CTX = None
    else:
        outcomes = [process_user(ctx, uid) for uid in users]

    outcomes.sort(key=lambda o: o.result.user_id)
    per_user = [o.result for o in outcomes]
    timing = dict.fromkeys(STAGES, 0.0)
    pooled_scores: list[float] = []
    pooled_labels: list[int] = []
    for o in outcomes:
        for stage in STAGES:
            timing[stage] += o.timings[stage]
        if o.result.auc is not None:
            pooled_scores.extend(o.scores)
            pooled_labels.extend(o.labels)

    aucs = np.array([r.auc for r in per_user if r.auc is not None], dtype=np.float64)
    try:
        group = group_auc(pooled_scores, pooled_labels) if pooled_scores else None
    except UndefinedAUCError:
        group = None

    wall = time.perf_counter() - t_wall
    n_users = len(users)
    timing_block = {
        "pooling_s": timing["pooling"],
        "train_s": timing["train"],
        "predict_s": timing["predict"],
        "wall_s": wall,
        "users_timed": n_users,
        "pooling_min_per_1k_users": minutes_per_users(timing["pooling"], n_users, per=1000),
        "train_min_per_1k_users": minutes_per_users(timing["train"], n_users, per=1000),
        "predict_min_per_1k_users": minutes_per_users(timing["predict"], n_users, per=1000),
        "pooling_min_per_4k_users": minutes_per_users(timing["pooling"], n_users, per=4000),
        "train_min_per_4k_users": minutes_per_users(timing["train"], n_users, per=4000),
        "predict_min_per_4k_users": minutes_per_users(timing["predict"], n_users, per=4000),
    }
    skipped = sum(1 for r in per_user if r.auc is None)
    metadata = {
        "sampler": cfg.sampler,
        "feature_set": FeatureSet.parse(cfg.feature_set).value,
        "max_samples": cfg.max_samples,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "embedding_mode": cfg.embedding_mode,
        "train_fraction": cfg.train_fraction,
        "workers": cfg.workers,
        "users_requested": n_users,
        "users_evaluated": n_users - skipped,
        "users_skipped": skipped,
    }
    return EvalReport(
        metadata=metadata,
        per_user=per_user,
        stats=_describe(aucs),
        group_auc=group,
        timing=timing_block,
    )


def run_sweep(
    catalog: Catalog,
    records: Sequence[ImpressionRecord],
    cfg: "RunConfig",
    max_samples_values: Sequence[int],
) -> dict[int, EvalReport]:
    """One report per max-samples value, same data and seed throughout."""
    reports = {}
    for value in max_samples_values:
        reports[value] = run_experiment(catalog, records, replace(cfg, max_samples=value))
    return reports
