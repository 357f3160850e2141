"""Per-user training pools: synthetic, random, and impression negatives.

The synthetic sampler picks, for each user, the catalog items whose title
embeddings have the smallest inner product with the user's history centroid.
For unit vectors the squared L2 distance is 2 - 2*<x, y>, so the smallest
inner products are exactly the farthest items; `eq1_identity_check` exposes
that identity for verification.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from newsrec.binio import ChecksumWriter, read_checksummed
from newsrec.encoder import EmbeddingStore, FeatureEncoder
from newsrec.errors import DataError, FormatError, NumericError, SkipUser
from newsrec.ingest import Catalog, ImpressionRecord

log = logging.getLogger(__name__)

POOL_MAGIC = b"DNNRPOL1"
POOL_VERSION = 1

DEFAULT_MAX_SAMPLES = 60

SAMPLER_KINDS = ("synthetic", "random", "impressions")


@dataclass
class PoolEntry:
    news_id: str
    label: int
    features: np.ndarray | None = None


@dataclass
class SyntheticPool:
    """Balanced per-user training set: positives first, then negatives."""

    user_id: str
    entries: list[PoolEntry]
    r_pos: int
    n_neg: int
    sampler: str
    warning: str | None = None

    def positives(self) -> list[PoolEntry]:
        return [e for e in self.entries if e.label == 1]

    def negatives(self) -> list[PoolEntry]:
        return [e for e in self.entries if e.label == 0]


class InnerProductIndex:
    """Dense index of L2-normalized title embeddings in ascending-id order.

    Zero embeddings (untitled items) are excluded from candidacy. The index
    is immutable after construction and safe to share across workers.
    """

    def __init__(self, ids: Sequence[str], matrix: np.ndarray) -> None:
        self.ids = list(ids)
        self.matrix = matrix
        self.row_of = {nid: i for i, nid in enumerate(self.ids)}

    @classmethod
    def from_store(cls, store: EmbeddingStore) -> "InnerProductIndex":
        normalized = store if store.normalized else store.normalize()
        ids = sorted(nid for nid in normalized.vectors if nid not in normalized.zero_ids)
        if not ids:
            raise DataError("embedding store has no nonzero vectors to index")
        matrix = np.stack([normalized.vectors[nid] for nid in ids]).astype(np.float32)
        return cls(ids, matrix)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, news_id: str) -> bool:
        return news_id in self.row_of

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def user_centroid(
    history_ids: Sequence[str], index: InnerProductIndex, max_samples: int | None = None
) -> np.ndarray:
    """Mean of the normalized embeddings of the (capped) history.

    `history_ids` is oldest-first; the cap keeps the most recent entries.
    Raises SkipUser when nothing in the history resolves in the index.
    """
    rows = [index.row_of[nid] for nid in history_ids if nid in index.row_of]
    if not rows:
        raise SkipUser("no history item resolvable in the embedding index")
    if max_samples is not None:
        rows = rows[-max_samples:]
    return index.matrix[rows].astype(np.float64).mean(axis=0)


def _eligible_rows_and_scores(
    centroid: np.ndarray, index: InnerProductIndex, exclude_ids
) -> tuple[np.ndarray, np.ndarray]:
    centroid = np.asarray(centroid, dtype=np.float64)
    if centroid.shape != (index.dim,):
        raise NumericError(f"centroid dim {centroid.shape} does not match index dim {index.dim}")
    scores = index.matrix @ centroid
    if exclude_ids:
        keep = np.fromiter(
            (nid not in exclude_ids for nid in index.ids), dtype=bool, count=len(index.ids)
        )
        rows = np.flatnonzero(keep)
    else:
        rows = np.arange(len(index.ids))
    return rows, scores


def rank_by_inner_product(
    centroid: np.ndarray, index: InnerProductIndex, exclude_ids: set[str] | frozenset = frozenset()
) -> list[str]:
    """All candidate ids sorted by ascending inner product (farthest first).

    Ties break on ascending news id. Selection is invariant to positive
    scaling of the centroid, so callers need not re-normalize it.
    """
    rows, scores = _eligible_rows_and_scores(centroid, index, exclude_ids)
    # Rows are in ascending-id order, so a stable sort breaks ties by id.
    order = rows[np.argsort(scores[rows], kind="stable")]
    return [index.ids[i] for i in order]


def farthest_k_ids(
    centroid: np.ndarray,
    index: InnerProductIndex,
    k: int,
    exclude_ids: set[str] | frozenset = frozenset(),
) -> list[str]:
    """First k entries of rank_by_inner_product, in the same order.

    Exact selection via an O(n) partition instead of a full sort; ties at the
    selection boundary are resolved by ascending news id, identical to the
    full ranking.
    """
    rows, scores = _eligible_rows_and_scores(centroid, index, exclude_ids)
    if k <= 0:
        return []
    if k >= len(rows):
        order = rows[np.argsort(scores[rows], kind="stable")]
        return [index.ids[i] for i in order]
    eligible = scores[rows]
    part = np.argpartition(eligible, k - 1)[:k]
    threshold = eligible[part].max()
    strictly = rows[eligible < threshold]
    ties = rows[eligible == threshold]  # ascending row == ascending id
    chosen = np.concatenate([strictly, ties[: k - len(strictly)]])
    order = chosen[np.argsort(scores[chosen], kind="stable")]
    return [index.ids[i] for i in order]


def _capped_positives(
    history_ids: Sequence[str], encoder: FeatureEncoder, max_samples: int
) -> list[str]:
    """Most recent encodable reads, up to the cap (oldest-first output)."""
    usable = [nid for nid in history_ids if encoder.can_encode(nid)]
    return usable[-max_samples:]


def _materialize(
    user_id: str,
    sampler: str,
    positive_ids: Sequence[str],
    negative_ids: Sequence[str],
    catalog: Catalog,
    encoder: FeatureEncoder,
    warning: str | None = None,
) -> SyntheticPool:
    entries = [PoolEntry(nid, 1, encoder.encode(catalog[nid])) for nid in positive_ids]
    entries += [PoolEntry(nid, 0, encoder.encode(catalog[nid])) for nid in negative_ids]
    return SyntheticPool(
        user_id=user_id,
        entries=entries,
        r_pos=len(positive_ids),
        n_neg=len(negative_ids),
        sampler=sampler,
        warning=warning,
    )


def synthetic_pool(
    user_id: str,
    history_ids: Sequence[str],
    index: InnerProductIndex,
    catalog: Catalog,
    encoder: FeatureEncoder,
    max_samples: int = DEFAULT_MAX_SAMPLES,
    rng: np.random.Generator | None = None,
) -> SyntheticPool:
    """Balanced pool: recent reads vs. the items farthest from their centroid.

    Negatives are the first r entries of the ascending inner-product ranking
    with the user's full history excluded, so no negative was ever read. A
    degenerate all-zero centroid (possible with antipodal history) falls back
    to random sampling for that user; `rng` is only used in that case.
    """
    positives = _capped_positives(history_ids, encoder, max_samples)
    if not positives:
        raise SkipUser("empty history: no encodable reads")
    centroid = user_centroid(history_ids, index, max_samples=max_samples)
    if not np.any(np.abs(centroid) > 1e-12):
        log.warning("user %s: zero centroid, falling back to random negatives", user_id)
        if rng is None:
            rng = np.random.default_rng(0)
        pool = random_pool(
            user_id, history_ids, list(index.ids), catalog, encoder, rng, max_samples=max_samples
        )
        pool.sampler = "synthetic"
        pool.warning = "zero centroid: random fallback"
        return pool
    negatives = farthest_k_ids(centroid, index, len(positives), exclude_ids=set(history_ids))
    warning = None
    if len(negatives) < len(positives):
        warning = f"only {len(negatives)} candidates available for {len(positives)} positives"
        log.warning("user %s: %s", user_id, warning)
    return _materialize(user_id, "synthetic", positives, negatives, catalog, encoder, warning)


def random_pool(
    user_id: str,
    history_ids: Sequence[str],
    candidate_ids: Sequence[str],
    catalog: Catalog,
    encoder: FeatureEncoder,
    rng: np.random.Generator,
    max_samples: int = DEFAULT_MAX_SAMPLES,
) -> SyntheticPool:
    """Baseline: negatives drawn uniformly from unread items, no replacement."""
    positives = _capped_positives(history_ids, encoder, max_samples)
    if not positives:
        raise SkipUser("empty history: no encodable reads")
    history = set(history_ids)
    eligible = [nid for nid in candidate_ids if nid not in history and encoder.can_encode(nid)]
    warning = None
    if len(eligible) < len(positives):
        warning = f"only {len(eligible)} unread items for {len(positives)} positives"
        log.warning("user %s: %s", user_id, warning)
        negatives = list(eligible)
    else:
        picks = rng.choice(len(eligible), size=len(positives), replace=False)
        negatives = [eligible[i] for i in sorted(picks)]
    return _materialize(user_id, "random", positives, negatives, catalog, encoder, warning)


def impressions_pool(
    user_id: str,
    user_records: Sequence[ImpressionRecord],
    catalog: Catalog,
    encoder: FeatureEncoder,
    max_samples: int = DEFAULT_MAX_SAMPLES,
) -> SyntheticPool:
    """Baseline: shown candidates with their click labels as the pool.

    An id shown several times collapses to one entry; a click anywhere wins.
    Each label side is truncated independently to its most recent
    `max_samples` entries, so the pool is not forced to balance.
    """
    if not user_records:
        raise SkipUser("user has no impression records")
    label_of: dict[str, int] = {}
    last_seen: dict[str, int] = {}
    tick = 0
    for rec in sorted(user_records, key=lambda r: (r.timestamp, r.impression_id)):
        for nid, label in rec.candidates:
            if not encoder.can_encode(nid) or nid not in catalog:
                continue
            label_of[nid] = max(label, label_of.get(nid, 0))
            last_seen[nid] = tick
            tick += 1
    if not label_of:
        raise SkipUser("no encodable impression candidates")
    by_recency = sorted(label_of, key=last_seen.__getitem__)
    positives = [nid for nid in by_recency if label_of[nid] == 1][-max_samples:]
    negatives = [nid for nid in by_recency if label_of[nid] == 0][-max_samples:]
    warning = None
    if not negatives:
        warning = "no non-clicked impression candidates"
        log.warning("user %s: %s", user_id, warning)
    elif not positives:
        warning = "no clicked impression candidates"
        log.warning("user %s: %s", user_id, warning)
    return _materialize(user_id, "impressions", positives, negatives, catalog, encoder, warning)


def eq1_identity_check(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """For unit vectors returns (||x-y||^2, 2 - 2*<x,y>); the two coincide.

    This identity is why ascending inner product equals descending distance.
    Non-unit inputs violate the precondition and raise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    for name, v in (("x", x), ("y", y)):
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-4:
            raise NumericError(f"{name} is not a unit vector (norm {norm:.6f})")
    diff = x - y
    lhs = float(diff @ diff)
    rhs = float(2.0 - 2.0 * (x @ y))
    return lhs, rhs


# ---------------------------------------------------------------------------
# Pool file (DNNR-POOL, little-endian):
#   magic "DNNRPOL1" | u32 version=1 | u32 meta_len | meta JSON | u64 count
#   count * [u16 uid_len | uid | u16 warn_len | warn | u32 r_pos | u32 n_neg
#            | u32 n_entries | n_entries * [u16 id_len | id | u8 label]]
#   u64 FNV-1a checksum
# Feature vectors are not stored: they are reproducible from the embedding
# file and vocabularies, which ship separately to the training stage.
# ---------------------------------------------------------------------------


def save_pools(pools: Sequence[SyntheticPool], path: str | Path, meta: dict) -> None:
    writer = ChecksumWriter(POOL_MAGIC)
    writer.pack("<I", POOL_VERSION)
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    writer.pack("<I", len(meta_blob))
    writer.write(meta_blob)
    writer.pack("<Q", len(pools))
    for pool in pools:
        writer.write_str(pool.user_id)
        writer.write_str(pool.warning or "")
        writer.pack("<III", pool.r_pos, pool.n_neg, len(pool.entries))
        for entry in pool.entries:
            writer.write_str(entry.news_id)
            writer.pack("<B", entry.label)
    writer.save(path)


def load_pools(path: str | Path) -> tuple[list[SyntheticPool], dict]:
    """Read a pool file; entries come back without feature vectors."""
    reader = read_checksummed(path, POOL_MAGIC)
    version = reader.unpack("<I")
    if version != POOL_VERSION:
        raise FormatError(f"{path}: unsupported pool file version {version}")
    meta = json.loads(reader.read(reader.unpack("<I")).decode("utf-8"))
    count = reader.unpack("<Q")
    meta["sampler"] = meta.get("sampler", "synthetic")
    pools = []
    for _ in range(count):
        user_id = reader.read_str()
        warning = reader.read_str() or None
        r_pos, n_neg, n_entries = reader.unpack("<III")
        entries = []
        for _ in range(n_entries):
            nid = reader.read_str()
            label = reader.unpack("<B")
            entries.append(PoolEntry(nid, label))
        pools.append(SyntheticPool(user_id, entries, r_pos, n_neg, meta["sampler"], warning))
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after {count} pools")
    return pools, meta
