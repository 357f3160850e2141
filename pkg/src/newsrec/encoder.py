"""Title embeddings and fixed-size feature vectors.

A feature vector is the concatenation (in this order) of a 384-d title
embedding, a one-hot news type, and a one-hot news category; feature sets
select which slices are present. The embedding slice must stay first: the
network's bottleneck path consumes exactly the leading embedding dimensions.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from newsrec.binio import ChecksumWriter, derive_seed, read_checksummed
from newsrec.errors import DataError, FormatError, NumericError
from newsrec.ingest import Catalog, NewsItem, Vocabulary

log = logging.getLogger(__name__)

EMB_MAGIC = b"DNNREMB1"
EMB_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class FeatureSet(Enum):
    """Feature ablation switch: which slices enter the vector."""

    EMB = "emb"
    TC = "tc"
    EMB_C = "embc"
    EMB_T = "embt"
    EMB_TC = "embtc"

    @property
    def has_embedding(self) -> bool:
        return self is not FeatureSet.TC

    @property
    def has_type(self) -> bool:
        return self in (FeatureSet.TC, FeatureSet.EMB_T, FeatureSet.EMB_TC)

    @property
    def has_category(self) -> bool:
        return self in (FeatureSet.TC, FeatureSet.EMB_C, FeatureSet.EMB_TC)

    @classmethod
    def parse(cls, name: str) -> "FeatureSet":
        key = name.strip().lower().replace("-", "").replace("_", "").replace("&", "")
        for fs in cls:
            if fs.value == key:
                return fs
        raise DataError(f"unknown feature set {name!r}; choose from "
                        f"{', '.join(fs.value for fs in cls)}")


@dataclass
class EmbeddingStore:
    """In-memory map news_id -> float32 vector, all of one dimension."""

    dim: int
    vectors: dict[str, np.ndarray]
    normalized: bool = False
    zero_ids: frozenset = frozenset()

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, news_id: str) -> bool:
        return news_id in self.vectors

    def get(self, news_id: str) -> np.ndarray:
        try:
            return self.vectors[news_id]
        except KeyError:
            raise DataError(f"no embedding for news id {news_id!r}") from None

    def normalize(self) -> "EmbeddingStore":
        """L2-normalize every vector; zero vectors are kept and flagged."""
        out: dict[str, np.ndarray] = {}
        zeros = set(self.zero_ids)
        for nid, vec in self.vectors.items():
            normed, is_zero = l2_normalize(vec)
            out[nid] = normed
            if is_zero:
                zeros.add(nid)
        return EmbeddingStore(self.dim, out, normalized=True, zero_ids=frozenset(zeros))


def l2_normalize(vector: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale to unit L2 norm. Returns (vector, is_zero).

    All-zero input is returned unchanged with the flag set. Non-finite input
    raises NumericError.
    """
    vec = np.asarray(vector)
    if not np.isfinite(vec).all():
        raise NumericError("cannot normalize a vector with NaN or Inf entries")
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if norm == 0.0:
        return vec.copy(), True
    return (vec.astype(np.float64) / norm).astype(vec.dtype), False


def tokenize(title: str) -> list[str]:
    return _TOKEN_RE.findall(title.lower())


class HashEmbedder:
    """Deterministic stand-in for a sentence encoder.

    Each token maps to a seeded Gaussian vector; a title embeds as the L2
    normalized mean of its token vectors. Identical titles always produce
    identical vectors, so tests and offline runs need no model files.
    """

    def __init__(self, dim: int = 384, seed: int = 0) -> None:
        if dim < 1:
            raise DataError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            rng = np.random.default_rng(derive_seed("hash-embed", self.seed, token))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self._token_cache[token] = vec
        return vec

    def embed(self, title: str) -> np.ndarray:
        tokens = tokenize(title)
        if not tokens:
            return np.zeros(self.dim, dtype=np.float32)
        acc = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            acc += self._token_vector(tok)
        acc /= len(tokens)
        normed, _ = l2_normalize(acc.astype(np.float32))
        return normed

    def embed_catalog(self, catalog: Catalog) -> EmbeddingStore:
        vectors = {item.news_id: self.embed(item.title) for item in catalog}
        zeros = frozenset(nid for nid, v in vectors.items() if not v.any())
        return EmbeddingStore(self.dim, vectors, normalized=True, zero_ids=zeros)


def hash_embed(title: str, dim: int, seed: int) -> np.ndarray:
    """One-shot form of HashEmbedder.embed."""
    return HashEmbedder(dim=dim, seed=seed).embed(title)


# ---------------------------------------------------------------------------
# DNNR-EMB binary format (little-endian):
#   magic "DNNREMB1" | u32 version=1 | u32 dim | u64 count
#   count * [u16 id_len | id utf-8 | dim * f32]
#   u64 FNV-1a checksum of all preceding bytes
# ---------------------------------------------------------------------------


def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    writer = ChecksumWriter(EMB_MAGIC)
    writer.pack("<IIQ", EMB_VERSION, store.dim, len(store.vectors))
    for nid, vec in store.vectors.items():
        if vec.shape != (store.dim,):
            raise DataError(f"vector for {nid!r} has shape {vec.shape}, expected ({store.dim},)")
        writer.write_str(nid)
        writer.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    writer.save(path)


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Load a DNNR-EMB file; any corruption fails before a store is built."""
    reader = read_checksummed(path, EMB_MAGIC)
    version, dim, count = reader.unpack("<IIQ")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported embedding file version {version}")
    vectors: dict[str, np.ndarray] = {}
    vec_bytes = 4 * dim
    for _ in range(count):
        nid = reader.read_str()
        vec = np.frombuffer(reader.read(vec_bytes), dtype="<f4").copy()
        vectors[nid] = vec
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after {count} records")
    if len(vectors) != count:
        raise FormatError(f"{path}: duplicate ids; {count} records gave {len(vectors)} entries")
    return EmbeddingStore(dim=dim, vectors=vectors)


# ---------------------------------------------------------------------------
# Feature vectors
# ---------------------------------------------------------------------------


@dataclass
class FeatureLayout:
    """Slice widths of the assembled vector, in fixed order."""

    embedding_dim: int
    type_dim: int
    category_dim: int

    @property
    def total_dim(self) -> int:
        return self.embedding_dim + self.type_dim + self.category_dim


class FeatureEncoder:
    """Assembles feature vectors for news items.

    Unknown type/category labels encode as an all-zero one-hot with a warning
    (test splits can contain unseen labels); a missing embedding is an error
    because the vector would be structurally wrong.
    """

    def __init__(
        self,
        store: EmbeddingStore | None,
        type_vocab: Vocabulary,
        category_vocab: Vocabulary,
        feature_set: FeatureSet = FeatureSet.EMB_TC,
    ) -> None:
        if feature_set.has_embedding and store is None:
            raise DataError(f"feature set {feature_set.value} needs an embedding store")
        self.store = store
        self.type_vocab = type_vocab
        self.category_vocab = category_vocab
        self.feature_set = feature_set
        self.layout = FeatureLayout(
            embedding_dim=store.dim if feature_set.has_embedding else 0,
            type_dim=len(type_vocab) if feature_set.has_type else 0,
            category_dim=len(category_vocab) if feature_set.has_category else 0,
        )
        self._warned_labels: set[str] = set()

    @property
    def input_dim(self) -> int:
        return self.layout.total_dim

    def can_encode(self, news_id: str) -> bool:
        return not self.feature_set.has_embedding or (self.store is not None and news_id in self.store)

    def _one_hot(self, vocab: Vocabulary, label: str, kind: str) -> np.ndarray:
        vec = np.zeros(len(vocab), dtype=np.float32)
        idx = vocab.index.get(label)
        if idx is None:
            if label not in self._warned_labels:
                self._warned_labels.add(label)
                log.warning("unknown %s label %r: encoding all-zero one-hot", kind, label)
        else:
            vec[idx] = 1.0
        return vec

    def encode(self, item: NewsItem) -> np.ndarray:
        parts = []
        if self.feature_set.has_embedding:
            parts.append(np.asarray(self.store.get(item.news_id), dtype=np.float32))
        if self.feature_set.has_type:
            parts.append(self._one_hot(self.type_vocab, item.news_type, "type"))
        if self.feature_set.has_category:
            parts.append(self._one_hot(self.category_vocab, item.news_category, "category"))
        return np.concatenate(parts)

    def encode_many(self, items: list[NewsItem]) -> np.ndarray:
        if not items:
            return np.zeros((0, self.input_dim), dtype=np.float32)
        return np.stack([self.encode(item) for item in items])


def feature_vector(
    item: NewsItem,
    store: EmbeddingStore | None,
    type_vocab: Vocabulary,
    category_vocab: Vocabulary,
    feature_set: FeatureSet = FeatureSet.EMB_TC,
) -> np.ndarray:
    """One-shot form of FeatureEncoder.encode."""
    return FeatureEncoder(store, type_vocab, category_vocab, feature_set).encode(item)
