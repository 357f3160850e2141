"""Title encoders: a sentence-transformer backend and an offline fallback."""

from __future__ import annotations

import hashlib
import re

import numpy as np

from embed_export import DEFAULT_MODEL_ID, EXPECTED_DIM

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class EncoderError(Exception):
    pass


class SentenceTransformerEncoder:
    """Wraps a sentence-transformers checkpoint; embeddings come out unit-norm.

    Inference runs with a fixed batch size and normalization enabled, so a
    given checkpoint produces identical files across runs.
    """

    backend = "sentence-transformers"

    def __init__(self, model_id: str = DEFAULT_MODEL_ID, batch_size: int = 64) -> None:
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderError(
                "sentence-transformers is not installed; install the 'st' extra "
                "or use --backend hashed"
            ) from exc
        try:
            self._model = SentenceTransformer(model_id, device="cpu")
        except Exception as exc:
            raise EncoderError(f"cannot load sentence encoder {model_id!r}: {exc}") from exc
        self.model_id = model_id
        self.batch_size = batch_size
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode(self, titles: list[str]) -> np.ndarray:
        try:
            out = self._model.encode(
                titles,
                batch_size=self.batch_size,
                convert_to_numpy=True,
                normalize_embeddings=True,
                show_progress_bar=False,
            )
        except Exception as exc:
            if "memory" in str(exc).lower():
                raise EncoderError(
                    f"encoder ran out of memory at batch size {self.batch_size}; retry with "
                    "a smaller --batch-size"
                ) from exc
            raise EncoderError(f"encoding failed: {exc}") from exc
        return np.asarray(out, dtype=np.float32)


class HashedEncoder:
    """Deterministic, dependency-free encoder for tests and offline runs.

    Each token hashes to a seeded Gaussian vector; a title is the normalized
    mean of its token vectors. No semantic quality is claimed; the value is
    bit-reproducibility with the exact output shape of the real model.
    """

    backend = "hashed"

    def __init__(self, dim: int = EXPECTED_DIM, seed: int = 0, batch_size: int = 64) -> None:
        self.model_id = f"hashed-v1-dim{dim}-seed{seed}"
        self.dim = dim
        self.seed = seed
        self.batch_size = batch_size
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}|{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "big"))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self._cache[token] = vec
        return vec

    def encode(self, titles: list[str]) -> np.ndarray:
        out = np.zeros((len(titles), self.dim), dtype=np.float32)
        for row, title in enumerate(titles):
            tokens = _TOKEN_RE.findall(title.lower())
            if not tokens:
                continue
            acc = np.zeros(self.dim, dtype=np.float64)
            for tok in tokens:
                acc += self._token_vector(tok)
            acc /= len(tokens)
            norm = np.linalg.norm(acc)
            if norm > 0:
                out[row] = (acc / norm).astype(np.float32)
        return out


def make_encoder(backend: str, model_id: str | None, batch_size: int):
    if backend == "sentence-transformers":
        return SentenceTransformerEncoder(model_id or DEFAULT_MODEL_ID, batch_size)
    if backend == "hashed":
        return HashedEncoder(batch_size=batch_size)
    raise EncoderError(f"unknown encoder backend {backend!r}")
