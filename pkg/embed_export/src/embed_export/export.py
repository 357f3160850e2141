"""Export pipeline: news.tsv -> DNNR-EMB file + JSON manifest, plus verification."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from embed_export.encoders import EncoderError, make_encoder
from embed_export.format import FormatError, iter_records, read_header, write_embedding_file

MANIFEST_FORMAT = "dnnr-emb-manifest"
MANIFEST_VERSION = 1


@dataclass
class ExportManifest:
    model_id: str
    backend: str
    dim: int
    count: int
    news_tsv_sha256: str
    created_utc: str
    format: str = MANIFEST_FORMAT
    version: int = MANIFEST_VERSION

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "ExportManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != MANIFEST_FORMAT:
            raise FormatError(f"{path}: not an export manifest")
        return cls(**data)


def read_titles(news_tsv: str | Path) -> list[tuple[str, str]]:
    """(news_id, title) pairs from a MIND-format news.tsv (columns 1 and 4)."""
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(news_tsv, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise FormatError(f"{news_tsv}:{lineno}: expected >= 4 tab-separated columns")
            news_id, title = cols[0], cols[3]
            if news_id in seen:
                continue
            seen.add(news_id)
            out.append((news_id, title))
    return out


def export_embeddings(
    news_tsv: str | Path,
    out_path: str | Path,
    backend: str = "sentence-transformers",
    model_id: str | None = None,
    batch_size: int = 64,
    manifest_path: str | Path | None = None,
) -> ExportManifest:
    """Embed every title and write the DNNR-EMB file plus its manifest."""
    news_tsv = Path(news_tsv)
    encoder = make_encoder(backend, model_id, batch_size)
    pairs = read_titles(news_tsv)
    if not pairs:
        raise FormatError(f"{news_tsv}: no news records found")

    ids = [nid for nid, _ in pairs]
    titles = [title for _, title in pairs]
    vectors = np.zeros((len(titles), encoder.dim), dtype=np.float32)
    for start in range(0, len(titles), batch_size):
        vectors[start : start + batch_size] = encoder.encode(titles[start : start + batch_size])
    if not np.isfinite(vectors).all():
        raise EncoderError("encoder produced non-finite values")

    count = write_embedding_file(out_path, encoder.dim, zip(ids, vectors))
    manifest = ExportManifest(
        model_id=encoder.model_id,
        backend=encoder.backend,
        dim=encoder.dim,
        count=count,
        news_tsv_sha256=hashlib.sha256(news_tsv.read_bytes()).hexdigest(),
        created_utc=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    manifest.write(manifest_path or default_manifest_path(out_path))
    return manifest


def default_manifest_path(out_path: str | Path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.name + ".manifest.json")


def verify_export(emb_path: str | Path, manifest_path: str | Path,
                  spot_checks: int = 10) -> tuple[bool, list[str]]:
    """Check the embedding file against its manifest.

    Validates magic/version/checksum, compares header fields with the
    manifest, and spot-decodes `spot_checks` records for finiteness.
    Returns (ok, problems); problems name the failing field.
    """
    problems: list[str] = []
    try:
        manifest = ExportManifest.read(manifest_path)
    except (FormatError, json.JSONDecodeError, OSError, TypeError) as exc:
        return False, [f"manifest: {exc}"]
    try:
        version, dim, count = read_header(emb_path)
    except (FormatError, OSError) as exc:
        return False, [f"embedding file: {exc}"]
    if dim != manifest.dim:
        problems.append(f"dim: file has {dim}, manifest says {manifest.dim}")
    if count != manifest.count:
        problems.append(f"count: file has {count}, manifest says {manifest.count}")
    if not problems:
        rng = np.random.default_rng(0)
        picks = set(rng.integers(0, count, size=min(spot_checks, count)).tolist())
        for i, (news_id, vector) in enumerate(iter_records(emb_path)):
            if i in picks and not np.isfinite(vector).all():
                problems.append(f"record {news_id!r}: non-finite values")
    return not problems, problems
