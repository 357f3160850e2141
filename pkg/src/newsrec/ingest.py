"""Parse MIND-format TSV files into a news catalog and behavior records.

Column mapping note: MIND's "category" column is the coarse label (16 values
on MIND-small) and is stored here as `news_type`; MIND's "subcategory" column
(212 values) is stored as `news_category`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from newsrec.binio import write_atomic
from newsrec.errors import DataError, FormatError, UsageError

log = logging.getLogger(__name__)

MIND_TIME_FORMAT = "%m/%d/%Y %I:%M:%S %p"

CATALOG_STORE_FORMAT = "newsrec.catalog"
BEHAVIORS_STORE_FORMAT = "newsrec.behaviors"
STORE_VERSION = 1


@dataclass
class NewsItem:
    news_id: str
    news_type: str
    news_category: str
    title: str

    def to_tsv_row(self) -> str:
        return "\t".join((self.news_id, self.news_type, self.news_category, self.title))


@dataclass
class ImpressionRecord:
    impression_id: int
    user_id: str
    timestamp: datetime
    history: list[str]
    candidates: list[tuple[str, int]]
    # Original time token, kept so round-trips are byte-exact.
    raw_time: str = ""

    def __post_init__(self) -> None:
        if not self.raw_time:
            self.raw_time = format_mind_time(self.timestamp)

    def clicked_ids(self) -> list[str]:
        return [nid for nid, label in self.candidates if label == 1]

    def to_tsv_row(self) -> str:
        """Re-serialize to the behaviors.tsv row format, token for token."""
        cands = " ".join(f"{nid}-{label}" for nid, label in self.candidates)
        return "\t".join(
            (str(self.impression_id), self.user_id, self.raw_time, " ".join(self.history), cands)
        )


@dataclass(frozen=True)
class Vocabulary:
    """Deterministic label-to-index mapping (lexicographic order)."""

    labels: tuple[str, ...]
    index: dict[str, int] = field(hash=False, compare=False, default_factory=dict)

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "Vocabulary":
        ordered = tuple(sorted(set(labels)))
        return cls(labels=ordered, index={lab: i for i, lab in enumerate(ordered)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self.index


class Catalog:
    """News items keyed by id, preserving first-seen order."""

    def __init__(self, items: Iterable[NewsItem] = ()) -> None:
        self._items: dict[str, NewsItem] = {}
        for item in items:
            self.add(item)

    def add(self, item: NewsItem) -> None:
        if item.news_id in self._items:
            log.warning("duplicate news id %s: keeping the last occurrence", item.news_id)
        self._items[item.news_id] = item

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, news_id: str) -> bool:
        return news_id in self._items

    def __getitem__(self, news_id: str) -> NewsItem:
        return self._items[news_id]

    def __iter__(self) -> Iterator[NewsItem]:
        return iter(self._items.values())

    def get(self, news_id: str) -> NewsItem | None:
        return self._items.get(news_id)

    @property
    def ids(self) -> list[str]:
        return list(self._items)


def format_mind_time(dt: datetime) -> str:
    """MIND's time format: zero-padded date, unpadded 12-hour clock."""
    hour = dt.hour % 12 or 12
    ampm = "AM" if dt.hour < 12 else "PM"
    return f"{dt.month:02d}/{dt.day:02d}/{dt.year} {hour}:{dt.minute:02d}:{dt.second:02d} {ampm}"


def parse_mind_time(token: str) -> datetime:
    return datetime.strptime(token, MIND_TIME_FORMAT)


def _check(condition: bool, strict: bool, message: str) -> bool:
    """Record-level error handling: raise in strict mode, warn+skip otherwise."""
    if condition:
        return True
    if strict:
        raise DataError(message)
    log.warning("%s (skipped)", message)
    return False


def parse_news(lines: Iterable[str], strict: bool = False) -> Catalog:
    """Parse a news.tsv stream. Columns: id, type, category, title; rest ignored."""
    catalog = Catalog()
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        cols = line.split("\t")
        if not _check(len(cols) >= 4, strict, f"news line {lineno}: expected >=4 columns, got {len(cols)}"):
            continue
        news_id, news_type, news_category, title = cols[0], cols[1], cols[2], cols[3]
        if not _check(bool(news_id), strict, f"news line {lineno}: empty news id"):
            continue
        catalog.add(NewsItem(news_id, news_type, news_category, title))
    log.info("parsed catalog: %d items", len(catalog))
    return catalog


def _parse_candidate(token: str, lineno: int) -> tuple[str, int]:
    news_id, sep, label = token.rpartition("-")
    if not sep or label not in ("0", "1") or not news_id:
        raise DataError(f"behaviors line {lineno}: bad candidate token {token!r}")
    return news_id, int(label)


def parse_behaviors(lines: Iterable[str], strict: bool = False) -> list[ImpressionRecord]:
    """Parse a behaviors.tsv stream.

    Columns: impression id, user id, time, space-separated history,
    space-separated "newsid-label" candidates. History may be empty;
    candidates must not be.
    """
    records: list[ImpressionRecord] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        cols = line.split("\t")
        if not _check(len(cols) == 5, strict, f"behaviors line {lineno}: expected 5 columns, got {len(cols)}"):
            continue
        imp_id, user_id, time_token, history_field, cand_field = cols
        try:
            impression_id = int(imp_id)
            timestamp = parse_mind_time(time_token)
            candidates = [_parse_candidate(tok, lineno) for tok in cand_field.split()]
            if not candidates:
                raise DataError(f"behaviors line {lineno}: no candidates")
        except (ValueError, DataError) as exc:
            message = str(exc) if isinstance(exc, DataError) else f"behaviors line {lineno}: {exc}"
            _check(False, strict, message)
            continue
        history = history_field.split() if history_field else []
        records.append(
            ImpressionRecord(impression_id, user_id, timestamp, history, candidates, raw_time=time_token)
        )
    log.info("parsed behaviors: %d records, %d users", len(records), len({r.user_id for r in records}))
    return records


def records_by_user(records: Sequence[ImpressionRecord]) -> dict[str, list[ImpressionRecord]]:
    """Group records per user, each list sorted by (timestamp, impression id)."""
    grouped: dict[str, list[ImpressionRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.user_id, []).append(rec)
    for recs in grouped.values():
        recs.sort(key=lambda r: (r.timestamp, r.impression_id))
    return grouped


def build_user_history(
    records: Sequence[ImpressionRecord], include_clicks: bool = True
) -> dict[str, list[str]]:
    """Per-user ordered list of read news ids.

    The history columns are merged in time order with first-seen order kept;
    when `include_clicks` is set, clicked impression candidates are appended
    in impression-time order. Each id appears once.
    """
    histories: dict[str, list[str]] = {}
    for user_id, recs in records_by_user(records).items():
        seen: set[str] = set()
        merged: list[str] = []
        for rec in recs:
            for nid in rec.history:
                if nid not in seen:
                    seen.add(nid)
                    merged.append(nid)
        if include_clicks:
            for rec in recs:
                for nid in rec.clicked_ids():
                    if nid not in seen:
                        seen.add(nid)
                        merged.append(nid)
        histories[user_id] = merged
    return histories


def build_vocab(catalog: Catalog, fieldname: str) -> Vocabulary:
    """Vocabulary over `news_type` ("type") or `news_category` ("category")."""
    if fieldname == "type":
        labels = (item.news_type for item in catalog)
    elif fieldname == "category":
        labels = (item.news_category for item in catalog)
    else:
        raise UsageError(f"unknown vocabulary field {fieldname!r}; use 'type' or 'category'")
    if len(catalog) == 0:
        raise UsageError("cannot build a vocabulary from an empty catalog")
    return Vocabulary.from_labels(labels)


def user_activity_stats(histories: dict[str, list[str]]) -> dict[str, float]:
    """Descriptive stats over per-user read counts."""
    counts = np.array([len(h) for h in histories.values()], dtype=np.int64)
    if counts.size == 0:
        return {"users": 0}
    return {
        "users": int(counts.size),
        "mean": float(counts.mean()),
        "std": float(counts.std(ddof=1)) if counts.size > 1 else 0.0,
        "min": int(counts.min()),
        "p25": float(np.percentile(counts, 25)),
        "median": float(np.median(counts)),
        "p75": float(np.percentile(counts, 75)),
        "max": int(counts.max()),
    }


# ---------------------------------------------------------------------------
# Persistent store: newline-delimited JSON with a versioned header line.
# ---------------------------------------------------------------------------


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    lines = [json.dumps({"format": CATALOG_STORE_FORMAT, "version": STORE_VERSION, "count": len(catalog)})]
    for item in catalog:
        lines.append(
            json.dumps(
                {"id": item.news_id, "type": item.news_type, "category": item.news_category, "title": item.title},
                ensure_ascii=False,
            )
        )
    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _read_store_header(path: str | Path, expected_format: str) -> tuple[dict, list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty store file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad store header: {exc}") from exc
    if header.get("format") != expected_format:
        raise FormatError(f"{path}: expected format {expected_format!r}, got {header.get('format')!r}")
    if header.get("version") != STORE_VERSION:
        raise FormatError(f"{path}: unsupported store version {header.get('version')!r}")
    body = lines[1:]
    if header.get("count") != len(body):
        raise FormatError(f"{path}: header count {header.get('count')} != {len(body)} records")
    return header, body


def load_catalog(path: str | Path) -> Catalog:
    _, body = _read_store_header(path, CATALOG_STORE_FORMAT)
    catalog = Catalog()
    for line in body:
        rec = json.loads(line)
        catalog.add(NewsItem(rec["id"], rec["type"], rec["category"], rec["title"]))
    return catalog


def save_behaviors(records: Sequence[ImpressionRecord], path: str | Path) -> None:
    lines = [json.dumps({"format": BEHAVIORS_STORE_FORMAT, "version": STORE_VERSION, "count": len(records)})]
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "impression_id": rec.impression_id,
                    "user_id": rec.user_id,
                    "time": rec.raw_time,
                    "history": rec.history,
                    "candidates": [[nid, label] for nid, label in rec.candidates],
                },
                ensure_ascii=False,
            )
        )
    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_behaviors(path: str | Path) -> list[ImpressionRecord]:
    _, body = _read_store_header(path, BEHAVIORS_STORE_FORMAT)
    records = []
    for line in body:
        rec = json.loads(line)
        records.append(
            ImpressionRecord(
                impression_id=rec["impression_id"],
                user_id=rec["user_id"],
                timestamp=parse_mind_time(rec["time"]),
                history=list(rec["history"]),
                candidates=[(nid, int(label)) for nid, label in rec["candidates"]],
                raw_time=rec["time"],
            )
        )
    return records
