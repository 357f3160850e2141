"""Run configuration shared by the CLI and the experiment runner.

Defaults reproduce the reference setup: 60-sample cap, 15 epochs, batch size
60, dropout 0.2. A JSON config file can set any field; command-line flags
override the file. Relative input paths resolve against $NEWSREC_DATA_ROOT
when it is set.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from newsrec.errors import UsageError

ENV_DATA_ROOT = "NEWSREC_DATA_ROOT"


@dataclass(frozen=True)
class RunConfig:
    # Inputs and outputs (commands use the subset they need).
    news_path: str | None = None
    behaviors_path: str | None = None
    store_dir: str | None = None
    embeddings_path: str | None = None
    pools_path: str | None = None
    models_dir: str | None = None
    report_dir: str | None = None

    sampler: str = "synthetic"
    feature_set: str = "embtc"
    max_samples: int = 60
    epochs: int = 15
    batch_size: int = 60
    learning_rate: float = 1e-3
    dropout_rate: float = 0.2
    seed: int = 0
    workers: int = 1
    user_limit: int | None = None
    embedding_mode: str = "file"  # "file" (DNNR-EMB) or "hash" (deterministic fallback)
    hash_dim: int = 384
    train_fraction: float = 0.5
    include_clicked_history: bool = False
    strict_parse: bool = False

    def __post_init__(self) -> None:
        if self.sampler not in ("synthetic", "random", "impressions"):
            raise UsageError(f"unknown sampler {self.sampler!r}")
        if self.embedding_mode not in ("file", "hash"):
            raise UsageError(f"unknown embedding_mode {self.embedding_mode!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise UsageError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.max_samples < 1:
            raise UsageError(f"max_samples must be >= 1, got {self.max_samples}")
        if self.workers < 1:
            raise UsageError(f"workers must be >= 1, got {self.workers}")


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config_file(path: str | Path) -> dict:
    """Read a JSON config file; unknown keys are a usage error."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must contain a JSON object")
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise UsageError(f"config file {path}: unknown keys {sorted(unknown)}")
    return data


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from file values with flag overrides on top."""
    merged: dict = {}
    merged.update(file_values or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    unknown = set(merged) - _FIELD_NAMES
    if unknown:
        raise UsageError(f"unknown configuration keys {sorted(unknown)}")
    return RunConfig(**merged)


def resolve_data_path(path: str | Path) -> Path:
    """Resolve a relative input path against $NEWSREC_DATA_ROOT if set."""
    path = Path(path)
    root = os.environ.get(ENV_DATA_ROOT)
    if root and not path.is_absolute():
        return Path(root) / path
    return path
