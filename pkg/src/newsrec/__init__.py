"""Per-user content-based news recommendation.

Pipeline: ingest MIND-format TSV logs, encode news into fixed-size feature
vectors (sentence embedding + one-hot type/category), build balanced per-user
training pools with one of three negative samplers, train one small
feed-forward network per user, and evaluate ranking quality (AUC) against
held-out impressions.
"""

from newsrec.errors import (
    DataError,
    FormatError,
    NewsrecError,
    NumericError,
    SkipUser,
    UndefinedAUCError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "FormatError",
    "NewsrecError",
    "NumericError",
    "SkipUser",
    "UndefinedAUCError",
    "UsageError",
    "__version__",
]
