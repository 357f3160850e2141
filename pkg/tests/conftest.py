import os
from pathlib import Path

import pytest

from newsrec.ingest import Catalog, NewsItem, parse_behaviors, parse_news
from newsrec.synthetic import generate_corpus, small_profile

DATA_DIR = Path(__file__).parent / "data"

FIXTURE_NEWS = DATA_DIR / "fixture_news.tsv"
FIXTURE_BEHAVIORS = DATA_DIR / "fixture_behaviors.tsv"

# Frozen facts about the bundled fixture (see tests/data/make_fixture.py).
FIXTURE_ROWS = 1000
FIXTURE_USERS = 142
FIXTURE_NEWS_COUNT = 400
FIXTURE_TYPES = 4
FIXTURE_CATEGORIES = 16


def mind_small_dir() -> Path | None:
    """Full MIND-small directory, when the environment provides one."""
    root = os.environ.get("MIND_SMALL_DIR")
    if not root:
        return None
    path = Path(root)
    if (path / "news.tsv").exists() and (path / "behaviors.tsv").exists():
        return path
    return None


requires_mind_small = pytest.mark.skipif(
    mind_small_dir() is None, reason="set MIND_SMALL_DIR to run full-dataset checks"
)


@pytest.fixture(scope="session")
def fixture_catalog() -> Catalog:
    with open(FIXTURE_NEWS, encoding="utf-8") as fh:
        return parse_news(fh)


@pytest.fixture(scope="session")
def fixture_records():
    with open(FIXTURE_BEHAVIORS, encoding="utf-8") as fh:
        return parse_behaviors(fh)


@pytest.fixture(scope="session")
def small_corpus():
    """In-memory synthetic corpus for unit tests (60 users, 300 items)."""
    return generate_corpus(small_profile())


@pytest.fixture
def tiny_catalog() -> Catalog:
    return Catalog(
        [
            NewsItem("N1", "news", "newsus", "markets rally on earnings"),
            NewsItem("N2", "news", "newsworld", "storm hits the coast"),
            NewsItem("N3", "sports", "football_nfl", "quarterback trade rumors"),
            NewsItem("N4", "sports", "golf", "major tournament recap"),
        ]
    )
