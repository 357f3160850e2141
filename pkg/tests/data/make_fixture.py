"""Regenerate the bundled TSV fixtures (checked in; run only to refresh them).

Usage: python tests/data/make_fixture.py
"""

from pathlib import Path

from newsrec.ingest import parse_behaviors, parse_news
from newsrec.synthetic import CorpusProfile, generate_corpus, write_corpus_tsv

HERE = Path(__file__).parent

FIXTURE_PROFILE = CorpusProfile(
    n_items=400,
    n_users=160,
    n_topics=16,
    topics_per_type=4,
    impressions_min=4,
    impressions_max=10,
    seed=20191115,
)
FIXTURE_ROWS = 1000


def main() -> None:
    catalog, records = generate_corpus(FIXTURE_PROFILE)
    news_path = HERE / "fixture_news.tsv"
    behaviors_path = HERE / "fixture_behaviors.tsv"
    write_corpus_tsv(catalog, records, news_path, behaviors_path, max_behavior_rows=FIXTURE_ROWS)

    with open(news_path, encoding="utf-8") as fh:
        cat = parse_news(fh)
    with open(behaviors_path, encoding="utf-8") as fh:
        recs = parse_behaviors(fh)
    users = {r.user_id for r in recs}
    print(f"news items: {len(cat)}")
    print(f"behavior rows: {len(recs)}")
    print(f"distinct users: {len(users)}")
    print(f"types: {len({i.news_type for i in cat})}")
    print(f"categories: {len({i.news_category for i in cat})}")


if __name__ == "__main__":
    main()
