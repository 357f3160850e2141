import numpy as np
import pytest

from newsrec.encoder import EmbeddingStore, FeatureEncoder, FeatureSet, HashEmbedder
from newsrec.errors import FormatError, NumericError, SkipUser
from newsrec.ingest import Catalog, NewsItem, build_vocab, parse_behaviors
from newsrec.sampler import (
    InnerProductIndex,
    eq1_identity_check,
    farthest_k_ids,
    impressions_pool,
    load_pools,
    random_pool,
    rank_by_inner_product,
    save_pools,
    synthetic_pool,
    user_centroid,
)

TABLE_ROW = (
    "91\tU397059\t11/15/2019 10:22:32 AM\t"
    "N106403 N71977 N97080 N102132 N97212 N121652\t"
    "N129416-0 N26703-1 N120089-1 N53018-0 N89764-0 N91737-0 N29160-0"
)


def _axis_store():
    """Four catalog items sitting on unit axes of a 4-d space."""
    vectors = {
        "A": np.array([1, 0, 0, 0], dtype=np.float32),
        "B": np.array([0, 1, 0, 0], dtype=np.float32),
        "C": np.array([0, 0, 1, 0], dtype=np.float32),
        "D": np.array([0, 0, 0, 1], dtype=np.float32),
    }
    return EmbeddingStore(dim=4, vectors=vectors, normalized=True)


def _axis_catalog():
    return Catalog([NewsItem(nid, "news", "newsus", f"item {nid}") for nid in "ABCD"])


def _tc_encoder(catalog):
    return FeatureEncoder(
        None, build_vocab(catalog, "type"), build_vocab(catalog, "category"), FeatureSet.TC
    )


def _emb_encoder(catalog, store):
    return FeatureEncoder(
        store, build_vocab(catalog, "type"), build_vocab(catalog, "category"), FeatureSet.EMB_TC
    )


class TestCentroid:
    def test_single_item_is_its_embedding(self):
        index = InnerProductIndex.from_store(_axis_store())
        centroid = user_centroid(["B"], index)
        np.testing.assert_allclose(centroid, [0, 1, 0, 0], atol=1e-7)

    def test_antipodal_history_gives_zero(self):
        vectors = {
            "P": np.array([1.0, 0.0], dtype=np.float32),
            "Q": np.array([-1.0, 0.0], dtype=np.float32),
            "R": np.array([0.0, 1.0], dtype=np.float32),
        }
        index = InnerProductIndex.from_store(EmbeddingStore(2, vectors, normalized=True))
        centroid = user_centroid(["P", "Q"], index)
        assert np.abs(centroid).max() < 1e-12

    def test_mean_matches_direct_average(self):
        rng = np.random.default_rng(9)
        raw = rng.standard_normal((3, 4)).astype(np.float32)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        vectors = {f"N{i}": raw[i] for i in range(3)}
        index = InnerProductIndex.from_store(EmbeddingStore(4, vectors, normalized=True))
        centroid = user_centroid(["N0", "N1", "N2"], index)
        rows = np.stack([index.matrix[index.row_of[f"N{i}"]] for i in range(3)]).astype(np.float64)
        np.testing.assert_allclose(centroid, rows.sum(axis=0) / 3.0, rtol=0, atol=1e-12)

    def test_cap_keeps_most_recent(self):
        index = InnerProductIndex.from_store(_axis_store())
        centroid = user_centroid(["A", "B", "C"], index, max_samples=2)
        np.testing.assert_allclose(centroid, [0.0, 0.5, 0.5, 0.0], atol=1e-7)

    def test_unresolvable_history_skips(self):
        index = InnerProductIndex.from_store(_axis_store())
        with pytest.raises(SkipUser):
            user_centroid(["Z1", "Z2"], index)


class TestRanking:
    def test_hand_case(self):
        vectors = {
            "A": np.array([1.0, 0.0], dtype=np.float32),
            "B": np.array([0.0, 1.0], dtype=np.float32),
            "C": np.array([-1.0, 0.0], dtype=np.float32),
        }
        index = InnerProductIndex.from_store(EmbeddingStore(2, vectors, normalized=True))
        assert rank_by_inner_product(np.array([1.0, 0.0]), index) == ["C", "B", "A"]

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((50, 8)).astype(np.float32)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        vectors = {f"N{i:03d}": raw[i] for i in range(50)}
        index = InnerProductIndex.from_store(EmbeddingStore(8, vectors, normalized=True))
        centroid = rng.standard_normal(8)
        base = rank_by_inner_product(centroid, index)
        for lam in (1e-6, 0.5, 3.0, 1e6):
            assert rank_by_inner_product(lam * centroid, index) == base

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(12)
        raw = rng.standard_normal((50, 8)).astype(np.float32)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        ids = [f"N{i:03d}" for i in range(50)]
        vectors = dict(zip(ids, raw))
        index = InnerProductIndex.from_store(EmbeddingStore(8, vectors, normalized=True))
        centroid = rng.standard_normal(8)
        expected = [
            nid for nid, _ in sorted(
                ((nid, float(index.matrix[index.row_of[nid]].astype(np.float64) @ centroid)) for nid in ids),
                key=lambda kv: (kv[1], kv[0]),
            )
        ]
        assert rank_by_inner_product(centroid, index) == expected

    def test_exclusions_removed(self):
        index = InnerProductIndex.from_store(_axis_store())
        out = rank_by_inner_product(np.array([1.0, 0, 0, 0]), index, exclude_ids={"A", "C"})
        assert set(out) == {"B", "D"}

    def test_tie_break_ascending_id(self):
        index = InnerProductIndex.from_store(_axis_store())
        out = rank_by_inner_product(np.array([1.0, 0, 0, 0]), index)
        # B, C, D all tie at inner product 0.
        assert out == ["B", "C", "D", "A"]

    def test_dim_mismatch(self):
        index = InnerProductIndex.from_store(_axis_store())
        with pytest.raises(NumericError, match="dim"):
            rank_by_inner_product(np.array([1.0, 0.0]), index)

    def test_farthest_k_equals_full_sort_prefix(self):
        rng = np.random.default_rng(31)
        raw = rng.standard_normal((120, 8)).astype(np.float32)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        # Duplicated rows force ties at arbitrary selection boundaries.
        raw[40:80] = raw[0]
        vectors = {f"N{i:03d}": raw[i] for i in range(120)}
        index = InnerProductIndex.from_store(EmbeddingStore(8, vectors, normalized=True))
        for trial in range(30):
            centroid = rng.standard_normal(8)
            exclude = {f"N{int(i):03d}" for i in rng.choice(120, size=10, replace=False)}
            full = rank_by_inner_product(centroid, index, exclude)
            for k in (0, 1, 7, 39, 41, 80, 109, 110, 200):
                assert farthest_k_ids(centroid, index, k, exclude) == full[: min(k, len(full))]


class TestSyntheticPool:
    def test_single_read_on_axis_catalog(self):
        catalog = _axis_catalog()
        store = _axis_store()
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        pool = synthetic_pool("U1", ["A"], index, catalog, encoder)
        assert pool.r_pos == 1 and pool.n_neg == 1
        # All of B, C, D have inner product 0 with A; tie-break picks B.
        assert pool.negatives()[0].news_id == "B"
        assert pool.positives()[0].news_id == "A"
        assert all(e.features is not None for e in pool.entries)

    def test_cap_keeps_most_recent_positives(self, small_corpus):
        catalog, _ = small_corpus
        store = HashEmbedder(dim=24, seed=3).embed_catalog(catalog)
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        history = catalog.ids[:80]
        pool = synthetic_pool("U1", history, index, catalog, encoder, max_samples=60)
        assert pool.r_pos == 60 and pool.n_neg == 60
        assert len(pool.entries) == 120
        assert [e.news_id for e in pool.positives()] == history[20:]

    def test_balance_and_exclusion_invariants(self, small_corpus):
        catalog, records = small_corpus
        store = HashEmbedder(dim=24, seed=3).embed_catalog(catalog)
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        rng = np.random.default_rng(0)
        histories = {}
        for rec in records:
            histories.setdefault(rec.user_id, rec.history)
        for user_id, history in list(histories.items())[:25]:
            pool = synthetic_pool(user_id, history, index, catalog, encoder)
            assert pool.n_neg == pool.r_pos
            pos_ids = {e.news_id for e in pool.positives()}
            neg_ids = {e.news_id for e in pool.negatives()}
            assert not pos_ids & neg_ids
            assert not neg_ids & set(history)

    def test_negatives_match_brute_force(self, small_corpus):
        catalog, records = small_corpus
        store = HashEmbedder(dim=24, seed=3).embed_catalog(catalog)
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        matrix64 = index.matrix.astype(np.float64)
        histories = {}
        for rec in records:
            histories.setdefault(rec.user_id, rec.history)
        for user_id, history in list(histories.items())[:20]:
            pool = synthetic_pool(user_id, history, index, catalog, encoder)
            centroid = user_centroid(history, index, max_samples=60)
            scored = sorted(
                ((float(matrix64[index.row_of[nid]] @ centroid), nid)
                 for nid in index.ids if nid not in set(history)),
            )
            expected = {nid for _, nid in scored[: pool.r_pos]}
            assert {e.news_id for e in pool.negatives()} == expected

    def test_empty_history_skips(self):
        catalog = _axis_catalog()
        store = _axis_store()
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        with pytest.raises(SkipUser):
            synthetic_pool("U1", [], index, catalog, encoder)

    def test_zero_centroid_falls_back_to_random(self, caplog):
        vectors = {
            "P": np.array([1.0, 0.0], dtype=np.float32),
            "Q": np.array([-1.0, 0.0], dtype=np.float32),
            "R": np.array([0.0, 1.0], dtype=np.float32),
            "S": np.array([0.0, -1.0], dtype=np.float32),
        }
        catalog = Catalog([NewsItem(n, "news", "newsus", n) for n in "PQRS"])
        store = EmbeddingStore(2, vectors, normalized=True)
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        with caplog.at_level("WARNING"):
            pool = synthetic_pool("U1", ["P", "Q"], index, catalog, encoder,
                                  rng=np.random.default_rng(1))
        assert pool.warning and "zero centroid" in pool.warning
        assert pool.sampler == "synthetic"
        assert pool.r_pos == 2 and pool.n_neg == 2
        assert {e.news_id for e in pool.negatives()} == {"R", "S"}


class TestRandomPool:
    def test_same_seed_identical(self, small_corpus):
        catalog, records = small_corpus
        encoder = _tc_encoder(catalog)
        history = records[0].history
        candidates = sorted(catalog.ids)
        a = random_pool("U1", history, candidates, catalog, encoder, np.random.default_rng(42))
        b = random_pool("U1", history, candidates, catalog, encoder, np.random.default_rng(42))
        assert [e.news_id for e in a.entries] == [e.news_id for e in b.entries]

    def test_exhausted_catalog_warns(self, caplog):
        catalog = _axis_catalog()
        encoder = _tc_encoder(catalog)
        with caplog.at_level("WARNING"):
            pool = random_pool("U1", list("ABCD"), list("ABCD"), catalog, encoder,
                               np.random.default_rng(0))
        assert pool.n_neg == 0 and pool.r_pos == 4
        assert pool.warning

    def test_draws_are_uniform(self):
        # 10,000 single-negative draws over a 100-item candidate set; every
        # item count must stay within 3 sigma of the binomial expectation.
        items = [f"N{i:03d}" for i in range(100)]
        catalog = Catalog([NewsItem(nid, "news", "newsus", nid) for nid in items] +
                          [NewsItem("HIST", "news", "newsus", "read item")])
        encoder = _tc_encoder(catalog)
        counts = {nid: 0 for nid in items}
        for draw in range(10_000):
            rng = np.random.default_rng(1_000_000 + draw)
            pool = random_pool("U1", ["HIST"], items, catalog, encoder, rng, max_samples=1)
            counts[pool.negatives()[0].news_id] += 1
        expected = 10_000 / 100
        sigma = np.sqrt(10_000 * 0.01 * 0.99)
        deviations = np.abs(np.array(list(counts.values())) - expected)
        assert deviations.max() <= 3 * sigma

    def test_negatives_exclude_history(self, small_corpus):
        catalog, records = small_corpus
        encoder = _tc_encoder(catalog)
        history = records[0].history
        pool = random_pool("U1", history, sorted(catalog.ids), catalog, encoder,
                           np.random.default_rng(7))
        assert not {e.news_id for e in pool.negatives()} & set(history)


class TestImpressionsPool:
    def test_table_row(self):
        records = parse_behaviors([TABLE_ROW])
        ids = [nid for rec in records for nid, _ in rec.candidates]
        catalog = Catalog([NewsItem(nid, "news", "newsus", nid) for nid in ids])
        pool = impressions_pool("U397059", records, catalog, _tc_encoder(catalog))
        assert pool.r_pos == 2 and pool.n_neg == 5
        assert {e.news_id for e in pool.positives()} == {"N26703", "N120089"}

    def test_clicks_only_warns(self, caplog):
        records = parse_behaviors(["1\tU1\t11/15/2019 9:00:00 AM\t\tN1-1 N2-1"])
        catalog = Catalog([NewsItem(n, "news", "newsus", n) for n in ("N1", "N2")])
        with caplog.at_level("WARNING"):
            pool = impressions_pool("U1", records, catalog, _tc_encoder(catalog))
        assert pool.r_pos == 2 and pool.n_neg == 0
        assert pool.warning

    def test_truncates_to_most_recent(self):
        rows = []
        for i in range(70):
            rows.append(f"{i+1}\tU1\t11/{(i % 28) + 1:02d}/2019 9:{i % 60:02d}:00 AM\t\tP{i:02d}-1 Q{i:02d}-0")
        records = parse_behaviors(rows)
        ids = [nid for rec in records for nid, _ in rec.candidates]
        catalog = Catalog([NewsItem(nid, "news", "newsus", nid) for nid in ids])
        pool = impressions_pool("U1", records, catalog, _tc_encoder(catalog), max_samples=60)
        assert pool.r_pos == 60 and pool.n_neg == 60
        # Reference slice: candidates in time order, last 60 of each label.
        ordered = sorted(records, key=lambda r: (r.timestamp, r.impression_id))
        expected_pos = [nid for rec in ordered for nid, lab in rec.candidates if lab == 1][-60:]
        assert [e.news_id for e in pool.positives()] == expected_pos

    def test_click_anywhere_wins(self):
        rows = [
            "1\tU1\t11/15/2019 9:00:00 AM\t\tN1-0 N2-0",
            "2\tU1\t11/15/2019 10:00:00 AM\t\tN1-1 N3-0",
        ]
        records = parse_behaviors(rows)
        catalog = Catalog([NewsItem(n, "news", "newsus", n) for n in ("N1", "N2", "N3")])
        pool = impressions_pool("U1", records, catalog, _tc_encoder(catalog))
        assert {e.news_id for e in pool.positives()} == {"N1"}
        assert {e.news_id for e in pool.negatives()} == {"N2", "N3"}

    def test_absent_user_skips(self):
        catalog = _axis_catalog()
        with pytest.raises(SkipUser):
            impressions_pool("U1", [], catalog, _tc_encoder(catalog))


class TestEq1Identity:
    def test_identical_vectors(self):
        x = np.array([1.0, 0.0, 0.0])
        assert eq1_identity_check(x, x) == (0.0, 0.0)

    def test_antipodal_vectors(self):
        x = np.array([1.0, 0.0])
        lhs, rhs = eq1_identity_check(x, -x)
        assert lhs == pytest.approx(4.0, abs=1e-12)
        assert rhs == pytest.approx(4.0, abs=1e-12)

    def test_thousand_random_pairs(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            x = rng.standard_normal(384)
            y = rng.standard_normal(384)
            x /= np.linalg.norm(x)
            y /= np.linalg.norm(y)
            lhs, rhs = eq1_identity_check(x, y)
            assert abs(lhs - rhs) <= 1e-5

    def test_non_unit_rejected(self):
        with pytest.raises(NumericError, match="unit"):
            eq1_identity_check(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


class TestSeparability:
    def test_synthetic_negatives_farther_than_random(self, small_corpus):
        # The planted structure should make synthetic negatives strictly less
        # similar to the positives than random negatives are, on average.
        catalog, records = small_corpus
        store = HashEmbedder(dim=48, seed=5).embed_catalog(catalog)
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        histories = {}
        for rec in records:
            histories.setdefault(rec.user_id, rec.history)

        def mean_cos(pool):
            pos = np.stack([index.matrix[index.row_of[e.news_id]] for e in pool.positives()])
            neg = np.stack([index.matrix[index.row_of[e.news_id]] for e in pool.negatives()])
            return float((pos.astype(np.float64) @ neg.astype(np.float64).T).mean())

        synth_cos, rand_cos = [], []
        for user_id, history in list(histories.items())[:20]:
            synth = synthetic_pool(user_id, history, index, catalog, encoder)
            rand = random_pool(user_id, history, list(index.ids), catalog, encoder,
                               np.random.default_rng(11))
            if synth.n_neg and rand.n_neg:
                synth_cos.append(mean_cos(synth))
                rand_cos.append(mean_cos(rand))
        assert np.mean(synth_cos) < np.mean(rand_cos)


class TestPoolFile:
    def _pools(self, small_corpus):
        catalog, records = small_corpus
        store = HashEmbedder(dim=24, seed=3).embed_catalog(catalog)
        index = InnerProductIndex.from_store(store)
        encoder = _emb_encoder(catalog, store)
        histories = {}
        for rec in records:
            histories.setdefault(rec.user_id, rec.history)
        pools = []
        for user_id, history in list(histories.items())[:6]:
            pools.append(synthetic_pool(user_id, history, index, catalog, encoder))
        return pools

    def test_round_trip(self, tmp_path, small_corpus):
        pools = self._pools(small_corpus)
        path = tmp_path / "pools.dnnrpol"
        meta = {"sampler": "synthetic", "max_samples": 60, "seed": 0}
        save_pools(pools, path, meta)
        loaded, loaded_meta = load_pools(path)
        assert loaded_meta["max_samples"] == 60
        assert len(loaded) == len(pools)
        for orig, back in zip(pools, loaded):
            assert back.user_id == orig.user_id
            assert back.r_pos == orig.r_pos and back.n_neg == orig.n_neg
            assert [(e.news_id, e.label) for e in back.entries] == [
                (e.news_id, e.label) for e in orig.entries
            ]
            assert all(e.features is None for e in back.entries)

    def test_corruption_detected(self, tmp_path, small_corpus):
        pools = self._pools(small_corpus)
        path = tmp_path / "pools.dnnrpol"
        save_pools(pools, path, {"sampler": "synthetic"})
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_pools(path)
