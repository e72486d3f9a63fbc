"""Tests for kgrag.vector_index: oracle equivalence, filters, persistence."""

from __future__ import annotations

import random

import numpy as np
import pytest

from kgrag.vector_index import SearchHit, SectionFilter, VectorIndex

DIM = 256


def random_unit(rng: random.Random):
    vec = np.array([rng.gauss(0, 1) for _ in range(DIM)])
    return vec / np.linalg.norm(vec)


def build_random_index(rng: random.Random, n: int) -> VectorIndex:
    records = [
        (f"chunk-{i:04d}", f"sec-{rng.randrange(8)}", random_unit(rng)) for i in range(n)
    ]
    return VectorIndex.from_vectors(DIM, "mock", records)


def oracle_search(index: VectorIndex, query, k, allowed=None):
    """Exhaustive per-row scan, python sort, same tie-break contract."""
    scored = []
    for i, cid in enumerate(index.chunk_ids):
        if allowed is not None and index.section_ids[i] not in allowed:
            continue
        scored.append((float(np.dot(index._matrix[i], query)), cid))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [cid for _, cid in scored[:k]]


class TestSearch:
    def test_exact_query_scores_one(self):
        rng = random.Random(0)
        index = build_random_index(rng, 30)
        target = index._matrix[7]
        hits = index.search(target, k=1)
        assert hits[0].chunk_id == index.chunk_ids[7]
        assert hits[0].score == pytest.approx(1.0, abs=1e-6)

    def test_matches_bruteforce_oracle(self):
        rng = random.Random(1)
        index = build_random_index(rng, 30)
        query = random_unit(rng)
        hits = index.search(query, k=5)
        assert [h.chunk_id for h in hits] == oracle_search(index, query, 5)

    def test_ranks_consecutive_from_one(self):
        rng = random.Random(2)
        index = build_random_index(rng, 10)
        hits = index.search(random_unit(rng), k=4)
        assert [h.rank for h in hits] == [1, 2, 3, 4]

    def test_tie_break_ascending_chunk_id(self):
        vec = np.zeros(DIM)
        vec[0] = 1.0
        index = VectorIndex.from_vectors(DIM, "mock", [("b", "s", vec), ("a", "s", vec), ("c", "s", vec)])
        hits = index.search(vec, k=3)
        assert [h.chunk_id for h in hits] == ["a", "b", "c"]

    def test_fewer_than_k_when_scarce(self):
        rng = random.Random(3)
        index = build_random_index(rng, 3)
        assert len(index.search(random_unit(rng), k=10)) == 3

    def test_empty_index(self):
        index = VectorIndex(dim=DIM, model="mock")
        assert index.search(np.zeros(DIM), k=5) == []

    def test_k_must_be_positive(self):
        index = VectorIndex(dim=DIM, model="mock")
        with pytest.raises(ValueError):
            index.search(np.zeros(DIM), k=0)

    def test_dim_mismatch_rejected(self):
        rng = random.Random(4)
        index = build_random_index(rng, 5)
        with pytest.raises(ValueError):
            index.search(np.zeros(DIM + 1), k=1)

    def test_scores_within_bounds(self):
        rng = random.Random(5)
        index = build_random_index(rng, 50)
        for h in index.search(random_unit(rng), k=50):
            assert -1.0 - 1e-6 <= h.score <= 1.0 + 1e-6


class TestFilter:
    def test_filter_soundness(self):
        rng = random.Random(6)
        index = build_random_index(rng, 40)
        allowed = {"sec-1", "sec-3"}
        hits = index.search(random_unit(rng), k=10, filter=SectionFilter(allowed))
        for h in hits:
            assert index.section_ids[index.chunk_ids.index(h.chunk_id)] in allowed

    def test_empty_filter_matches_nothing(self):
        rng = random.Random(7)
        index = build_random_index(rng, 10)
        assert index.search(random_unit(rng), k=5, filter=SectionFilter(set())) == []

    def test_none_filter_means_no_restriction(self):
        rng = random.Random(8)
        index = build_random_index(rng, 10)
        assert len(index.search(random_unit(rng), k=10, filter=None)) == 10

    def test_filtered_matches_oracle(self):
        rng = random.Random(9)
        index = build_random_index(rng, 60)
        query = random_unit(rng)
        allowed = {"sec-0", "sec-5"}
        hits = index.search(query, k=7, filter=SectionFilter(allowed))
        assert [h.chunk_id for h in hits] == oracle_search(index, query, 7, allowed)


class TestIndexing:
    def test_index_fixture_chunks(self, fixture_chunks, fixture_index):
        assert len(fixture_index) == len(fixture_chunks)
        assert fixture_index.dim == 256
        assert fixture_index.model == "text-embedding-3-small"

    def test_duplicate_chunk_id_rejected(self):
        vec = np.zeros(DIM)
        vec[0] = 1.0
        with pytest.raises(ValueError):
            VectorIndex.from_vectors(DIM, "mock", [("a", "s", vec), ("a", "s", vec)])

    def test_embedded_text_includes_breadcrumb(self, fixture_chunks, fixture_index):
        c = fixture_chunks[0]
        assert fixture_index.text_for(c.id).startswith(c.context_header)

    def test_zero_chunks_empty_index(self, gateway):
        index = VectorIndex.index_chunks([], gateway)
        assert len(index) == 0
        assert index.search(np.zeros(index.dim), k=3) == []


class TestPersistence:
    def test_roundtrip_search_identical(self, tmp_path, fixture_index, gateway):
        path = tmp_path / "index.json"
        fixture_index.save(path)
        loaded = VectorIndex.load(path)
        query = gateway.embed(["buffer pool flush interval"])[0]
        assert loaded.search(query, k=5) == fixture_index.search(query, k=5)

    def test_reindex_byte_identical(self, tmp_path, fixture_chunks, gateway):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        VectorIndex.index_chunks(fixture_chunks, gateway).save(a)
        VectorIndex.index_chunks(fixture_chunks, gateway).save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_version_checked(self, tmp_path, fixture_index):
        path = tmp_path / "index.json"
        fixture_index.save(path)
        import json

        payload = json.loads(path.read_text())
        payload["header"]["version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            VectorIndex.load(path)


class TestRerankHits:
    def make_hits(self, index, query, k=3):
        return index.search(query, k=k)

    def test_single_hit_unchanged(self, fixture_index, gateway):
        query = gateway.embed(["buffer pool"])[0]
        hits = fixture_index.search(query, k=1)
        reranked, degraded = fixture_index.rerank_hits("buffer pool", hits, gateway)
        assert [h.chunk_id for h in reranked] == [hits[0].chunk_id]
        assert degraded is False

    def test_mock_reranker_consistent_with_cosine(self, fixture_index, gateway):
        # Mock rerank scores are cosines of the same embeddings, so order holds.
        query = "buffer pool flush interval"
        hits = fixture_index.search(gateway.embed([query])[0], k=4)
        reranked, degraded = fixture_index.rerank_hits(query, hits, gateway)
        assert [h.chunk_id for h in reranked] == [h.chunk_id for h in hits]
        assert degraded is False

    def test_failure_preserves_order_and_flags(self, fixture_index):
        from conftest import FaultInjectingGateway
        from kgrag.gateway import ProviderConfig

        gw = FaultInjectingGateway(ProviderConfig(), fail_embed=True)
        hits = [SearchHit("a", 0.9, 1), SearchHit("b", 0.8, 2)]
        reranked, degraded = fixture_index.rerank_hits("q", hits, gw)
        assert [h.chunk_id for h in reranked] == ["a", "b"]
        assert degraded is True

    def test_empty_hits(self, fixture_index, gateway):
        assert fixture_index.rerank_hits("q", [], gateway) == ([], False)
