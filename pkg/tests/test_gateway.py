"""Tests for the gateway layer: mock rules, caching, the remote transport."""

from __future__ import annotations

import json
import math

import httpx
import pytest

from kgrag.gateway import (
    EmbeddingCache,
    GatewayConfigError,
    GenerationRequest,
    ProtocolError,
    ProviderConfig,
    Role,
    TransportError,
    cosine,
)
from kgrag.mock_provider import (
    MockGateway,
    claim_supported,
    embed_values,
    split_conjuncts,
    svo_triples,
    top_keywords,
    unit_phrase,
)
from kgrag.prompts import render
from kgrag.remote_provider import RemoteGateway


@pytest.fixture
def mock():
    return MockGateway(ProviderConfig())


class TestMockEmbeddings:
    def test_unit_norm(self, mock):
        vec = mock.embed(["ACID transactions guarantee durability"])[0]
        assert vec.dim == 256
        assert math.isclose(sum(v * v for v in vec.values), 1.0, abs_tol=1e-6)

    def test_self_similarity_is_one(self, mock):
        a, b = mock.embed(["abc def", "abc def"])
        assert math.isclose(cosine(a, b), 1.0, abs_tol=1e-6)

    def test_shared_vocabulary_orders_cosine(self, mock):
        # Hand-built 3-text case: b shares both tokens with a, c shares none.
        a, b, c = mock.embed(["buffer pool", "buffer pool tuning", "replication lag"])
        assert cosine(a, b) > cosine(a, c)
        assert math.isclose(cosine(a, c), 0.0, abs_tol=1e-6)

    def test_empty_text_rejected(self, mock):
        with pytest.raises(ValueError):
            mock.embed(["ok", "  "])

    def test_stopword_only_text_still_embeds(self, mock):
        vec = mock.embed(["the of and"])[0]
        assert math.isclose(sum(v * v for v in vec.values), 1.0, abs_tol=1e-6)

    def test_seed_changes_vectors(self):
        a = embed_values("buffer pool", 256, 0)
        b = embed_values("buffer pool", 256, 1)
        assert a != b

    def test_determinism(self):
        assert embed_values("same text", 256, 0) == embed_values("same text", 256, 0)


class TestEmbeddingCache:
    def test_second_call_served_from_cache(self, mock):
        first = mock.embed(["x"])[0]
        calls = []
        original = mock._embed_raw
        mock._embed_raw = lambda texts: (calls.append(texts), original(texts))[1]
        second = mock.embed(["x"])[0]
        assert calls == []
        assert first == second

    def test_cache_transparency(self):
        cfg = ProviderConfig()
        cached = MockGateway(cfg)
        uncached = MockGateway(cfg)
        uncached.cache_enabled = False
        texts = ["alpha beta", "gamma delta", "alpha beta"]
        assert [v.values for v in cached.embed(texts)] == [v.values for v in uncached.embed(texts)]

    def test_persistence_roundtrip(self, tmp_path, mock):
        mock.embed(["persist me"])
        path = tmp_path / "cache.json"
        mock.cache.save(path)
        fresh = EmbeddingCache()
        fresh.load(path)
        assert fresh.get(mock.config.embedding_model, "persist me") is not None


class TestMockGeneration:
    def test_keyword_rule_top5_frequency_ties_lexicographic(self, mock):
        # Hand-run of the rule: counts -> replication:2, others 1; ties by text.
        text = "replication ensures durability and replication aids failover"
        assert top_keywords(text, 5) == ["replication", "aids", "durability", "ensures", "failover"]
        prompt = render("keywords", text=text)
        out = mock.generate(GenerationRequest(role=Role.KEYWORDS, prompt=prompt))
        assert out.splitlines()[0] == "replication"

    def test_keywords_from_prompt_nouns(self, mock):
        prompt = render("keywords", text="ACID transactions guarantee durability")
        out = mock.generate(GenerationRequest(role=Role.KEYWORDS, prompt=prompt)).splitlines()
        assert set(out) == {"acid", "transactions", "guarantee", "durability"}

    def test_summarize_first_two_sentences(self, mock):
        prompt = render("summarize", title="T", max_tokens=120,
                        text="First sentence. Second sentence. Third sentence.")
        out = mock.generate(GenerationRequest(role=Role.SUMMARIZE, prompt=prompt))
        assert out == "First sentence. Second sentence."

    def test_identical_requests_identical_output(self, mock):
        req = GenerationRequest(role=Role.SUMMARIZE, prompt=render("summarize", title="T", max_tokens=9, text="A. B. C."))
        assert mock.generate(req) == mock.generate(req)

    def test_svo_rule(self):
        assert svo_triples("The optimizer rewrites the query plan.") == [
            ("optimizer", "rewrites", "query plan")
        ]

    def test_conjunction_split(self):
        assert split_conjuncts("How do I configure replication and monitor lag?") == [
            "How do I configure replication",
            "monitor lag?",
        ]
        assert split_conjuncts("What is a B-tree?") == ["What is a B-tree?"]

    def test_unit_phrase(self):
        assert unit_phrase("The delay is measured in milliseconds here.") == "milliseconds"
        assert unit_phrase("No units present.") is None

    def test_claim_support_is_normalized_substring(self):
        assert claim_supported("Buffer pool caches pages", "the buffer pool caches pages in memory")
        assert not claim_supported("Buffer pool evicts pages", "the buffer pool caches pages")


class TestMockRerank:
    def test_single_candidate(self, mock):
        out = mock.rerank("q", ["only one"])
        assert [i for i, _ in out] == [0]

    def test_identical_candidate_ranks_first(self, mock):
        out = mock.rerank("buffer pool size", ["lag monitor", "join order", "buffer pool size"])
        assert out[0][0] == 2

    def test_scores_descending(self, mock):
        out = mock.rerank("buffer pool", ["buffer pool size", "buffer eviction", "replication"])
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)

    def test_empty_candidates_rejected(self, mock):
        with pytest.raises(ValueError):
            mock.rerank("q", [])


# ------------------------------------------------------------------
# Remote provider against an in-process httpx transport.
# ------------------------------------------------------------------
def make_remote(handler, monkeypatch, max_retries=2):
    monkeypatch.setenv("KGRAG_API_KEY", "test-key")
    cfg = ProviderConfig(endpoint="https://llm.example/v1", max_retries=max_retries)
    gateway = RemoteGateway(cfg, transport=httpx.MockTransport(handler))
    gateway.backoff_base_s = 0.0
    return gateway


class TestRemoteGateway:
    def test_missing_api_key_is_startup_error(self, monkeypatch):
        monkeypatch.delenv("KGRAG_API_KEY", raising=False)
        with pytest.raises(GatewayConfigError):
            RemoteGateway(ProviderConfig(endpoint="https://llm.example/v1"))

    def test_generate_parses_chat_completion(self, monkeypatch):
        def handler(request):
            body = json.loads(request.content)
            assert body["model"] == "gpt-4o-mini"
            return httpx.Response(200, json={"choices": [{"message": {"content": "hi"}}]})

        gw = make_remote(handler, monkeypatch)
        out = gw.generate(GenerationRequest(role=Role.ANSWER, prompt="hello"))
        assert out == "hi"

    def test_judge_role_uses_judge_model(self, monkeypatch):
        seen = {}

        def handler(request):
            seen["model"] = json.loads(request.content)["model"]
            return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

        gw = make_remote(handler, monkeypatch)
        gw.generate(GenerationRequest(role=Role.JUDGE_CLAIMS, prompt="p"))
        assert seen["model"] == "gpt-4o"

    def test_retries_then_succeeds(self, monkeypatch):
        attempts = []

        def handler(request):
            attempts.append(1)
            if len(attempts) < 3:
                return httpx.Response(503)
            return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

        gw = make_remote(handler, monkeypatch, max_retries=2)
        assert gw.generate(GenerationRequest(role=Role.ANSWER, prompt="p")) == "ok"
        assert len(attempts) == 3

    def test_zero_retries_unreachable_is_transport_error(self, monkeypatch):
        def handler(request):
            raise httpx.ConnectError("refused")

        gw = make_remote(handler, monkeypatch, max_retries=0)
        with pytest.raises(TransportError):
            gw.generate(GenerationRequest(role=Role.ANSWER, prompt="p"))

    def test_unparseable_body_is_protocol_error(self, monkeypatch):
        def handler(request):
            return httpx.Response(200, json={"unexpected": True})

        gw = make_remote(handler, monkeypatch)
        with pytest.raises(ProtocolError):
            gw.generate(GenerationRequest(role=Role.ANSWER, prompt="p"))

    def test_embeddings_roundtrip(self, monkeypatch):
        def handler(request):
            body = json.loads(request.content)
            vectors = [[float(i), 0.0] for i, _ in enumerate(body["input"])]
            return httpx.Response(200, json={"data": [{"embedding": v} for v in vectors]})

        gw = make_remote(handler, monkeypatch)
        out = gw.embed(["a", "b"])
        assert [v.values for v in out] == [[0.0, 0.0], [1.0, 0.0]]

    def test_rerank_sorted_descending(self, monkeypatch):
        def handler(request):
            return httpx.Response(
                200,
                json={"results": [{"index": 0, "relevance_score": 0.1}, {"index": 1, "relevance_score": 0.9}]},
            )

        gw = make_remote(handler, monkeypatch)
        assert gw.rerank("q", ["a", "b"]) == [(1, 0.9), (0, 0.1)]


class TestProviderConfig:
    def test_defaults_match_model_roles(self):
        cfg = ProviderConfig()
        assert cfg.generation_model == "gpt-4o-mini"
        assert cfg.graph_model == "gpt-4o-mini"
        assert cfg.judge_model == "gpt-4o"
        assert cfg.embedding_model == "text-embedding-3-small"
        assert cfg.reranker_model == "jina-reranker-v2-base"

    def test_invalid_retries_rejected(self):
        with pytest.raises(ValueError):
            ProviderConfig(max_retries=-1)

    def test_invalid_timeout_rejected(self):
        with pytest.raises(ValueError):
            ProviderConfig(timeout_s=0)
