"""Tests for the HTTP API: endpoints, error mapping, CLI parity."""

from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from conftest import FIXTURES, ingest_fixture_corpus, make_engine_config
from kgrag.engine import Engine
from kgrag.server import create_app


@pytest.fixture
def client(tmp_path):
    engine = Engine(make_engine_config(tmp_path))
    ingest_fixture_corpus(engine)
    engine.build_graph()
    engine.build_index()
    return TestClient(create_app(engine), raise_server_exceptions=False), engine


class TestQueryFlow:
    def test_session_create_and_query(self, client):
        http, _ = client
        sid = http.post("/sessions").json()["session_id"]
        resp = http.post(f"/sessions/{sid}/query", json={"question": "What is the eviction batch?"})
        assert resp.status_code == 200
        body = resp.json()
        assert body["answer"]
        assert isinstance(body["citations"], list)
        assert body["trace"]["sub_queries"]

    def test_unknown_session_404(self, client):
        http, _ = client
        resp = http.post("/sessions/nope/query", json={"question": "x"})
        assert resp.status_code == 404
        assert resp.json()["error"]["code"] == "unknown_session"

    def test_trace_endpoint_matches_inline_trace(self, client):
        http, _ = client
        sid = http.post("/sessions").json()["session_id"]
        body = http.post(f"/sessions/{sid}/query", json={"question": "What is the eviction batch?"}).json()
        trace = http.get(f"/graph/trace/{body['query_id']}")
        assert trace.status_code == 200
        assert trace.json() == body["trace"]

    def test_unknown_trace_404(self, client):
        http, _ = client
        assert http.get("/graph/trace/deadbeef").status_code == 404

    def test_provider_outage_502(self, client):
        from conftest import FaultInjectingGateway
        from kgrag.gateway import ProviderConfig, Role

        http, engine = client
        engine.gateway = FaultInjectingGateway(ProviderConfig(), fail_roles={Role.ANSWER})
        sid = http.post("/sessions").json()["session_id"]
        resp = http.post(f"/sessions/{sid}/query", json={"question": "anything here"})
        assert resp.status_code == 502
        assert resp.json()["error"]["code"] == "provider_outage"

    def test_empty_question_422(self, client):
        http, _ = client
        sid = http.post("/sessions").json()["session_id"]
        assert http.post(f"/sessions/{sid}/query", json={"question": ""}).status_code == 422


class TestStatusAndGraph:
    def test_status_matches_cli_surface(self, client):
        http, engine = client
        assert http.get("/status").json() == json.loads(json.dumps(engine.status()))

    def test_concepts_full_listing(self, client):
        http, _ = client
        body = http.get("/graph/concepts").json()
        assert len(body["nodes"]) == 15
        assert set(body["roots"]) == {"c:manual:s0", "c:manual:s1", "c:manual:s2"}

    def test_concepts_subtree(self, client):
        http, _ = client
        body = http.get("/graph/concepts", params={"root": "c:manual:s0.0"}).json()
        ids = {n["id"] for n in body["nodes"]}
        assert ids == {"c:manual:s0.0", "c:manual:s0.0.0", "c:manual:s0.0.1", "c:manual:s0.0.2"}

    def test_unknown_concept_404(self, client):
        http, _ = client
        assert http.get("/graph/concepts", params={"root": "c:none"}).status_code == 404


class TestDocumentsAndBuild:
    def test_post_document_then_build(self, tmp_path):
        engine = Engine(make_engine_config(tmp_path))
        http = TestClient(create_app(engine), raise_server_exceptions=False)
        doc = {
            "id": "tiny",
            "title": "Tiny",
            "sections": [
                {
                    "id": "tiny:s0",
                    "level": "part",
                    "title": "Only Part",
                    "blocks": [{"kind": "paragraph", "text": "The cache stores the rows."}],
                    "children": [],
                }
            ],
        }
        resp = http.post("/documents", json=doc)
        assert resp.status_code == 200
        assert resp.json()["document_id"] == "tiny"
        build = http.post("/pipeline/build", json={})
        assert build.status_code == 200
        assert build.json()["graph"]["concept_nodes"] == 1
        assert http.get("/status").json()["index_ready"]

    def test_invalid_document_400(self, tmp_path):
        engine = Engine(make_engine_config(tmp_path))
        http = TestClient(create_app(engine), raise_server_exceptions=False)
        resp = http.post("/documents", json={"id": "x", "title": "t"})
        assert resp.status_code == 400

    def test_stale_state_409(self, client):
        http, engine = client
        doc = {
            "id": "later",
            "title": "Later",
            "sections": [
                {"id": "later:s0", "level": "part", "title": "P",
                 "blocks": [{"kind": "paragraph", "text": "New text arrives."}], "children": []}
            ],
        }
        http.post("/documents", json=doc)
        sid = http.post("/sessions").json()["session_id"]
        resp = http.post(f"/sessions/{sid}/query", json={"question": "anything"})
        assert resp.status_code == 409
        assert "rebuild" in resp.json()["error"]["message"] or "build" in resp.json()["error"]["message"]


class TestEvalEndpoint:
    def test_eval_runs_inline_samples(self, client):
        http, _ = client
        samples = [json.loads(line) for line in (FIXTURES / "eval_questions.jsonl").read_text().splitlines()][:2]
        resp = http.post("/eval", json={"samples": samples})
        assert resp.status_code == 200
        body = resp.json()
        assert body["samples"] == 2
        assert set(body["means"]) == {"faithfulness", "answer_relevancy", "context_precision"}


class TestAuth:
    def test_bearer_token_enforced(self, tmp_path):
        config = make_engine_config(tmp_path)
        config.bearer_token = "sekrit"
        engine = Engine(config)
        http = TestClient(create_app(engine), raise_server_exceptions=False)
        assert http.get("/status").status_code == 401
        ok = http.get("/status", headers={"Authorization": "Bearer sekrit"})
        assert ok.status_code == 200
