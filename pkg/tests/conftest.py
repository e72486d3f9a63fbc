"""Shared fixtures: the handbook corpus, mock gateway, and built artifacts."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from kgrag.chunking import ChunkPolicy, chunk_document
from kgrag.concept_graph import build_concept_graph
from kgrag.documents import parse_document
from kgrag.gateway import Gateway, GenerationRequest, ProviderConfig, TransportError
from kgrag.instance_graph import build_instance_graph
from kgrag.mock_provider import MockGateway
from kgrag.vector_index import VectorIndex

FIXTURES = Path(__file__).parent / "fixtures"

# Whitespace estimator with a small cap so the handbook yields ~55 chunks.
FIXTURE_POLICY = dict(max_tokens=48, min_tokens=8, token_estimator="whitespace")


class FaultInjectingGateway(MockGateway):
    """Mock that fails (a) every generate() call for the configured roles and
    (b) optionally every embed call."""

    def __init__(self, config, fail_roles=(), fail_embed=False):
        super().__init__(config)
        self.fail_roles = set(fail_roles)
        self.fail_embed = fail_embed

    def generate(self, req: GenerationRequest) -> str:
        if req.role in self.fail_roles:
            raise TransportError(f"injected failure for role {req.role.value}")
        return super().generate(req)

    def _embed_raw(self, texts):
        if self.fail_embed:
            raise TransportError("injected embedding failure")
        return super()._embed_raw(texts)


@pytest.fixture(scope="session")
def gateway() -> Gateway:
    return MockGateway(ProviderConfig())


@pytest.fixture(scope="session")
def fixture_doc():
    raw = (FIXTURES / "manual.md").read_text(encoding="utf-8")
    return parse_document(raw, "markdown_with_headings", doc_id="manual")


@pytest.fixture(scope="session")
def fixture_overrides():
    return json.loads((FIXTURES / "overrides.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def fixture_chunks(fixture_doc):
    return chunk_document(fixture_doc, ChunkPolicy(**FIXTURE_POLICY))


@pytest.fixture(scope="session")
def fixture_concept_graph(fixture_doc, fixture_overrides, gateway):
    return build_concept_graph(fixture_doc, overrides=fixture_overrides, gateway=gateway)


@pytest.fixture(scope="session")
def fixture_instance_graph(fixture_doc, fixture_chunks, fixture_concept_graph, gateway):
    graph, _report = build_instance_graph(
        fixture_doc, fixture_chunks, fixture_concept_graph, gateway
    )
    return graph


@pytest.fixture(scope="session")
def fixture_index(fixture_chunks, gateway):
    return VectorIndex.index_chunks(fixture_chunks, gateway)


@pytest.fixture(scope="session")
def eval_samples():
    lines = (FIXTURES / "eval_questions.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def make_engine_config(tmp_path: Path, **retrieval_overrides):
    """EngineConfig rooted in a temp dir, fixture chunking policy, mock provider."""
    from kgrag.engine import EngineConfig
    from kgrag.retrieval import RetrievalConfig

    return EngineConfig(
        corpus_dir=str(tmp_path / "corpus"),
        graph_dir=str(tmp_path / "graph"),
        index_path=str(tmp_path / "index.json"),
        sessions_dir=str(tmp_path / "sessions"),
        chunk_policy=ChunkPolicy(**FIXTURE_POLICY),
        retrieval=RetrievalConfig(**retrieval_overrides),
    )


def ingest_fixture_corpus(engine):
    """Copy the handbook + overrides into the engine's corpus dir and ingest."""
    corpus = Path(engine.config.corpus_dir)
    corpus.mkdir(parents=True, exist_ok=True)
    (corpus / "overrides.json").write_text(
        (FIXTURES / "overrides.json").read_text(encoding="utf-8"), encoding="utf-8"
    )
    return engine.ingest(FIXTURES / "manual.md")
