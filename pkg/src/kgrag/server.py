"""HTTP API over the engine.

Endpoints (all JSON; errors are ``{"error": {"code", "message"}}``):

* ``POST /documents``              ingest a json_document body
* ``POST /pipeline/build``         {"stages": ["graph", "index"]} (default both)
* ``GET  /status``
* ``POST /sessions``               -> {"session_id"}
* ``POST /sessions/{id}/query``    {"question"} -> {answer, citations, trace, ...}
* ``GET  /graph/concepts?root=ID``
* ``GET  /graph/trace/{query_id}``
* ``POST /eval``                   {"samples": [...]} -> report

Unknown session -> 404; stale graph/index -> 409 with a rebuild hint;
provider outage during generation -> 502 with degradation details. When a
bearer token is configured every request must carry it.
"""
from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .concept_graph import concept_subtree
from .documents import ParseError
from .engine import (
    Engine,
    EngineError,
    IngestError,
    MissingStageError,
    NotFoundError,
    StaleStateError,
    UnknownSessionError,
)
from .evalkit import EvalSample
from .gateway import TransportError

logger = logging.getLogger(__name__)


class QueryBody(BaseModel):
    question: str = Field(min_length=1, max_length=4000)


class BuildBody(BaseModel):
    stages: list[str] = Field(default_factory=lambda: ["graph", "index"])


class EvalBody(BaseModel):
    samples: list[dict]


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


_STATUS_BY_CODE = {
    MissingStageError: 409,
    StaleStateError: 409,
    NotFoundError: 404,
    UnknownSessionError: 404,
    IngestError: 400,
}


def create_app(engine: Engine) -> FastAPI:
    app = FastAPI(title="kgrag", version="0.1.0")

    @app.middleware("http")
    async def auth(request: Request, call_next):
        token = engine.config.bearer_token
        if token:
            supplied = request.headers.get("Authorization", "")
            if supplied != f"Bearer {token}":
                return _error(401, "unauthorized", "missing or invalid bearer token")
        return await call_next(request)

    @app.exception_handler(EngineError)
    async def engine_error_handler(request: Request, exc: EngineError):
        status = _STATUS_BY_CODE.get(type(exc), 500)
        return _error(status, exc.code, str(exc))

    @app.exception_handler(TransportError)
    async def transport_error_handler(request: Request, exc: TransportError):
        return _error(502, "provider_outage", str(exc))

    @app.exception_handler(ParseError)
    async def parse_error_handler(request: Request, exc: ParseError):
        return _error(400, "parse_error", str(exc))

    @app.post("/documents")
    def post_document(payload: dict):
        return engine.add_document(payload)

    @app.post("/pipeline/build")
    def build(body: BuildBody):
        out = {}
        if "graph" in body.stages:
            out["graph"] = engine.build_graph()
        if "index" in body.stages:
            out["index"] = engine.build_index()
        return out

    @app.get("/status")
    def status():
        return engine.status()

    @app.post("/sessions")
    def create_session():
        session = engine.sessions.create()
        return {"session_id": session.id}

    @app.post("/sessions/{session_id}/query")
    def query(session_id: str, body: QueryBody):
        result = engine.ask(body.question, session_id=session_id)
        ans = result.answer
        if "generation_failed" in ans.degradation_flags:
            return _error(
                502,
                "provider_outage",
                "generation failed after retries; flags: " + ",".join(ans.degradation_flags),
            )
        return {
            "answer": ans.text,
            "citations": ans.citations,
            "graph_entities_used": ans.graph_entities_used,
            "degradation_flags": ans.degradation_flags,
            "latency_ms": ans.latency_ms,
            "query_id": result.query_id,
            "trace": result.usc.trace_dict(),
        }

    @app.get("/graph/concepts")
    def concepts(root: str | None = None):
        cg = engine.concept_graph()
        if root is not None:
            if root not in cg.nodes:
                raise NotFoundError(f"no concept node {root!r}")
            ids = concept_subtree(cg, root)
        else:
            ids = set(cg.nodes)
        nodes = [
            {
                "id": n.id,
                "section_id": n.section_id,
                "level": n.level,
                "title": n.title,
                "summary": n.summary,
                "keywords": n.keywords,
                "children": cg.children(n.id),
            }
            for n in sorted(cg.nodes.values(), key=lambda n: n.id)
            if n.id in ids
        ]
        return {"roots": cg.roots, "nodes": nodes}

    @app.get("/graph/trace/{query_id}")
    def trace(query_id: str):
        data = engine.trace(query_id)
        if data is None:
            raise NotFoundError(f"no trace for query {query_id!r}")
        return data

    @app.post("/eval")
    def eval_endpoint(body: EvalBody):
        samples = [
            EvalSample(
                id=str(s.get("id", i)),
                question=s["question"],
                ground_truth=s["ground_truth"],
                reference_section_ids=s.get("reference_section_ids"),
            )
            for i, s in enumerate(body.samples)
        ]
        report = engine.evaluate(samples)
        return report.to_dict()

    return app
