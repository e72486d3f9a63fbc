"""Engine: configuration, pipeline orchestration and on-disk persistence.

Single process, file-backed. Artifacts:

* ``corpus_dir/documents/*.json``  canonical json_document files
* ``corpus_dir/overrides.json``    optional summary/keyword overrides
* ``corpus_dir/ontology.json``     optional extraction hints
* ``graph_dir/chunks.json``        chunk store
* ``graph_dir/concept_graph.json`` / ``instance_graph.json`` / ``build_report.json``
* ``graph_dir/meta.json``          corpus hashes recorded at build time
* ``index_path``                   vector index (embedding cache beside it)
* ``sessions_dir/<id>.jsonl``      session event logs

All writes are temp-file-then-rename, so a crash never leaves a
half-written artifact visible. Build stages hold an exclusive lock; the
corpus hash recorded at build time gates staleness (no auto-rebuild).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import qa
from .chunking import Chunk, ChunkPolicy, Modality, chunk_document
from .concept_graph import (
    ConceptBuildError,
    ConceptGraph,
    build_concept_graph,
    merge_concept_graphs,
)
from .documents import Document, ParseError, document_to_json, parse_document, validate_document
from .evalkit import EvalReport, EvalSample, run_eval
from .gateway import EmbeddingCache, Gateway, ProviderConfig
from .instance_graph import (
    BuildReport,
    InstanceBuildError,
    InstanceGraph,
    build_instance_graph,
    merge_instance_graphs,
)
from .qa import Answer, Session
from .remote_provider import make_gateway
from .retrieval import RetrievalConfig, UnifiedSearchContext
from .vector_index import VectorIndex

logger = logging.getLogger(__name__)


class EngineError(Exception):
    code = "engine_error"


class MissingStageError(EngineError):
    code = "missing_stage"

    def __init__(self, stage: str, needed_for: str):
        super().__init__(f"run `{stage}` before `{needed_for}` (missing artifact)")
        self.stage = stage
        self.needed_for = needed_for


class StaleStateError(EngineError):
    code = "stale_state"

    def __init__(self, what: str):
        super().__init__(
            f"{what} was built from a different corpus; run `build-graph` and `index` again"
        )


class NotFoundError(EngineError):
    code = "not_found"


class UnknownSessionError(NotFoundError):
    code = "unknown_session"


class IngestError(EngineError):
    code = "ingest_error"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class EngineConfig:
    corpus_dir: str = "data/corpus"
    graph_dir: str = "data/graph"
    index_path: str = "data/index.json"
    sessions_dir: str = "data/sessions"
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    chunk_policy: ChunkPolicy = field(default_factory=ChunkPolicy)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    host: str = "127.0.0.1"
    port: int = 8787
    bearer_token: str | None = None
    prompt_budget_tokens: int = qa.DEFAULT_PROMPT_BUDGET_TOKENS
    max_history_turns: int = 6

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        data = dict(data)
        for key, sub in (("provider", ProviderConfig), ("chunk_policy", ChunkPolicy), ("retrieval", RetrievalConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None) -> "EngineConfig":
        if path is None:
            return cls()
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(yaml.safe_load(text) or {})

    def save(self, path: str | Path) -> None:
        write_atomic(Path(path), yaml.safe_dump(self.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

class SessionStore:
    """One JSONL event log per session; writes serialized per process."""

    def __init__(self, directory: Path, max_history_turns: int = 6):
        self.directory = directory
        self.max_history_turns = max_history_turns
        self._lock = threading.Lock()

    def _path(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.jsonl"

    def create(self) -> Session:
        session = Session(
            id=uuid.uuid4().hex[:16],
            max_history_turns=self.max_history_turns,
            created_at=time.time(),
        )
        self.directory.mkdir(parents=True, exist_ok=True)
        with self._lock:
            with self._path(session.id).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"event": "created", "ts": session.created_at}) + "\n")
        return session

    def get(self, session_id: str) -> Session | None:
        path = self._path(session_id)
        if not path.exists():
            return None
        session = Session(id=session_id, max_history_turns=self.max_history_turns)
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            if event.get("event") == "created":
                session.created_at = event.get("ts", 0.0)
            elif event.get("event") == "turn":
                session.turns.append(
                    qa.DialogueTurn(
                        role=event["role"],
                        text=event["text"],
                        timestamp=event.get("ts", 0.0),
                        context_digest=event.get("context_digest"),
                    )
                )
        return session

    def append_turns(self, session_id: str, turns: list[qa.DialogueTurn]) -> None:
        with self._lock:
            with self._path(session_id).open("a", encoding="utf-8") as fh:
                for t in turns:
                    fh.write(
                        json.dumps(
                            {
                                "event": "turn",
                                "role": t.role,
                                "text": t.text,
                                "ts": t.timestamp,
                                "context_digest": t.context_digest,
                            }
                        )
                        + "\n"
                    )


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@dataclass
class AskResult:
    answer: Answer
    usc: UnifiedSearchContext
    query_id: str


class Engine:
    def __init__(self, config: EngineConfig, gateway: Gateway | None = None):
        self.config = config
        self.corpus_dir = Path(config.corpus_dir)
        self.documents_dir = self.corpus_dir / "documents"
        self.graph_dir = Path(config.graph_dir)
        self.index_path = Path(config.index_path)
        self.cache_path = self.index_path.with_name(self.index_path.name + ".embcache.json")
        self.sessions = SessionStore(Path(config.sessions_dir), config.max_history_turns)
        if gateway is None:
            cache = EmbeddingCache()
            cache.load(self.cache_path)
            gateway = make_gateway(config.provider, cache)
        self.gateway = gateway
        self._build_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._documents: list[Document] | None = None
        self._chunks: list[Chunk] | None = None
        self._concept_graph: ConceptGraph | None = None
        self._instance_graph: InstanceGraph | None = None
        self._index: VectorIndex | None = None
        self._traces: OrderedDict[str, dict] = OrderedDict()

    # -- corpus ---------------------------------------------------------------

    def ingest(self, path: str | Path) -> dict:
        """Parse one file or every *.md / *.json file in a directory into the
        corpus, then refresh the chunk store."""
        path = Path(path)
        if path.is_dir():
            files = sorted(p for p in path.iterdir() if p.suffix in (".md", ".json"))
        else:
            files = [path]
        if not files:
            raise IngestError(f"no .md or .json documents under {path}")
        ingested = []
        for f in files:
            fmt = "markdown_with_headings" if f.suffix == ".md" else "json_document"
            doc_id = f.stem if f.suffix == ".md" else None
            try:
                doc = parse_document(f.read_text(encoding="utf-8"), fmt, doc_id=doc_id)
            except ParseError as exc:
                raise IngestError(f"{f.name}: {exc}") from exc
            issues = validate_document(doc)
            if issues:
                details = "; ".join(f"{i.kind}: {i.message}" for i in issues[:5])
                raise IngestError(f"{f.name} failed validation: {details}")
            doc.source_meta.setdefault("filename", f.name)
            write_atomic(
                self.documents_dir / f"{doc.id}.json",
                json.dumps(document_to_json(doc), sort_keys=True, indent=1),
            )
            ingested.append(doc.id)
        self.reload()
        chunks = self._refresh_chunks()
        return {"documents": ingested, "document_count": len(self.documents()), "chunk_count": len(chunks)}

    def add_document(self, payload: dict) -> dict:
        """Ingest one json_document payload (HTTP surface)."""
        doc = parse_document(json.dumps(payload), "json_document")
        issues = validate_document(doc)
        if issues:
            details = "; ".join(f"{i.kind}: {i.message}" for i in issues[:5])
            raise IngestError(f"document {doc.id} failed validation: {details}")
        write_atomic(
            self.documents_dir / f"{doc.id}.json",
            json.dumps(document_to_json(doc), sort_keys=True, indent=1),
        )
        self.reload()
        chunks = self._refresh_chunks()
        return {"document_id": doc.id, "chunk_count": len(chunks)}

    def documents(self) -> list[Document]:
        if self._documents is None:
            docs = []
            if self.documents_dir.exists():
                for f in sorted(self.documents_dir.glob("*.json")):
                    docs.append(parse_document(f.read_text(encoding="utf-8"), "json_document"))
            self._documents = docs
        return self._documents

    def corpus_hash(self) -> str:
        digest = hashlib.sha256()
        if self.documents_dir.exists():
            for f in sorted(self.documents_dir.glob("*.json")):
                digest.update(f.name.encode("utf-8"))
                digest.update(hashlib.sha256(f.read_bytes()).digest())
        return digest.hexdigest()

    def _refresh_chunks(self) -> list[Chunk]:
        chunks: list[Chunk] = []
        for doc in self.documents():
            chunks.extend(chunk_document(doc, self.config.chunk_policy))
        payload = {
            "corpus_hash": self.corpus_hash(),
            "chunks": [
                {
                    "id": c.id,
                    "document_id": c.document_id,
                    "section_id": c.section_id,
                    "modality": c.modality.value,
                    "content": c.content,
                    "context_header": c.context_header,
                    "token_estimate": c.token_estimate,
                }
                for c in chunks
            ],
        }
        write_atomic(self.graph_dir / "chunks.json", json.dumps(payload, sort_keys=True, indent=1))
        self._chunks = chunks
        return chunks

    def chunks(self) -> list[Chunk]:
        if self._chunks is None:
            path = self.graph_dir / "chunks.json"
            if not path.exists():
                raise MissingStageError("ingest", "chunk access")
            payload = json.loads(path.read_text(encoding="utf-8"))
            self._chunks = [
                Chunk(
                    id=c["id"],
                    document_id=c["document_id"],
                    section_id=c["section_id"],
                    modality=Modality(c["modality"]),
                    content=c["content"],
                    context_header=c["context_header"],
                    token_estimate=c["token_estimate"],
                )
                for c in payload["chunks"]
            ]
        return self._chunks

    def chunk_section(self, chunk_id: str) -> str | None:
        for c in self.chunks():
            if c.id == chunk_id:
                return c.section_id
        return None

    # -- builds ---------------------------------------------------------------

    def _meta(self) -> dict:
        path = self.graph_dir / "meta.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        return {}

    def _update_meta(self, **fields) -> None:
        meta = self._meta()
        meta.update(fields)
        write_atomic(self.graph_dir / "meta.json", json.dumps(meta, sort_keys=True, indent=1))

    def build_graph(self) -> dict:
        if not self.documents():
            raise MissingStageError("ingest", "build-graph")
        with self._build_lock:
            chunks = self.chunks()
            overrides = self._load_optional(self.corpus_dir / "overrides.json")
            ontology = self._load_optional(self.corpus_dir / "ontology.json")
            concept_ckpt = self._load_optional(self.graph_dir / "checkpoint_concept.json") or {}
            instance_ckpt = self._load_optional(self.graph_dir / "checkpoint_instance.json") or {}

            concept_graphs, instance_graphs, reports = [], [], []
            try:
                for doc in self.documents():
                    doc_sections = {sec.id for sec, _ in doc.walk()}
                    doc_overrides = {
                        k: v for k, v in (overrides or {}).items() if k in doc_sections
                    }
                    cg = build_concept_graph(
                        doc, overrides=doc_overrides, gateway=self.gateway,
                        checkpoint=concept_ckpt.setdefault(doc.id, {}),
                    )
                    concept_graphs.append(cg)
            except ConceptBuildError:
                write_atomic(
                    self.graph_dir / "checkpoint_concept.json",
                    json.dumps(concept_ckpt, sort_keys=True),
                )
                raise
            concept_graph = merge_concept_graphs(concept_graphs)
            try:
                for doc in self.documents():
                    ig, report = build_instance_graph(
                        doc, chunks, concept_graph, self.gateway, ontology=ontology,
                        checkpoint=instance_ckpt.setdefault(doc.id, {}),
                    )
                    instance_graphs.append(ig)
                    reports.append(report)
            except InstanceBuildError:
                write_atomic(
                    self.graph_dir / "checkpoint_instance.json",
                    json.dumps(instance_ckpt, sort_keys=True),
                )
                raise
            instance_graph = merge_instance_graphs(instance_graphs)

            concept_graph.save(self.graph_dir / "concept_graph.json")
            instance_graph.save(self.graph_dir / "instance_graph.json")
            merged_report = BuildReport()
            for r in reports:
                for key, value in r.to_dict().items():
                    setattr(merged_report, key, getattr(merged_report, key) + value)
            write_atomic(
                self.graph_dir / "build_report.json",
                json.dumps(merged_report.to_dict(), sort_keys=True, indent=1),
            )
            for ckpt in ("checkpoint_concept.json", "checkpoint_instance.json"):
                (self.graph_dir / ckpt).unlink(missing_ok=True)
            self._update_meta(graph_corpus_hash=self.corpus_hash(), graph_built_at=time.time())
            self._concept_graph = concept_graph
            self._instance_graph = instance_graph
            return {
                "concept_nodes": len(concept_graph.nodes),
                "keyword_nodes": len(concept_graph.keyword_nodes),
                "entities": len(instance_graph.entities),
                "relations": len(instance_graph.relations),
                "report": merged_report.to_dict(),
            }

    def build_index(self) -> dict:
        chunks = self.chunks()
        with self._build_lock:
            index = VectorIndex.index_chunks(chunks, self.gateway)
            index.save(self.index_path)
            self.gateway.cache.save(self.cache_path)
            self._update_meta(index_corpus_hash=self.corpus_hash(), index_built_at=time.time())
            self._index = index
            return {"indexed": len(index), "dim": index.dim, "model": index.model}

    @staticmethod
    def _load_optional(path: Path) -> dict | None:
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        return None

    # -- loaded state -----------------------------------------------------------

    def reload(self) -> None:
        with self._state_lock:
            self._documents = None
            self._chunks = None
            self._concept_graph = None
            self._instance_graph = None
            self._index = None

    def concept_graph(self) -> ConceptGraph:
        if self._concept_graph is None:
            path = self.graph_dir / "concept_graph.json"
            if not path.exists():
                raise MissingStageError("build-graph", "query")
            self._concept_graph = ConceptGraph.load(path)
        return self._concept_graph

    def instance_graph(self) -> InstanceGraph:
        if self._instance_graph is None:
            path = self.graph_dir / "instance_graph.json"
            if not path.exists():
                raise MissingStageError("build-graph", "query")
            self._instance_graph = InstanceGraph.load(path)
        return self._instance_graph

    def index(self) -> VectorIndex:
        if self._index is None:
            if not self.index_path.exists():
                raise MissingStageError("index", "query")
            self._index = VectorIndex.load(self.index_path)
        return self._index

    def status(self) -> dict:
        current = self.corpus_hash()
        meta = self._meta()
        counts = {
            "documents": len(self.documents()),
            "chunks": 0,
            "concept_nodes": 0,
            "entities": 0,
            "indexed": 0,
        }
        if (self.graph_dir / "chunks.json").exists():
            counts["chunks"] = len(self.chunks())
        if (self.graph_dir / "concept_graph.json").exists():
            counts["concept_nodes"] = len(self.concept_graph().nodes)
        if (self.graph_dir / "instance_graph.json").exists():
            counts["entities"] = len(self.instance_graph().entities)
        if self.index_path.exists():
            counts["indexed"] = len(self.index())
        return {
            "counts": counts,
            "corpus_hash": current,
            "graph_built_at": meta.get("graph_built_at"),
            "index_built_at": meta.get("index_built_at"),
            "stale_graph": bool(meta.get("graph_corpus_hash")) and meta["graph_corpus_hash"] != current,
            "stale_index": bool(meta.get("index_corpus_hash")) and meta["index_corpus_hash"] != current,
            "graph_ready": (self.graph_dir / "concept_graph.json").exists(),
            "index_ready": self.index_path.exists(),
        }

    def check_fresh(self) -> None:
        status = self.status()
        if status["stale_graph"] or status["stale_index"]:
            raise StaleStateError("the knowledge graph/index")

    # -- query ------------------------------------------------------------------

    def ask(self, question: str, session_id: str | None = None, allow_stale: bool = False) -> AskResult:
        if self.config.retrieval.use_concept_graph:
            cg = self.concept_graph()
            ig = self.instance_graph()
        else:
            cg = ConceptGraph()
            ig = InstanceGraph()
        index = self.index()
        if not allow_stale:
            self.check_fresh()
        if session_id is not None:
            session = self.sessions.get(session_id)
            if session is None:
                raise UnknownSessionError(f"no session {session_id!r}")
        else:
            session = Session(id="ephemeral", max_history_turns=self.config.max_history_turns)

        before = len(session.turns)
        ans, usc = qa.answer(
            question,
            session,
            cg=cg,
            ig=ig,
            index=index,
            chunk_ids={c.id for c in self.chunks()},
            retrieval_cfg=self.config.retrieval,
            gateway=self.gateway,
            prompt_budget_tokens=self.config.prompt_budget_tokens,
        )
        if session_id is not None and len(session.turns) > before:
            self.sessions.append_turns(session_id, session.turns[before:])

        query_id = uuid.uuid4().hex[:12]
        self._traces[query_id] = usc.trace_dict()
        while len(self._traces) > 200:
            self._traces.popitem(last=False)
        return AskResult(answer=ans, usc=usc, query_id=query_id)

    def trace(self, query_id: str) -> dict | None:
        return self._traces.get(query_id)

    # -- evaluation ---------------------------------------------------------------

    def evaluate(self, samples: list[EvalSample], out_dir: Path | None = None) -> EvalReport:
        report = run_eval(samples, _EvalAdapter(self), self.gateway)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_atomic(out_dir / "report.json", json.dumps(report.to_dict(), sort_keys=True, indent=1))
            write_atomic(out_dir / "report.md", report.to_markdown() + "\n")
        return report


class _EvalAdapter:
    """What run_eval needs from an engine: fresh-session asks and chunk lookups."""

    def __init__(self, engine: Engine):
        self._engine = engine

    def ask(self, question: str, session_id: str | None = None):
        result = self._engine.ask(question, session_id=session_id)
        return result.answer, result.usc

    def chunk_section(self, chunk_id: str) -> str | None:
        return self._engine.chunk_section(chunk_id)
