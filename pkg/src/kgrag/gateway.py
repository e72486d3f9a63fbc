"""Single pluggable interface for generation, extraction and embedding calls.

Concrete providers live in :mod:`kgrag.mock_provider` (deterministic,
offline) and :mod:`kgrag.remote_provider` (HTTP chat-completion and
embedding endpoints). Everything downstream talks to :class:`Gateway` only.
"""
from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path


class Role(str, Enum):
    SUMMARIZE = "summarize"
    KEYWORDS = "keywords"
    EXTRACT_HIGH = "extract_high"
    EXTRACT_MID = "extract_mid"
    EXTRACT_LOW = "extract_low"
    COMPLETE_ATTRIBUTES = "complete_attributes"
    DECOMPOSE = "decompose"
    REFINE_QUERY = "refine_query"
    ANSWER = "answer"
    JUDGE_CLAIMS = "judge_claims"


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Provider unreachable, timed out, or retries exhausted."""


class ProtocolError(GatewayError):
    """Provider responded with something we cannot parse."""


class GatewayConfigError(GatewayError):
    """Bad provider configuration, e.g. missing credential for a remote endpoint."""


@dataclass
class ProviderConfig:
    generation_model: str = "gpt-4o-mini"
    graph_model: str = "gpt-4o-mini"
    judge_model: str = "gpt-4o"
    embedding_model: str = "text-embedding-3-small"
    reranker_model: str | None = "jina-reranker-v2-base"
    endpoint: str = ""          # empty endpoint selects the mock provider
    api_key_env: str = "KGRAG_API_KEY"
    timeout_s: float = 30.0
    max_retries: int = 2
    mock_dim: int = 256
    mock_seed: int = 0

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")


@dataclass
class EmbeddingVector:
    values: list[float]
    dim: int

    @classmethod
    def of(cls, values: list[float]) -> "EmbeddingVector":
        return cls(values=list(values), dim=len(values))


def cosine(a: EmbeddingVector | list[float], b: EmbeddingVector | list[float]) -> float:
    va = a.values if isinstance(a, EmbeddingVector) else a
    vb = b.values if isinstance(b, EmbeddingVector) else b
    dot = sum(x * y for x, y in zip(va, vb))
    na = math.sqrt(sum(x * x for x in va))
    nb = math.sqrt(sum(y * y for y in vb))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


@dataclass
class GenerationRequest:
    role: Role
    prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 1024


class EmbeddingCache:
    """Vectors keyed by (model, content hash). Concurrent reads, serialized writes."""

    def __init__(self) -> None:
        self._data: dict[str, list[float]] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(model: str, text: str) -> str:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return f"{model}:{digest}"

    def get(self, model: str, text: str) -> list[float] | None:
        return self._data.get(self._key(model, text))

    def put(self, model: str, text: str, values: list[float]) -> None:
        with self._lock:
            self._data[self._key(model, text)] = list(values)

    def __len__(self) -> int:
        return len(self._data)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self._data, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    def load(self, path: str | Path) -> None:
        path = Path(path)
        if not path.exists():
            return
        with self._lock:
            self._data.update(json.loads(path.read_text(encoding="utf-8")))


class Gateway:
    """Base class: caching embed() around a provider-specific _embed_raw()."""

    def __init__(self, config: ProviderConfig, cache: EmbeddingCache | None = None):
        self.config = config
        self.cache = cache if cache is not None else EmbeddingCache()
        self.cache_enabled = True

    # -- generation ---------------------------------------------------------
    def generate(self, req: GenerationRequest) -> str:
        raise NotImplementedError

    # -- embedding ----------------------------------------------------------
    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        for i, t in enumerate(texts):
            if not t or not t.strip():
                raise ValueError(f"texts[{i}] is empty")
        model = self.config.embedding_model
        out: list[list[float] | None] = []
        missing: list[tuple[int, str]] = []
        for i, t in enumerate(texts):
            hit = self.cache.get(model, t) if self.cache_enabled else None
            out.append(hit)
            if hit is None:
                missing.append((i, t))
        if missing:
            fresh = self._embed_raw([t for _, t in missing])
            if len(fresh) != len(missing):
                raise ProtocolError(
                    f"provider returned {len(fresh)} vectors for {len(missing)} inputs"
                )
            for (i, t), values in zip(missing, fresh):
                out[i] = values
                if self.cache_enabled:
                    self.cache.put(model, t, values)
        return [EmbeddingVector.of(v) for v in out]  # type: ignore[arg-type]

    def _embed_raw(self, texts: list[str]) -> list[list[float]]:
        raise NotImplementedError

    # -- reranking ----------------------------------------------------------
    def rerank(self, query: str, candidates: list[str]) -> list[tuple[int, float]]:
        raise NotImplementedError
