"""Exact cosine top-k search over chunk embeddings with section filtering.

v1 is an exhaustive scan over an immutable snapshot (corpora here are
thousands of chunks, not millions); ties break by ascending chunk id so
results are fully deterministic. The embedded text is the chunk's
context-header breadcrumb plus its content.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chunking import Chunk
from .gateway import Gateway, GatewayError

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


@dataclass
class SearchHit:
    chunk_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class SectionFilter:
    """Empty set matches nothing; pass ``filter=None`` for no restriction."""

    allowed_section_ids: frozenset[str]

    def __init__(self, allowed_section_ids) -> None:
        object.__setattr__(self, "allowed_section_ids", frozenset(allowed_section_ids))


def embedded_text(chunk: Chunk) -> str:
    if chunk.context_header:
        return f"{chunk.context_header}\n{chunk.content}"
    return chunk.content


class VectorIndex:
    def __init__(self, dim: int, model: str):
        self.dim = dim
        self.model = model
        self.chunk_ids: list[str] = []
        self.section_ids: list[str] = []
        self.modalities: list[str] = []
        self.texts: list[str] = []
        self._matrix = np.zeros((0, dim), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.chunk_ids)

    # -- construction --------------------------------------------------------
    @classmethod
    def index_chunks(cls, chunks: list[Chunk], gateway: Gateway) -> "VectorIndex":
        texts = [embedded_text(c) for c in chunks]
        vectors = gateway.embed(texts) if texts else []
        dims = {v.dim for v in vectors}
        if len(dims) > 1:
            raise ValueError(f"provider returned mixed embedding dims: {sorted(dims)}")
        dim = dims.pop() if dims else gateway.config.mock_dim
        index = cls(dim=dim, model=gateway.config.embedding_model)
        seen: set[str] = set()
        rows = []
        for chunk, text, vec in zip(chunks, texts, vectors):
            if chunk.id in seen:
                raise ValueError(f"duplicate chunk id {chunk.id!r}")
            seen.add(chunk.id)
            index.chunk_ids.append(chunk.id)
            index.section_ids.append(chunk.section_id)
            index.modalities.append(chunk.modality.value)
            index.texts.append(text)
            rows.append(vec.values)
        if rows:
            index._matrix = np.asarray(rows, dtype=np.float64)
        return index

    @classmethod
    def from_vectors(
        cls, dim: int, model: str, records: list[tuple[str, str, "np.ndarray"]]
    ) -> "VectorIndex":
        """Bulk-build from precomputed (chunk_id, section_id, vector) records."""
        index = cls(dim=dim, model=model)
        seen: set[str] = set()
        rows = []
        for chunk_id, section_id, vector in records:
            vec = np.asarray(vector, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector dim {vec.shape} does not match index dim {dim}")
            if chunk_id in seen:
                raise ValueError(f"duplicate chunk id {chunk_id!r}")
            seen.add(chunk_id)
            index.chunk_ids.append(chunk_id)
            index.section_ids.append(section_id)
            index.modalities.append("text")
            index.texts.append("")
            rows.append(vec)
        if rows:
            index._matrix = np.asarray(rows, dtype=np.float64)
        return index

    # -- search ---------------------------------------------------------------
    def search(self, query_vector, k: int, filter: SectionFilter | None = None) -> list[SearchHit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(
            query_vector.values if hasattr(query_vector, "values") else query_vector,
            dtype=np.float64,
        )
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape} does not match index dim {self.dim}")
        if not self.chunk_ids:
            return []
        if filter is not None:
            allowed = filter.allowed_section_ids
            candidates = [i for i, sid in enumerate(self.section_ids) if sid in allowed]
        else:
            candidates = range(len(self.chunk_ids))
        scores = self._matrix @ q
        ordered = sorted(candidates, key=lambda i: (-scores[i], self.chunk_ids[i]))[:k]
        return [
            SearchHit(chunk_id=self.chunk_ids[i], score=float(scores[i]), rank=rank)
            for rank, i in enumerate(ordered, start=1)
        ]

    def rerank_hits(
        self, query: str, hits: list[SearchHit], gateway: Gateway
    ) -> tuple[list[SearchHit], bool]:
        """Reorder hits by reranker scores. On failure the input order is
        returned unchanged and the degradation flag is set."""
        if not hits:
            return [], False
        text_by_id = dict(zip(self.chunk_ids, self.texts))
        candidates = [text_by_id.get(h.chunk_id, "") for h in hits]
        try:
            ranking = gateway.rerank(query, candidates)
        except (GatewayError, ValueError) as exc:
            logger.warning("rerank failed, keeping vector order: %s", exc)
            return list(hits), True
        reordered = [
            SearchHit(chunk_id=hits[i].chunk_id, score=score, rank=rank)
            for rank, (i, score) in enumerate(ranking, start=1)
        ]
        return reordered, False

    def text_for(self, chunk_id: str) -> str | None:
        try:
            return self.texts[self.chunk_ids.index(chunk_id)]
        except ValueError:
            return None

    # -- persistence ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        payload = {
            "header": {
                "version": INDEX_FORMAT_VERSION,
                "dim": self.dim,
                "model": self.model,
                "count": len(self.chunk_ids),
            },
            "records": [
                {
                    "chunk_id": cid,
                    "section_id": sid,
                    "modality": mod,
                    "text": text,
                    "vector": list(map(float, row)),
                }
                for cid, sid, mod, text, row in zip(
                    self.chunk_ids, self.section_ids, self.modalities, self.texts, self._matrix
                )
            ],
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        header = payload["header"]
        if header["version"] != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index version {header['version']}")
        index = cls(dim=header["dim"], model=header["model"])
        rows = []
        for rec in payload["records"]:
            index.chunk_ids.append(rec["chunk_id"])
            index.section_ids.append(rec["section_id"])
            index.modalities.append(rec["modality"])
            index.texts.append(rec["text"])
            rows.append(rec["vector"])
        if rows:
            index._matrix = np.asarray(rows, dtype=np.float64)
        return index
