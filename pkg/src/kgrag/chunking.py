"""Segment documents into chunks that keep hierarchy, context and modality.

Paragraphs are packed greedily up to ``max_tokens``; a paragraph is only
split (at sentence boundaries, never mid-sentence) when it exceeds
``max_tokens`` on its own. Tables and images always become standalone
chunks. Every chunk carries a ``context_header`` breadcrumb of its section
path, e.g. ``Part One > Storage > Buffer Pool``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum

from .documents import BlockKind, Document, Section


class Modality(str, Enum):
    TEXT = "text"
    TABLE = "table"
    IMAGE = "image"


_ESTIMATORS = ("whitespace", "chars_per_token_4")


@dataclass
class ChunkPolicy:
    max_tokens: int = 512
    min_tokens: int = 64
    overlap_tokens: int = 0
    token_estimator: str = "chars_per_token_4"

    def __post_init__(self) -> None:
        if self.token_estimator not in _ESTIMATORS:
            raise ValueError(f"unknown token_estimator {self.token_estimator!r}")
        if not self.min_tokens < self.max_tokens:
            raise ValueError("min_tokens must be < max_tokens")
        if not 0 <= self.overlap_tokens < self.min_tokens:
            raise ValueError("overlap_tokens must be in [0, min_tokens)")

    def estimate(self, text: str) -> int:
        if not text:
            return 0
        if self.token_estimator == "whitespace":
            return len(text.split())
        return max(1, math.ceil(len(text) / 4))


@dataclass
class Chunk:
    id: str
    document_id: str
    section_id: str
    modality: Modality
    content: str
    context_header: str
    token_estimate: int
    char_span: tuple[int, int] | None = None


_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_SPLIT_RE.split(text.strip()) if s]


def chunk_document(doc: Document, policy: ChunkPolicy) -> list[Chunk]:
    """Pure function: identical (doc, policy) yields identical chunk lists."""
    chunks: list[Chunk] = []
    for sec, ancestors in doc.walk():
        breadcrumb = " > ".join([a.title for a in ancestors] + [sec.title])
        chunks.extend(_chunk_section(doc.id, sec, breadcrumb, policy))
    return chunks


def _chunk_section(doc_id: str, sec: Section, breadcrumb: str, policy: ChunkPolicy) -> list[Chunk]:
    out: list[Chunk] = []
    buf: list[str] = []
    buf_tokens = 0
    prev_text_content: str | None = None
    # Leave headroom for the overlap prefix so packed chunks stay <= max_tokens.
    cap = policy.max_tokens - policy.overlap_tokens

    def emit(content: str, modality: Modality) -> None:
        out.append(
            Chunk(
                id=f"{sec.id}:{len(out)}",
                document_id=doc_id,
                section_id=sec.id,
                modality=modality,
                content=content,
                context_header=breadcrumb,
                token_estimate=policy.estimate(content),
            )
        )

    def emit_text(content: str, continuing: bool) -> None:
        nonlocal prev_text_content
        if continuing and policy.overlap_tokens and prev_text_content is not None:
            prefix = _overlap_tail(prev_text_content, policy)
            prev_text_content = content
            if prefix:
                content = prefix + " " + content
        else:
            prev_text_content = content
        emit(content, Modality.TEXT)

    def flush(continuing: bool = False) -> None:
        nonlocal buf, buf_tokens
        if buf:
            emit_text("\n\n".join(buf), continuing)
            buf = []
            buf_tokens = 0

    for block in sec.blocks:
        if block.kind is BlockKind.TABLE:
            flush()
            prev_text_content = None
            emit(block.text, Modality.TABLE)
            continue
        if block.kind is BlockKind.IMAGE:
            flush()
            prev_text_content = None
            emit(block.text, Modality.IMAGE)
            continue
        para = block.text
        para_tokens = policy.estimate(para)
        if para_tokens > cap:
            flush(continuing=True)
            for piece in _pack_sentences(split_sentences(para), policy, cap):
                emit_text(piece, continuing=True)
            continue
        if buf and buf_tokens + para_tokens > cap:
            flush(continuing=True)
        buf.append(para)
        buf_tokens += para_tokens
    flush(continuing=True)
    return out


def _pack_sentences(sentences: list[str], policy: ChunkPolicy, cap: int) -> list[str]:
    """Greedy sentence packing; a single over-long sentence stays whole."""
    pieces: list[str] = []
    cur: list[str] = []
    cur_tokens = 0
    for sent in sentences:
        t = policy.estimate(sent)
        if cur and cur_tokens + t > cap:
            pieces.append(" ".join(cur))
            cur, cur_tokens = [], 0
        cur.append(sent)
        cur_tokens += t
    if cur:
        pieces.append(" ".join(cur))
    return pieces


def _overlap_tail(content: str, policy: ChunkPolicy) -> str:
    """Trailing whole sentences of ``content`` totalling <= overlap_tokens."""
    tail: list[str] = []
    total = 0
    for sent in reversed(split_sentences(content.replace("\n\n", " "))):
        t = policy.estimate(sent)
        if total + t > policy.overlap_tokens:
            break
        tail.insert(0, sent)
        total += t
    return " ".join(tail)
