"""Final prompt assembly, generation, citation parsing and session state.

The prompt is a deterministic sectioned document: system instruction,
[GRAPH CONTEXT], [RETRIEVED PASSAGES] (each passage tagged with its chunk
id), [DIALOGUE HISTORY], [QUESTION]. The model is asked to cite passages
with ``[chunk:<id>]`` markers, which are parsed back into citations and
validated against the chunk store; markers that do not resolve are dropped
and flagged, never fabricated.
"""
from __future__ import annotations

import hashlib
import logging
import re
import time
from dataclasses import dataclass, field

from .gateway import Gateway, GatewayError, GenerationRequest, Role
from .prompts import render
from .retrieval import UnifiedSearchContext

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_BUDGET_TOKENS = 3000

_CITATION_RE = re.compile(r"\[chunk:([^\]\s]+)\]")


@dataclass
class DialogueTurn:
    role: str  # "user" | "assistant"
    text: str
    timestamp: float = 0.0
    context_digest: str | None = None

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "text": self.text,
            "timestamp": self.timestamp,
            "context_digest": self.context_digest,
        }


@dataclass
class Session:
    id: str
    turns: list[DialogueTurn] = field(default_factory=list)
    max_history_turns: int = 6
    created_at: float = 0.0

    def history(self) -> list[DialogueTurn]:
        return self.turns[-self.max_history_turns :]

    def append(self, turn: DialogueTurn) -> None:
        expected = "user" if not self.turns or self.turns[-1].role == "assistant" else "assistant"
        if turn.role != expected:
            raise ValueError(f"turn role {turn.role!r} breaks alternation (expected {expected!r})")
        self.turns.append(turn)


@dataclass
class Answer:
    text: str
    citations: list[str] = field(default_factory=list)
    graph_entities_used: list[str] = field(default_factory=list)
    degradation_flags: list[str] = field(default_factory=list)
    latency_ms: float = 0.0


def _estimate_tokens(text: str) -> int:
    return max(1, (len(text) + 3) // 4) if text else 0


def build_prompt(
    usc: UnifiedSearchContext, budget_tokens: int = DEFAULT_PROMPT_BUDGET_TOKENS
) -> str:
    """Deterministic prompt; over budget, the lowest-ranked passages drop first."""
    graph_text, _ = usc.graph_context.render()
    history_lines = [f"{t.role}: {t.text}" for t in usc.history]
    history_text = "\n".join(history_lines)

    def passage_block(chunk_id: str, excerpt: str) -> str:
        return f"[chunk:{chunk_id}]\n{excerpt}"

    passages = [passage_block(cid, excerpt) for cid, _, excerpt in usc.vector_hits]
    while True:
        prompt = render(
            "answer",
            graph_context=graph_text or "(none)",
            passages="\n\n".join(passages) or "(none)",
            history=history_text or "(none)",
            question=usc.query,
        )
        if _estimate_tokens(prompt) <= budget_tokens or not passages:
            return prompt
        passages.pop()  # drop the lowest-ranked passage first


def answer(
    query: str,
    session: Session,
    *,
    cg,
    ig,
    index,
    chunk_ids: set[str],
    retrieval_cfg,
    gateway: Gateway,
    prompt_budget_tokens: int = DEFAULT_PROMPT_BUDGET_TOKENS,
) -> tuple[Answer, UnifiedSearchContext]:
    """retrieve -> build_prompt -> generate; appends both turns on success.

    On generation failure the session is left unchanged and an error answer
    with a degradation flag is returned.
    """
    from .retrieval import retrieve

    started = time.perf_counter()
    usc = retrieve(query, session.history(), cg, ig, index, retrieval_cfg, gateway)
    prompt = build_prompt(usc, prompt_budget_tokens)
    _, entities_used = usc.graph_context.render()
    flags = list(usc.degradation_flags)
    try:
        text = gateway.generate(GenerationRequest(role=Role.ANSWER, prompt=prompt)).strip()
    except GatewayError as exc:
        logger.warning("answer generation failed: %s", exc)
        flags.append("generation_failed")
        return (
            Answer(
                text="Generation failed; no answer was produced.",
                citations=[],
                graph_entities_used=entities_used,
                degradation_flags=flags,
                latency_ms=(time.perf_counter() - started) * 1000.0,
            ),
            usc,
        )

    citations: list[str] = []
    for marker in _CITATION_RE.findall(text):
        if marker in chunk_ids:
            if marker not in citations:
                citations.append(marker)
        elif "unresolved_citation" not in flags:
            flags.append("unresolved_citation")

    digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]
    now = time.time()
    session.append(DialogueTurn(role="user", text=query, timestamp=now))
    session.append(
        DialogueTurn(role="assistant", text=text, timestamp=now, context_digest=digest)
    )
    return (
        Answer(
            text=text,
            citations=citations,
            graph_entities_used=entities_used,
            degradation_flags=flags,
            latency_ms=(time.perf_counter() - started) * 1000.0,
        ),
        usc,
    )
