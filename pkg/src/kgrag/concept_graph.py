"""Concept knowledge graph: one node per document section, built bottom-up.

Nodes carry a summary (generated or overridden), keywords, and the summary
embedding. ``subTopic`` edges follow the section hierarchy; ``hasKeyword``
edges point at keyword nodes that are shared across concepts (identical
normalized keyword text -> one node), which is what turns the structure
into a DAG rather than a forest.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .documents import BlockKind, Document, Section
from .gateway import Gateway, GatewayError, GenerationRequest, Role
from .prompts import render

logger = logging.getLogger(__name__)

SUBTOPIC = "subTopic"
HASKEYWORD = "hasKeyword"

DEFAULT_SUMMARY_TOKENS = 120


class ConceptBuildError(Exception):
    """Build aborted; ``checkpoint`` holds completed sections for resuming."""

    def __init__(self, message: str, checkpoint: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint if checkpoint is not None else {}


class CycleError(Exception):
    def __init__(self, cycle: list[str]):
        super().__init__("subTopic cycle: " + " -> ".join(cycle))
        self.cycle = cycle


@dataclass
class ConceptNode:
    id: str
    section_id: str
    level: str
    title: str
    summary: str = ""
    keywords: list[str] = field(default_factory=list)
    summary_embedding: list[float] = field(default_factory=list)
    origin: str = "generated"  # or "override"


@dataclass
class KeywordNode:
    id: str
    text: str


@dataclass
class ConceptEdge:
    src: str
    dst: str
    kind: str  # SUBTOPIC or HASKEYWORD


@dataclass
class ConceptGraph:
    nodes: dict[str, ConceptNode] = field(default_factory=dict)
    keyword_nodes: dict[str, KeywordNode] = field(default_factory=dict)
    edges: list[ConceptEdge] = field(default_factory=list)
    roots: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._children: dict[str, list[str]] = {}
        self._by_section: dict[str, str] = {}
        self.reindex()

    def reindex(self) -> None:
        self._children = {nid: [] for nid in self.nodes}
        for e in self.edges:
            if e.kind == SUBTOPIC:
                self._children.setdefault(e.src, []).append(e.dst)
        self._by_section = {n.section_id: n.id for n in self.nodes.values()}

    def children(self, node_id: str) -> list[str]:
        return self._children.get(node_id, [])

    def node_for_section(self, section_id: str) -> ConceptNode | None:
        nid = self._by_section.get(section_id)
        return self.nodes[nid] if nid else None

    def subtree_section_ids(self, node_id: str) -> set[str]:
        return {self.nodes[cid].section_id for cid in concept_subtree(self, node_id)}

    def breadcrumb(self, node_id: str) -> str:
        parents: dict[str, str] = {}
        for e in self.edges:
            if e.kind == SUBTOPIC:
                parents[e.dst] = e.src
        path = [node_id]
        while path[-1] in parents:
            path.append(parents[path[-1]])
        return " > ".join(self.nodes[nid].title for nid in reversed(path))

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "section_id": n.section_id,
                    "level": n.level,
                    "title": n.title,
                    "summary": n.summary,
                    "keywords": list(n.keywords),
                    "summary_embedding": list(n.summary_embedding),
                    "origin": n.origin,
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
            "keyword_nodes": [
                {"id": k.id, "text": k.text}
                for k in sorted(self.keyword_nodes.values(), key=lambda k: k.id)
            ],
            "edges": [
                {"src": e.src, "dst": e.dst, "kind": e.kind}
                for e in sorted(self.edges, key=lambda e: (e.kind, e.src, e.dst))
            ],
            "roots": list(self.roots),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptGraph":
        graph = cls(
            nodes={
                n["id"]: ConceptNode(
                    id=n["id"],
                    section_id=n["section_id"],
                    level=n["level"],
                    title=n["title"],
                    summary=n["summary"],
                    keywords=list(n["keywords"]),
                    summary_embedding=list(n["summary_embedding"]),
                    origin=n.get("origin", "generated"),
                )
                for n in data["nodes"]
            },
            keyword_nodes={k["id"]: KeywordNode(**k) for k in data["keyword_nodes"]},
            edges=[ConceptEdge(**e) for e in data["edges"]],
            roots=list(data["roots"]),
            warnings=list(data.get("warnings", [])),
        )
        return graph

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "ConceptGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def normalize_keyword(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def concept_node_id(section_id: str) -> str:
    return f"c:{section_id}"


def keyword_node_id(norm: str) -> str:
    return "k:" + norm.replace(" ", "_")


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------

def _section_text(sec: Section) -> list[str]:
    """Summary raw material: paragraphs and image descriptions, tables as fallback."""
    parts = [b.text for b in sec.blocks if b.kind in (BlockKind.PARAGRAPH, BlockKind.IMAGE) and b.text]
    if not parts:
        parts = [b.text for b in sec.blocks if b.kind is BlockKind.TABLE and b.text]
    return parts


def summarize_section(
    sec: Section,
    child_summaries: list[str],
    gateway: Gateway,
    max_summary_tokens: int = DEFAULT_SUMMARY_TOKENS,
) -> str:
    pieces = _section_text(sec) + list(child_summaries)
    if not pieces:
        raise ConceptBuildError(f"section {sec.id!r} ({sec.title!r}) has no blocks and no children")
    prompt = render(
        "summarize", title=sec.title, max_tokens=max_summary_tokens, text="\n".join(pieces)
    )
    summary = gateway.generate(GenerationRequest(role=Role.SUMMARIZE, prompt=prompt)).strip()
    words = summary.split()
    if len(words) > max_summary_tokens:
        summary = " ".join(words[:max_summary_tokens])
    if not summary:
        raise ConceptBuildError(f"empty summary for section {sec.id!r}")
    return summary


def extract_keywords(summary: str, gateway: Gateway) -> list[str]:
    prompt = render("keywords", text=summary)
    raw = gateway.generate(GenerationRequest(role=Role.KEYWORDS, prompt=prompt))
    seen: list[str] = []
    for line in raw.splitlines():
        norm = normalize_keyword(line)
        if norm and norm not in seen:
            seen.append(norm)
        if len(seen) == 10:
            break
    return seen


def build_concept_graph(
    doc: Document,
    overrides: dict[str, dict] | None = None,
    gateway: Gateway | None = None,
    checkpoint: dict | None = None,
    max_summary_tokens: int = DEFAULT_SUMMARY_TOKENS,
) -> ConceptGraph:
    """One concept node per section; raises ConceptBuildError with a resumable
    checkpoint when the gateway fails partway."""
    if gateway is None:
        raise ValueError("gateway is required")
    overrides = overrides or {}
    checkpoint = checkpoint if checkpoint is not None else {}
    unknown = set(overrides) - {sec.id for sec, _ in doc.walk()}
    if unknown:
        raise ConceptBuildError(f"override references unknown section ids: {sorted(unknown)}")

    graph = ConceptGraph()
    warnings: list[str] = []

    def build_section(sec: Section) -> ConceptNode:
        child_nodes = [build_section(c) for c in sec.children]
        override = overrides.get(sec.id, {})
        done = checkpoint.get(sec.id)
        try:
            if done:
                summary, keywords, origin = done["summary"], list(done["keywords"]), done["origin"]
            else:
                origin = "generated"
                if "summary" in override:
                    summary = override["summary"]
                    origin = "override"
                else:
                    summary = summarize_section(
                        sec, [c.summary for c in child_nodes], gateway, max_summary_tokens
                    )
                if "keywords" in override:
                    keywords = list(dict.fromkeys(normalize_keyword(k) for k in override["keywords"]))
                    origin = "override"
                else:
                    keywords = extract_keywords(summary, gateway)
                if not keywords:
                    if sec.level == "part":
                        warnings.append(f"no keywords extracted for part {sec.id!r}")
                    else:
                        keywords = [normalize_keyword(sec.title)]
                        warnings.append(f"keyword fallback to title for {sec.id!r}")
                checkpoint[sec.id] = {"summary": summary, "keywords": keywords, "origin": origin}
        except GatewayError as exc:
            raise ConceptBuildError(
                f"gateway failure while summarizing {sec.id!r}: {exc}", checkpoint
            ) from exc

        node = ConceptNode(
            id=concept_node_id(sec.id),
            section_id=sec.id,
            level=sec.level.value if hasattr(sec.level, "value") else str(sec.level),
            title=sec.title,
            summary=summary,
            keywords=keywords,
            origin=origin,
        )
        graph.nodes[node.id] = node
        for child in child_nodes:
            graph.edges.append(ConceptEdge(src=node.id, dst=child.id, kind=SUBTOPIC))
        for kw in keywords:
            kid = keyword_node_id(kw)
            if kid not in graph.keyword_nodes:
                graph.keyword_nodes[kid] = KeywordNode(id=kid, text=kw)
            graph.edges.append(ConceptEdge(src=node.id, dst=kid, kind=HASKEYWORD))
        return node

    for root_sec in doc.sections:
        root_node = build_section(root_sec)
        graph.roots.append(root_node.id)

    # Embed every summary in one deterministic batch.
    ordered = sorted(graph.nodes.values(), key=lambda n: n.id)
    try:
        vectors = gateway.embed([n.summary for n in ordered])
    except GatewayError as exc:
        raise ConceptBuildError(f"gateway failure while embedding summaries: {exc}", checkpoint) from exc
    for node, vec in zip(ordered, vectors):
        node.summary_embedding = vec.values

    graph.warnings = warnings
    graph.reindex()
    verify_dag(graph)
    return graph


def verify_dag(graph: ConceptGraph) -> None:
    """Topological check of the subTopic subgraph; raises CycleError."""
    state: dict[str, int] = {}  # 0 visiting, 1 done
    path: list[str] = []

    def visit(nid: str) -> None:
        if state.get(nid) == 1:
            return
        if state.get(nid) == 0:
            cycle = path[path.index(nid) :] + [nid]
            raise CycleError(cycle)
        state[nid] = 0
        path.append(nid)
        for child in graph.children(nid):
            visit(child)
        path.pop()
        state[nid] = 1

    for nid in graph.nodes:
        visit(nid)


def concept_subtree(graph: ConceptGraph, node_id: str) -> set[str]:
    """All concept node ids reachable via subTopic edges, inclusive."""
    if node_id not in graph.nodes:
        raise KeyError(f"unknown concept node {node_id!r}")
    seen: set[str] = set()
    stack = [node_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(graph.children(nid))
    return seen


def merge_concept_graphs(graphs: list[ConceptGraph]) -> ConceptGraph:
    """Union per-document graphs into one corpus graph (shared keyword nodes)."""
    merged = ConceptGraph()
    for g in graphs:
        overlap = merged.nodes.keys() & g.nodes.keys()
        if overlap:
            raise ConceptBuildError(f"concept node id collision across documents: {sorted(overlap)[:3]}")
        merged.nodes.update(g.nodes)
        merged.keyword_nodes.update(g.keyword_nodes)
        merged.edges.extend(g.edges)
        merged.roots.extend(g.roots)
        merged.warnings.extend(g.warnings)
    merged.reindex()
    verify_dag(merged)
    return merged
