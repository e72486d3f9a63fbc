"""Graph-guided retrieval: decompose, prune, bound, merge, then vector search.

Per sub-query the concept DAG is descended layer by layer (part -> chapter
-> section), keeping only the top-m nodes above the similarity threshold at
each layer; an exact keyword match forces a node to survive. Kept concepts
bound the instance subgraph, everything is merged into a graph context,
and two refined queries (entity-grounded and section-grounded) drive a
vector search restricted to the surviving sections. All stages degrade
gracefully: a provider failure flags the context instead of erroring.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .concept_graph import ConceptGraph, concept_subtree
from .gateway import Gateway, GatewayError, GenerationRequest, Role
from .instance_graph import EntityNode, InstanceGraph, RelationEdge
from .mock_provider import content_tokens, norm_text
from .prompts import render
from .vector_index import SearchHit, SectionFilter, VectorIndex

logger = logging.getLogger(__name__)

LAYER_LIMIT = "section"  # descend no deeper than this level
_LEVELS = ("part", "chapter", "section", "subsection")


@dataclass
class RetrievalConfig:
    max_subqueries: int = 4
    concept_top_m: int = 3
    concept_sim_threshold: float = 0.25
    k_chunks: int = 5
    k_final: int = 8
    instance_hop_limit: int = 1
    rerank_enabled: bool = False
    graph_budget_tokens: int = 1200
    # Ablation switches: flat RAG disables the concept graph entirely;
    # concept-only keeps layer-wise pruning but skips graph-context query
    # refinement, which belongs to the full pipeline.
    use_concept_graph: bool = True
    use_instance_graph: bool = True
    refine_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("max_subqueries", "concept_top_m", "k_chunks", "k_final"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.instance_hop_limit < 0 or self.graph_budget_tokens < 0:
            raise ValueError("instance_hop_limit and graph_budget_tokens must be >= 0")
        if not -1.0 <= self.concept_sim_threshold <= 1.0:
            raise ValueError("concept_sim_threshold must be in [-1, 1]")


@dataclass
class SubQuery:
    text: str
    index: int
    parent_query: str


@dataclass
class FocusResult:
    sub_query: SubQuery
    matched_concepts: list[tuple[str, float]] = field(default_factory=list)
    kept_concept_ids: set[str] = field(default_factory=set)
    surviving_sections: set[str] = field(default_factory=set)
    # Matches kept only by keyword forcing (below the similarity threshold);
    # they survive as a filter but should not steer query refinement.
    forced_concept_ids: set[str] = field(default_factory=set)
    instance_entities: dict[str, EntityNode] = field(default_factory=dict)
    instance_relations: list[RelationEdge] = field(default_factory=list)
    seed_entity_ids: set[str] = field(default_factory=set)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sub_query": self.sub_query.text,
            "matched_concepts": [[cid, round(score, 6)] for cid, score in self.matched_concepts],
            "surviving_sections": sorted(self.surviving_sections),
            "instance_entities": sorted(self.instance_entities),
            "instance_relations": [r.id for r in self.instance_relations],
            "flags": list(self.flags),
        }


@dataclass
class GraphContext:
    entities: dict[str, EntityNode] = field(default_factory=dict)
    relations: list[RelationEdge] = field(default_factory=list)
    concept_paths: list[str] = field(default_factory=list)
    entity_scores: dict[str, float] = field(default_factory=dict)
    # Seeds under score-matched (not merely keyword-forced) concepts; the
    # only entities allowed to steer query refinement.
    steering_entity_ids: set[str] = field(default_factory=set)
    budget_tokens: int = 1200

    def is_empty(self) -> bool:
        return not self.entities and not self.concept_paths

    def ranked_entities(self) -> list[EntityNode]:
        return sorted(
            self.entities.values(),
            key=lambda e: (-self.entity_scores.get(e.id, 0.0), e.id),
        )

    def render(self) -> tuple[str, list[str]]:
        """Serialize within the token budget (chars/4 estimate). Entities of the
        lowest-scoring concepts are dropped first. Returns (text, used entity ids)."""
        if self.budget_tokens <= 0:
            return "", []
        lines: list[str] = []
        used: list[str] = []
        for path in self.concept_paths:
            lines.append(f"Section path: {path}")
        kept_entities = []
        budget_chars = self.budget_tokens * 4
        total = sum(len(ln) + 1 for ln in lines)
        for e in self.ranked_entities():
            line = self._entity_line(e)
            if total + len(line) + 1 > budget_chars:
                break
            lines.append(line)
            total += len(line) + 1
            kept_entities.append(e.id)
            used.append(e.id)
        kept_set = set(kept_entities)
        for r in sorted(self.relations, key=lambda r: r.id):
            if r.src in kept_set and r.dst in kept_set:
                line = f"- {self.entities[r.src].name} --{r.predicate}--> {self.entities[r.dst].name}"
                if total + len(line) + 1 > budget_chars:
                    break
                lines.append(line)
                total += len(line) + 1
        return "\n".join(lines), used

    def _entity_line(self, e: EntityNode) -> str:
        if "value" in e.attributes:
            unit = f" {e.attributes['unit']}" if "unit" in e.attributes else ""
            return f"- {e.name} = {e.attributes['value']}{unit} ({e.entity_class.value})"
        desc = e.attributes.get("description", "")
        suffix = f": {desc}" if desc else ""
        return f"- {e.name} ({e.entity_class.value}){suffix}"


@dataclass
class UnifiedSearchContext:
    query: str
    graph_context: GraphContext
    vector_hits: list[tuple[str, float, str]] = field(default_factory=list)  # (chunk_id, score, excerpt)
    history: list = field(default_factory=list)
    refined_queries: list[str] = field(default_factory=list)
    trace: list[FocusResult] = field(default_factory=list)
    degradation_flags: list[str] = field(default_factory=list)

    def trace_dict(self) -> dict:
        return {
            "query": self.query,
            "refined_queries": list(self.refined_queries),
            "sub_queries": [fr.to_dict() for fr in self.trace],
            "vector_hits": [
                {"chunk_id": cid, "score": round(score, 6), "excerpt": excerpt[:400]}
                for cid, score, excerpt in self.vector_hits
            ],
            "concept_paths": list(self.graph_context.concept_paths),
            "degradation_flags": list(self.degradation_flags),
        }


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def decompose_query(
    query: str, gateway: Gateway, max_subqueries: int = 4
) -> tuple[list[SubQuery], bool]:
    """Split a multi-intent query; degrades to the identity decomposition."""
    if not query.strip():
        raise ValueError("query is empty")
    prompt = render("decompose", question=query, max_subqueries=max_subqueries)
    try:
        raw = gateway.generate(GenerationRequest(role=Role.DECOMPOSE, prompt=prompt))
    except GatewayError as exc:
        logger.warning("decompose failed, using original query: %s", exc)
        return [SubQuery(text=query, index=0, parent_query=query)], True
    parts = [p.strip() for p in raw.splitlines() if p.strip()][:max_subqueries]
    if not parts:
        parts = [query]
    return [SubQuery(text=p, index=i, parent_query=query) for i, p in enumerate(parts)], False


def _keyword_forced(node, query_norm: str) -> bool:
    return any(kw and f" {kw} " in f" {query_norm} " for kw in node.keywords)


def focus_concepts(
    sq: SubQuery, cg: ConceptGraph, cfg: RetrievalConfig, gateway: Gateway
) -> FocusResult:
    result = FocusResult(sub_query=sq)
    if not cg.nodes:
        return result
    try:
        q_vec = gateway.embed([sq.text])[0].values
    except GatewayError as exc:
        logger.warning("sub-query embedding failed: %s", exc)
        result.flags.append("concept_focus_failed")
        return result

    def score(node) -> float:
        emb = node.summary_embedding
        if not emb or len(emb) != len(q_vec):
            return 0.0
        return float(sum(a * b for a, b in zip(q_vec, emb)))

    query_norm = norm_text(sq.text)
    roots = [cg.nodes[r] for r in cg.roots if r in cg.nodes]
    layer = sorted(roots, key=lambda n: n.id)
    scores = {n.id: score(n) for n in layer}
    kept = _keep(layer, scores, cfg, query_norm)
    if not kept:
        kept = sorted(layer, key=lambda n: (-scores[n.id], n.id))[: cfg.concept_top_m]
        result.flags.append("low_confidence")

    terminal: list = []
    while kept:
        pool = []
        descend_from = []
        for node in kept:
            child_ids = cg.children(node.id)
            children = [cg.nodes[c] for c in child_ids if c in cg.nodes]
            if node.level == LAYER_LIMIT or not children:
                terminal.append(node)
            else:
                descend_from.append(node)
                pool.extend(children)
        if not pool:
            break
        pool = sorted({n.id: n for n in pool}.values(), key=lambda n: n.id)
        scores = {n.id: score(n) for n in pool}
        kept_children = _keep(pool, scores, cfg, query_norm)
        kept_child_ids = {n.id for n in kept_children}
        # A node none of whose children survive stays in the result at its own level.
        for node in descend_from:
            if not any(c in kept_child_ids for c in cg.children(node.id)):
                terminal.append(node)
        kept = kept_children

    terminal = list({n.id: n for n in terminal}.values())
    result.matched_concepts = sorted(
        ((n.id, scores.get(n.id, score(n))) for n in terminal),
        key=lambda pair: (-pair[1], pair[0]),
    )
    result.forced_concept_ids = {
        cid for cid, s in result.matched_concepts if s < cfg.concept_sim_threshold
    }
    for cid, _ in result.matched_concepts:
        subtree = concept_subtree(cg, cid)
        result.kept_concept_ids.update(subtree)
        result.surviving_sections.update(cg.nodes[c].section_id for c in subtree)
    return result


def _keep(pool, scores, cfg: RetrievalConfig, query_norm: str):
    above = [n for n in pool if scores[n.id] >= cfg.concept_sim_threshold]
    top = sorted(above, key=lambda n: (-scores[n.id], n.id))[: cfg.concept_top_m]
    forced = [n for n in pool if _keyword_forced(n, query_norm)]
    kept = {n.id: n for n in top}
    for n in forced:
        kept.setdefault(n.id, n)
    return sorted(kept.values(), key=lambda n: (-scores[n.id], n.id))


def focus_instances(
    kept_concept_ids: set[str], ig: InstanceGraph, sq: SubQuery, cfg: RetrievalConfig
) -> tuple[dict[str, EntityNode], list[RelationEdge], set[str]]:
    """Entities inside the concept boundary that share a token with the
    sub-query, expanded by up to ``instance_hop_limit`` hops. Returns
    (entities, relations, directly-matched seed ids)."""
    if not kept_concept_ids:
        return {}, [], set()
    sq_tokens = set(content_tokens(sq.text))

    def matches(e: EntityNode) -> bool:
        tokens = set(content_tokens(e.name_norm))
        for key, value in e.attributes.items():
            # Bookkeeping attributes (provenance, merge alternatives) carry
            # chunk ids and flags, not domain vocabulary.
            if key.startswith(("completed_from", "alt:")) or key == "completion":
                continue
            tokens.update(content_tokens(value))
        return bool(tokens & sq_tokens)

    in_boundary: set[str] = set()
    for cid in kept_concept_ids:
        in_boundary.update(ig.by_concept.get(cid, []))

    seeds = {eid for eid in in_boundary if matches(ig.entities[eid])}
    selected = set(seeds)
    frontier = set(seeds)
    for _ in range(cfg.instance_hop_limit):
        nxt: set[str] = set()
        for eid in frontier:
            for _, other in ig.neighbors(eid):
                if other in in_boundary and other not in selected:
                    nxt.add(other)
        selected.update(nxt)
        frontier = nxt
        if not frontier:
            break

    entities = {eid: ig.entities[eid] for eid in selected}
    relations = [
        r for r in ig.relations if r.src in selected and r.dst in selected
    ]
    return entities, sorted(relations, key=lambda r: r.id), seeds


def merge_focus_results(
    results: list[FocusResult], cg: ConceptGraph, budget_tokens: int
) -> GraphContext:
    gc = GraphContext(budget_tokens=budget_tokens)
    path_scores: dict[str, float] = {}
    for fr in results:
        concept_scores = dict(fr.matched_concepts)
        scored = [(c, s) for c, s in fr.matched_concepts if c not in fr.forced_concept_ids]
        # One breadcrumb per sub-query: its single best match. Listing every
        # surviving sibling would boost the whole subtree indiscriminately.
        for cid, score in (scored or fr.matched_concepts)[:1]:
            path = cg.breadcrumb(cid)
            path_scores[path] = max(path_scores.get(path, float("-inf")), score)
        scored_subtrees: set[str] = set()
        for cid, _ in scored or fr.matched_concepts:
            scored_subtrees.update(concept_subtree(cg, cid))
        for eid, entity in fr.instance_entities.items():
            gc.entities.setdefault(eid, entity)
            score = _entity_concept_score(entity, fr, concept_scores, cg)
            # Directly query-matched seeds outrank hop-expanded context entities.
            if eid in fr.seed_entity_ids:
                score += 1.0
                if entity.concept_node_id in scored_subtrees:
                    gc.steering_entity_ids.add(eid)
            if score > gc.entity_scores.get(eid, float("-inf")):
                gc.entity_scores[eid] = score
        for r in fr.instance_relations:
            gc.relations.append(r)
    gc.relations = sorted({r.id: r for r in gc.relations}.values(), key=lambda r: r.id)
    gc.concept_paths = [
        p for p, _ in sorted(path_scores.items(), key=lambda kv: (-kv[1], kv[0]))
    ]
    return gc


def _entity_concept_score(
    entity: EntityNode, fr: FocusResult, concept_scores: dict[str, float], cg: ConceptGraph
) -> float:
    best = 0.0
    for cid, score in concept_scores.items():
        if entity.concept_node_id == cid or entity.concept_node_id in concept_subtree(cg, cid):
            best = max(best, score)
    return best


def refine_query(
    query: str, gc: GraphContext, template: str, gateway: Gateway, max_terms: int = 8
) -> tuple[str, bool]:
    """template is 'entity_grounded' or 'section_grounded'."""
    if template == "entity_grounded":
        ranked = gc.ranked_entities()
        if gc.steering_entity_ids:
            ranked = [e for e in ranked if e.id in gc.steering_entity_ids]
        terms = [e.name for e in ranked[:max_terms]]
        name = "refine_entity"
    elif template == "section_grounded":
        # Best-matched paths only; listing every surviving sibling would
        # drag the whole subtree up the ranking indiscriminately.
        terms = gc.concept_paths[: min(3, max_terms)]
        name = "refine_section"
    else:
        raise ValueError(f"unknown refine template {template!r}")
    if not terms:
        return query, False
    prompt = render(name, question=query, terms="\n".join(terms))
    try:
        refined = gateway.generate(GenerationRequest(role=Role.REFINE_QUERY, prompt=prompt)).strip()
    except GatewayError as exc:
        logger.warning("refine (%s) failed: %s", template, exc)
        return query, True
    return (refined.splitlines()[0] if refined else query), False


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def retrieve(
    query: str,
    session_history: list,
    cg: ConceptGraph,
    ig: InstanceGraph,
    index: VectorIndex,
    cfg: RetrievalConfig,
    gateway: Gateway,
) -> UnifiedSearchContext:
    flags: list[str] = []

    if not cfg.use_concept_graph:
        gc = GraphContext(budget_tokens=cfg.graph_budget_tokens)
        hits = _vector_search(query, index, cfg.k_final, None, gateway, flags)
        return UnifiedSearchContext(
            query=query,
            graph_context=gc,
            vector_hits=_excerpts(hits, index),
            history=list(session_history),
            refined_queries=[query],
            trace=[],
            degradation_flags=flags,
        )

    subqueries, degraded = decompose_query(query, gateway, cfg.max_subqueries)
    if degraded:
        flags.append("decompose_failed")

    results: list[FocusResult] = []
    for sq in subqueries:
        fr = focus_concepts(sq, cg, cfg, gateway)
        if cfg.use_instance_graph:
            fr.instance_entities, fr.instance_relations, fr.seed_entity_ids = focus_instances(
                fr.kept_concept_ids, ig, sq, cfg
            )
        flags.extend(fr.flags)
        results.append(fr)

    gc = merge_focus_results(results, cg, cfg.graph_budget_tokens)

    refined_queries: list[str] = []
    if cfg.refine_enabled:
        for template in ("entity_grounded", "section_grounded"):
            refined, degraded = refine_query(query, gc, template, gateway)
            if degraded:
                flags.append(f"refine_failed:{template}")
            if refined not in refined_queries:
                refined_queries.append(refined)
    else:
        refined_queries = [query]

    surviving = set()
    for fr in results:
        surviving.update(fr.surviving_sections)
    section_filter = SectionFilter(surviving) if cg.nodes else None

    merged: dict[str, SearchHit] = {}
    for rq in refined_queries:
        for hit in _vector_search(rq, index, cfg.k_chunks, section_filter, gateway, flags):
            prev = merged.get(hit.chunk_id)
            if prev is None or hit.score > prev.score:
                merged[hit.chunk_id] = hit
    ordered = sorted(merged.values(), key=lambda h: (-h.score, h.chunk_id))
    if cfg.rerank_enabled and ordered:
        ordered, degraded = index.rerank_hits(query, ordered, gateway)
        if degraded:
            flags.append("rerank_failed")
    final = [
        SearchHit(chunk_id=h.chunk_id, score=h.score, rank=i)
        for i, h in enumerate(ordered[: cfg.k_final], start=1)
    ]

    return UnifiedSearchContext(
        query=query,
        graph_context=gc,
        vector_hits=_excerpts(final, index),
        history=list(session_history),
        refined_queries=refined_queries,
        trace=results,
        degradation_flags=flags,
    )


def _vector_search(
    query: str,
    index: VectorIndex,
    k: int,
    section_filter: SectionFilter | None,
    gateway: Gateway,
    flags: list[str],
) -> list[SearchHit]:
    if len(index) == 0:
        return []
    try:
        q_vec = gateway.embed([query])[0]
    except GatewayError as exc:
        logger.warning("query embedding failed: %s", exc)
        flags.append("vector_search_failed")
        return []
    return index.search(q_vec, k=k, filter=section_filter)


def _excerpts(hits: list[SearchHit], index: VectorIndex) -> list[tuple[str, float, str]]:
    out = []
    for h in hits:
        text = index.text_for(h.chunk_id) or ""
        out.append((h.chunk_id, h.score, text))
    return out
