"""Instance knowledge graph: typed entities and relations extracted from chunks.

Three extraction tiers feed the graph: a high-level pass over concept
summaries (macro cross-references), a mid-level pass over text chunks
(components and operations), and a low-level pass over every chunk
(procedural / identificational / parametric entities, plus one artifact
entity per table or image). Extractor output uses a strict line protocol

    ENTITY<TAB>class<TAB>name<TAB>key=value;...
    REL<TAB>src_name<TAB>predicate<TAB>dst_name

parsed leniently line by line so provider noise is never fatal.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .chunking import Chunk, Modality
from .concept_graph import ConceptGraph
from .documents import Document
from .gateway import Gateway, GatewayError, GenerationRequest, Role
from .prompts import render

logger = logging.getLogger(__name__)


class EntityClass(str, Enum):
    CONCEPT_REF = "concept_ref"
    COMPONENT = "component"
    OPERATION = "operation"
    PROCEDURAL = "procedural"
    IDENTIFICATIONAL = "identificational"
    PARAMETRIC = "parametric"
    ARTIFACT_TABLE = "artifact_table"
    ARTIFACT_IMAGE = "artifact_image"


class Tier(str, Enum):
    HIGH = "high"
    MID = "mid"
    LOW = "low"


MID_CLASSES = {EntityClass.COMPONENT, EntityClass.OPERATION}
LOW_CLASSES = {
    EntityClass.PROCEDURAL,
    EntityClass.IDENTIFICATIONAL,
    EntityClass.PARAMETRIC,
    EntityClass.ARTIFACT_TABLE,
    EntityClass.ARTIFACT_IMAGE,
}


def normalize_name(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def normalize_predicate(text: str) -> str:
    return re.sub(r"_+", "_", re.sub(r"[^a-z0-9]+", "_", text.strip().lower())).strip("_")


@dataclass
class EntityNode:
    id: str
    name: str
    entity_class: EntityClass
    attributes: dict[str, str] = field(default_factory=dict)
    source_chunk_ids: list[str] = field(default_factory=list)
    concept_node_id: str = ""
    name_norm: str = ""

    def __post_init__(self) -> None:
        if not self.name_norm:
            self.name_norm = normalize_name(self.name)


@dataclass
class RelationEdge:
    id: str
    src: str
    dst: str
    predicate: str
    tier: Tier
    evidence_chunk_id: str
    confidence: float = 1.0


@dataclass
class BuildReport:
    chunks_processed: int = 0
    lines_skipped: int = 0
    entity_count: int = 0
    relation_count: int = 0
    relations_dropped: int = 0
    completion_failures: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class InstanceGraph:
    entities: dict[str, EntityNode] = field(default_factory=dict)
    relations: list[RelationEdge] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.reindex()

    def reindex(self) -> None:
        self.by_name_norm: dict[str, list[str]] = {}
        self.by_concept: dict[str, list[str]] = {}
        self._adjacency: dict[str, list[int]] = {}
        for eid, e in self.entities.items():
            self.by_name_norm.setdefault(e.name_norm, []).append(eid)
            self.by_concept.setdefault(e.concept_node_id, []).append(eid)
        for i, r in enumerate(self.relations):
            self._adjacency.setdefault(r.src, []).append(i)
            self._adjacency.setdefault(r.dst, []).append(i)

    def neighbors(self, entity_id: str) -> list[tuple[RelationEdge, str]]:
        out = []
        for i in self._adjacency.get(entity_id, []):
            r = self.relations[i]
            out.append((r, r.dst if r.src == entity_id else r.src))
        return out

    def to_dict(self) -> dict:
        return {
            "entities": [
                {
                    "id": e.id,
                    "name": e.name,
                    "entity_class": e.entity_class.value,
                    "attributes": dict(sorted(e.attributes.items())),
                    "source_chunk_ids": list(e.source_chunk_ids),
                    "concept_node_id": e.concept_node_id,
                    "name_norm": e.name_norm,
                }
                for e in sorted(self.entities.values(), key=lambda e: e.id)
            ],
            "relations": [
                {
                    "id": r.id,
                    "src": r.src,
                    "dst": r.dst,
                    "predicate": r.predicate,
                    "tier": r.tier.value,
                    "evidence_chunk_id": r.evidence_chunk_id,
                    "confidence": r.confidence,
                }
                for r in sorted(self.relations, key=lambda r: r.id)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InstanceGraph":
        return cls(
            entities={
                e["id"]: EntityNode(
                    id=e["id"],
                    name=e["name"],
                    entity_class=EntityClass(e["entity_class"]),
                    attributes=dict(e["attributes"]),
                    source_chunk_ids=list(e["source_chunk_ids"]),
                    concept_node_id=e["concept_node_id"],
                    name_norm=e["name_norm"],
                )
                for e in data["entities"]
            },
            relations=[
                RelationEdge(
                    id=r["id"],
                    src=r["src"],
                    dst=r["dst"],
                    predicate=r["predicate"],
                    tier=Tier(r["tier"]),
                    evidence_chunk_id=r["evidence_chunk_id"],
                    confidence=r["confidence"],
                )
                for r in data["relations"]
            ],
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "InstanceGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class InstanceBuildError(Exception):
    def __init__(self, message: str, checkpoint: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint if checkpoint is not None else {}


# ---------------------------------------------------------------------------
# Line protocol
# ---------------------------------------------------------------------------

def parse_protocol(
    text: str, allowed_classes: set[EntityClass]
) -> tuple[list[tuple[EntityClass, str, dict[str, str]]], list[tuple[str, str, str]], int]:
    """Returns (entities, relations, skipped_line_count)."""
    entities: list[tuple[EntityClass, str, dict[str, str]]] = []
    relations: list[tuple[str, str, str]] = []
    skipped = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.rstrip().split("\t")
        if parts[0] == "ENTITY" and len(parts) >= 3:
            try:
                cls = EntityClass(parts[1].strip())
            except ValueError:
                skipped += 1
                continue
            name = parts[2].strip()
            if cls not in allowed_classes or not name:
                skipped += 1
                continue
            attrs: dict[str, str] = {}
            if len(parts) > 3 and parts[3].strip():
                for pair in parts[3].split(";"):
                    k, sep, v = pair.partition("=")
                    if sep and k.strip():
                        attrs[k.strip()] = v.strip()
            if cls is EntityClass.PARAMETRIC and "value" not in attrs:
                skipped += 1
                continue
            entities.append((cls, name, attrs))
        elif parts[0] == "REL" and len(parts) >= 4 and all(p.strip() for p in parts[1:4]):
            relations.append((parts[1].strip(), parts[2].strip(), parts[3].strip()))
        else:
            skipped += 1
    return entities, relations, skipped


def _provisional_id(scope: str, cls: EntityClass, name_norm: str) -> str:
    return f"{scope}#{cls.value}:{name_norm}"


def _relation_id(src: str, predicate: str, dst: str, tier: Tier) -> str:
    digest = hashlib.sha1(f"{src}|{predicate}|{dst}|{tier.value}".encode("utf-8")).hexdigest()
    return f"r:{digest[:12]}"


# ---------------------------------------------------------------------------
# Extractors
# ---------------------------------------------------------------------------

def extract_high_level(
    doc: Document, concept_graph: ConceptGraph, gateway: Gateway
) -> list[RelationEdge]:
    """Macro relations among chapter-level concepts; endpoints are provisional
    ``concept#<concept_node_id>`` ids and evidence is filled in at build time."""
    nodes = [n for n in concept_graph.nodes.values() if n.level == "chapter"]
    if not nodes:
        nodes = [concept_graph.nodes[r] for r in concept_graph.roots if r in concept_graph.nodes]
    nodes = sorted(nodes, key=lambda n: n.id)
    if len(nodes) < 2:
        return []
    lines = "\n".join(f"{n.id}\t{n.title}\t{n.summary}" for n in nodes)
    prompt = render("extract_high", concepts=lines)
    raw = gateway.generate(GenerationRequest(role=Role.EXTRACT_HIGH, prompt=prompt))
    known = {n.id for n in nodes}
    out: list[RelationEdge] = []
    for line in raw.splitlines():
        parts = line.rstrip().split("\t")
        if len(parts) == 4 and parts[0] == "REL" and parts[1] in known and parts[3] in known:
            src = f"concept#{parts[1]}"
            dst = f"concept#{parts[3]}"
            predicate = normalize_predicate(parts[2]) or "references"
            out.append(
                RelationEdge(
                    id=_relation_id(src, predicate, dst, Tier.HIGH),
                    src=src,
                    dst=dst,
                    predicate=predicate,
                    tier=Tier.HIGH,
                    evidence_chunk_id="",
                )
            )
    return out


def extract_mid_level(
    chunk: Chunk, concept_context: str, gateway: Gateway, ontology: dict | None = None
) -> tuple[list[EntityNode], list[RelationEdge]]:
    if not chunk.content.strip():
        return [], []
    raw = _mid_response(chunk, concept_context, gateway, ontology)
    entities, relations, _ = _parse_mid(raw, chunk)
    return entities, relations


def extract_low_level(chunk: Chunk, gateway: Gateway) -> list[EntityNode]:
    if not chunk.content.strip():
        return []
    prompt = render("extract_low", modality=chunk.modality.value, text=chunk.content)
    raw = gateway.generate(GenerationRequest(role=Role.EXTRACT_LOW, prompt=prompt))
    raw_entities, _, _ = parse_protocol(raw, LOW_CLASSES)
    return _materialize(raw_entities, chunk)


def _materialize(
    raw_entities: list[tuple[EntityClass, str, dict[str, str]]], chunk: Chunk
) -> list[EntityNode]:
    """Chunk-scoped entities; duplicates within one chunk collapse to one node."""
    out: dict[str, EntityNode] = {}
    for cls, name, attrs in raw_entities:
        norm = normalize_name(name)
        pid = _provisional_id(chunk.id, cls, norm)
        if pid in out:
            for k, v in attrs.items():
                out[pid].attributes.setdefault(k, v)
        else:
            out[pid] = EntityNode(
                id=pid,
                name=name,
                entity_class=cls,
                attributes=dict(attrs),
                source_chunk_ids=[chunk.id],
                name_norm=norm,
            )
    return list(out.values())


def complete_attributes(
    entity: EntityNode, neighborhood_chunks: list[Chunk], gateway: Gateway
) -> EntityNode:
    """Enriched copy; existing attributes are never changed, only added.
    On gateway failure the copy is flagged via a ``completion=failed`` attribute."""
    enriched = EntityNode(
        id=entity.id,
        name=entity.name,
        entity_class=entity.entity_class,
        attributes=dict(entity.attributes),
        source_chunk_ids=list(entity.source_chunk_ids),
        concept_node_id=entity.concept_node_id,
        name_norm=entity.name_norm,
    )
    if not neighborhood_chunks:
        return enriched
    entity_line = f"{entity.entity_class.value}\t{entity.name}\t" + ";".join(
        f"{k}={v}" for k, v in sorted(entity.attributes.items())
    )
    neighborhood = "\n".join(
        f"{c.id}\t{' '.join(c.content.split())}" for c in neighborhood_chunks
    )
    prompt = render("complete_attributes", entity=entity_line, neighborhood=neighborhood)
    try:
        raw = gateway.generate(GenerationRequest(role=Role.COMPLETE_ATTRIBUTES, prompt=prompt))
    except GatewayError as exc:
        logger.warning("attribute completion failed for %s: %s", entity.id, exc)
        enriched.attributes.setdefault("completion", "failed")
        return enriched
    for line in raw.splitlines():
        parts = line.rstrip().split("\t")
        if len(parts) >= 3 and parts[0] == "ATTR" and parts[1].strip():
            key, value = parts[1].strip(), parts[2].strip()
            if key not in enriched.attributes:
                enriched.attributes[key] = value
                if len(parts) >= 4 and parts[3].strip():
                    enriched.attributes[f"completed_from:{key}"] = parts[3].strip()
    return enriched


# ---------------------------------------------------------------------------
# Merge and build
# ---------------------------------------------------------------------------

def merged_entity_id(concept_node_id: str, cls: EntityClass, name_norm: str) -> str:
    return f"e:{concept_node_id}:{cls.value}:{name_norm.replace(' ', '_')}"


def merge_entities(raw: list[EntityNode]) -> tuple[InstanceGraph, dict[str, str]]:
    """Group by (name_norm, entity_class, concept_node_id); union sources and
    attributes (first value wins, alternatives recorded under ``alt:<key>``).
    Also returns the provisional-id -> merged-id mapping."""
    merged: dict[str, EntityNode] = {}
    id_map: dict[str, str] = {}
    for e in raw:
        mid = merged_entity_id(e.concept_node_id, e.entity_class, e.name_norm)
        id_map[e.id] = mid
        if mid not in merged:
            merged[mid] = EntityNode(
                id=mid,
                name=e.name,
                entity_class=e.entity_class,
                attributes=dict(e.attributes),
                source_chunk_ids=list(e.source_chunk_ids),
                concept_node_id=e.concept_node_id,
                name_norm=e.name_norm,
            )
            continue
        target = merged[mid]
        for cid in e.source_chunk_ids:
            if cid not in target.source_chunk_ids:
                target.source_chunk_ids.append(cid)
        for k, v in e.attributes.items():
            if k not in target.attributes:
                target.attributes[k] = v
            elif target.attributes[k] != v:
                alt_key = f"alt:{k}"
                existing = target.attributes.get(alt_key, "")
                alts = [a for a in existing.split(" | ") if a]
                if v not in alts:
                    alts.append(v)
                target.attributes[alt_key] = " | ".join(alts)
    for e in merged.values():
        e.source_chunk_ids.sort()
    graph = InstanceGraph(entities=merged, relations=[])
    return graph, id_map


def build_instance_graph(
    doc: Document,
    chunks: list[Chunk],
    concept_graph: ConceptGraph,
    gateway: Gateway,
    ontology: dict | None = None,
    checkpoint: dict | None = None,
) -> tuple[InstanceGraph, BuildReport]:
    """Run high -> mid -> low extraction, attribute completion, merge and
    concept linking over this document's chunks."""
    checkpoint = checkpoint if checkpoint is not None else {}
    checkpoint.setdefault("chunks", {})
    report = BuildReport()
    doc_chunks = [c for c in chunks if c.document_id == doc.id]

    chunks_by_section: dict[str, list[Chunk]] = {}
    for c in doc_chunks:
        chunks_by_section.setdefault(c.section_id, []).append(c)

    section_order = [sec.id for sec, _ in doc.walk()]

    def concept_for(chunk: Chunk) -> str:
        node = concept_graph.node_for_section(chunk.section_id)
        return node.id if node else ""

    def first_chunk_of_concept(concept_id: str) -> str | None:
        section_ids = concept_graph.subtree_section_ids(concept_id)
        for sid in section_order:
            if sid in section_ids and chunks_by_section.get(sid):
                return chunks_by_section[sid][0].id
        return None

    def generate_cached(key: str, subkey: str, fn) -> str:
        store = checkpoint["chunks"].setdefault(key, {})
        if subkey in store:
            return store[subkey]
        try:
            value = fn()
        except GatewayError as exc:
            raise InstanceBuildError(f"gateway failure at {key}/{subkey}: {exc}", checkpoint) from exc
        store[subkey] = value
        return value

    raw_entities: list[EntityNode] = []
    relations: list[RelationEdge] = []

    # High level: macro relations among chapter concepts.
    try:
        high_rels = extract_high_level(doc, concept_graph, gateway)
    except GatewayError as exc:
        raise InstanceBuildError(f"gateway failure at high-level extraction: {exc}", checkpoint) from exc
    concept_refs: dict[str, EntityNode] = {}
    for rel in high_rels:
        resolved: list[str] = []
        for endpoint in (rel.src, rel.dst):
            cid = endpoint.removeprefix("concept#")
            if endpoint not in concept_refs:
                evidence = first_chunk_of_concept(cid)
                if evidence is None:
                    break
                node = concept_graph.nodes[cid]
                concept_refs[endpoint] = EntityNode(
                    id=endpoint,
                    name=node.title,
                    entity_class=EntityClass.CONCEPT_REF,
                    source_chunk_ids=[evidence],
                    concept_node_id=cid,
                )
            resolved.append(endpoint)
        if len(resolved) == 2:
            rel.evidence_chunk_id = concept_refs[rel.src].source_chunk_ids[0]
            relations.append(rel)
        else:
            report.relations_dropped += 1
    raw_entities.extend(concept_refs.values())

    # Mid and low level, per chunk.
    for chunk in doc_chunks:
        concept_id = concept_for(chunk)
        if chunk.modality is Modality.TEXT:
            node = concept_graph.nodes.get(concept_id)
            context = f"{chunk.context_header}\n{node.summary if node else ''}".strip()
            raw_mid = generate_cached(
                chunk.id, "mid", lambda c=chunk, ctx=context: _mid_response(c, ctx, gateway, ontology)
            )
            ents, rels, skipped = _parse_mid(raw_mid, chunk)
            report.lines_skipped += skipped
        else:
            ents, rels = [], []
        raw_low = generate_cached(chunk.id, "low", lambda c=chunk: _low_response(c, gateway))
        low_raw, _, low_skipped = parse_protocol(raw_low, LOW_CLASSES)
        report.lines_skipped += low_skipped
        ents = ents + _materialize(low_raw, chunk)
        for e in ents:
            e.concept_node_id = concept_id
        raw_entities.extend(ents)
        relations.extend(rels)
        report.chunks_processed += 1

    # Attribute completion over same-section neighborhoods.
    completed: list[EntityNode] = []
    for e in raw_entities:
        neighborhood = chunks_by_section.get(_section_of(e, doc_chunks), [])
        enriched = complete_attributes(e, neighborhood, gateway)
        if enriched.attributes.get("completion") == "failed":
            report.completion_failures += 1
        completed.append(enriched)

    graph, id_map = merge_entities(completed)

    # Rewrite relation endpoints to merged ids; drop unresolved or self loops.
    final_relations: dict[str, RelationEdge] = {}
    for rel in relations:
        src = id_map.get(rel.src)
        dst = id_map.get(rel.dst)
        if not src or not dst or src == dst:
            report.relations_dropped += 1
            continue
        rid = _relation_id(src, rel.predicate, dst, rel.tier)
        if rid not in final_relations:
            final_relations[rid] = RelationEdge(
                id=rid,
                src=src,
                dst=dst,
                predicate=rel.predicate,
                tier=rel.tier,
                evidence_chunk_id=rel.evidence_chunk_id,
                confidence=rel.confidence,
            )
    graph.relations = sorted(final_relations.values(), key=lambda r: r.id)
    graph.reindex()
    report.entity_count = len(graph.entities)
    report.relation_count = len(graph.relations)
    return graph, report


def _section_of(entity: EntityNode, chunks: list[Chunk]) -> str:
    src = entity.source_chunk_ids[0] if entity.source_chunk_ids else ""
    for c in chunks:
        if c.id == src:
            return c.section_id
    return ""


def _mid_response(chunk: Chunk, context: str, gateway: Gateway, ontology: dict | None) -> str:
    ontology_text = ""
    if ontology:
        ontology_text = "classes: " + ", ".join(ontology.get("classes", []))
        if ontology.get("seed_terms"):
            ontology_text += "\nseed terms: " + ", ".join(ontology["seed_terms"])
    prompt = render("extract_mid", context=context or "(none)", ontology=ontology_text, text=chunk.content)
    return gateway.generate(GenerationRequest(role=Role.EXTRACT_MID, prompt=prompt))


def _low_response(chunk: Chunk, gateway: Gateway) -> str:
    prompt = render("extract_low", modality=chunk.modality.value, text=chunk.content)
    return gateway.generate(GenerationRequest(role=Role.EXTRACT_LOW, prompt=prompt))


def _parse_mid(raw: str, chunk: Chunk) -> tuple[list[EntityNode], list[RelationEdge], int]:
    raw_entities, raw_relations, skipped = parse_protocol(raw, MID_CLASSES)
    entities = _materialize(raw_entities, chunk)
    by_norm = {e.name_norm: e.id for e in entities}
    relations = []
    for src_name, pred, dst_name in raw_relations:
        src = by_norm.get(normalize_name(src_name))
        dst = by_norm.get(normalize_name(dst_name))
        predicate = normalize_predicate(pred)
        if src and dst and src != dst and predicate:
            relations.append(
                RelationEdge(
                    id=_relation_id(src, predicate, dst, Tier.MID),
                    src=src,
                    dst=dst,
                    predicate=predicate,
                    tier=Tier.MID,
                    evidence_chunk_id=chunk.id,
                )
            )
        else:
            skipped += 1
    return entities, relations, skipped


def merge_instance_graphs(graphs: list[InstanceGraph]) -> InstanceGraph:
    merged = InstanceGraph()
    for g in graphs:
        merged.entities.update(g.entities)
        merged.relations.extend(g.relations)
    merged.reindex()
    return merged
