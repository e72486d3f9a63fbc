"""Document model: section trees, multimodal blocks, parsing and validation.

Two input formats are accepted:

* ``json_document`` -- ``{id, title, sections: [{id, level, title, blocks,
  children}]}`` with block ``kind`` one of paragraph/table/image.
* ``markdown_with_headings`` -- ``#``=part, ``##``=chapter, ``###``=section,
  ``####``=subsection; ``|``-tables with a header and separator row; images
  as ``![description](path)``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator


class Level(str, Enum):
    PART = "part"
    CHAPTER = "chapter"
    SECTION = "section"
    SUBSECTION = "subsection"


LEVEL_ORDER: tuple[Level, ...] = (Level.PART, Level.CHAPTER, Level.SECTION, Level.SUBSECTION)


def level_depth(level: Level) -> int:
    return LEVEL_ORDER.index(level)


class BlockKind(str, Enum):
    PARAGRAPH = "paragraph"
    TABLE = "table"
    IMAGE = "image"


class ParseError(Exception):
    """Malformed input. Carries a line number (markdown) or a JSON path."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif path:
            loc = f" (at {path})"
        super().__init__(message + loc)
        self.line = line
        self.path = path


class StructureError(ParseError):
    """Heading hierarchy violation, e.g. a level skip."""


@dataclass
class Block:
    kind: BlockKind
    text: str
    raw_ref: str | None = None


@dataclass
class Section:
    id: str
    level: Level
    title: str
    order_index: int
    blocks: list[Block] = field(default_factory=list)
    children: list[Section] = field(default_factory=list)


@dataclass
class Document:
    id: str
    title: str
    sections: list[Section] = field(default_factory=list)
    source_meta: dict[str, str] = field(default_factory=dict)

    def walk(self) -> Iterator[tuple[Section, list[Section]]]:
        """Yield (section, ancestors) in pre-order; ancestors are root-first."""
        stack: list[tuple[Section, list[Section]]] = [(s, []) for s in reversed(self.sections)]
        while stack:
            sec, ancestors = stack.pop()
            yield sec, ancestors
            for child in reversed(sec.children):
                stack.append((child, ancestors + [sec]))

    def section_map(self) -> dict[str, Section]:
        return {sec.id: sec for sec, _ in self.walk()}


@dataclass
class ValidationIssue:
    kind: str
    message: str
    section_id: str | None = None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_HEADING_RE = re.compile(r"^(#{1,4})\s+(.+?)\s*$")
_IMAGE_RE = re.compile(r"^!\[(.*?)\]\((.*?)\)\s*$")
_TABLE_SEP_CELL_RE = re.compile(r"^\s*:?-+:?\s*$")

_FORMATS = ("json_document", "markdown_with_headings")


def parse_document(raw: str, format: str, doc_id: str | None = None) -> Document:
    """Parse raw text in the declared format into a Document.

    ``doc_id`` overrides the derived/declared document id (markdown has no
    id of its own; a stable content hash is used unless one is supplied).
    """
    if format not in _FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {_FORMATS}")
    if not raw or not raw.strip():
        raise ParseError("input is empty", line=1)
    if format == "json_document":
        return _parse_json_document(raw, doc_id)
    return _parse_markdown(raw, doc_id)


def _normalize_ws(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def _parse_markdown(raw: str, doc_id: str | None) -> Document:
    lines = raw.splitlines()
    # Path of open sections, one per heading depth currently in scope.
    stack: list[Section] = []
    roots: list[Section] = []
    para_buf: list[str] = []
    para_line = 0

    derived_id = doc_id or "doc-" + hashlib.sha1(raw.encode("utf-8")).hexdigest()[:10]

    def flush_paragraph() -> None:
        nonlocal para_buf
        if not para_buf:
            return
        text = _normalize_ws(" ".join(para_buf))
        para_buf = []
        if not text:
            return
        if not stack:
            raise StructureError("content before the first heading", line=para_line)
        stack[-1].blocks.append(Block(kind=BlockKind.PARAGRAPH, text=text))

    def open_section(depth: int, title: str, line_no: int) -> None:
        if depth > len(stack) + 1:
            raise StructureError(
                f"heading level skip at {title!r}: depth {depth} under depth {len(stack)}",
                line=line_no,
            )
        del stack[depth - 1 :]
        parent = stack[-1] if stack else None
        siblings = parent.children if parent else roots
        path = [a.order_index for a in stack] + [len(siblings)]
        sec = Section(
            id=f"{derived_id}:s" + ".".join(str(p) for p in path),
            level=LEVEL_ORDER[depth - 1],
            title=title,
            order_index=len(siblings),
        )
        siblings.append(sec)
        stack.append(sec)

    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        stripped = line.strip()
        heading = _HEADING_RE.match(line)
        if heading:
            flush_paragraph()
            open_section(len(heading.group(1)), heading.group(2), i + 1)
            i += 1
            continue
        if stripped.startswith("|"):
            flush_paragraph()
            if not stack:
                raise StructureError("content before the first heading", line=i + 1)
            table_lines = []
            while i < n and lines[i].strip().startswith("|"):
                table_lines.append(lines[i].strip())
                i += 1
            text = "\n".join(table_lines)
            if not _is_valid_markdown_table(text):
                raise ParseError("malformed markdown table", line=i)
            stack[-1].blocks.append(Block(kind=BlockKind.TABLE, text=text))
            continue
        img = _IMAGE_RE.match(stripped)
        if img:
            flush_paragraph()
            if not stack:
                raise StructureError("content before the first heading", line=i + 1)
            stack[-1].blocks.append(
                Block(kind=BlockKind.IMAGE, text=img.group(1).strip(), raw_ref=img.group(2) or None)
            )
            i += 1
            continue
        if not stripped:
            flush_paragraph()
            i += 1
            continue
        if not para_buf:
            para_line = i + 1
        para_buf.append(stripped)
        i += 1
    flush_paragraph()

    if not roots:
        raise ParseError("no headings found", line=1)
    title = roots[0].title
    return Document(id=derived_id, title=title, sections=roots, source_meta={"format": "markdown"})


def _parse_json_document(raw: str, doc_id: str | None) -> Document:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise ParseError("top-level value must be an object", path="$")
    for key in ("id", "title", "sections"):
        if key not in data:
            raise ParseError(f"missing required key {key!r}", path="$")
    if not isinstance(data["sections"], list) or not data["sections"]:
        raise ParseError("sections must be a non-empty array", path="$.sections")

    def parse_section(obj: dict, path: str, order: int, parent_level: Level | None) -> Section:
        if not isinstance(obj, dict):
            raise ParseError("section must be an object", path=path)
        for key in ("id", "level", "title"):
            if key not in obj:
                raise ParseError(f"missing required key {key!r}", path=path)
        try:
            level = Level(obj["level"])
        except ValueError:
            raise ParseError(f"unknown level {obj['level']!r}", path=f"{path}.level") from None
        if parent_level is not None:
            expected = level_depth(parent_level) + 1
            if level_depth(level) != expected:
                raise StructureError(
                    f"heading level skip at {obj['title']!r}: "
                    f"{level.value} directly under {parent_level.value}",
                    path=f"{path}.level",
                )
        blocks = []
        for j, b in enumerate(obj.get("blocks", [])):
            bpath = f"{path}.blocks[{j}]"
            if not isinstance(b, dict) or "kind" not in b or "text" not in b:
                raise ParseError("block needs kind and text", path=bpath)
            try:
                kind = BlockKind(b["kind"])
            except ValueError:
                raise ParseError(f"unknown block kind {b['kind']!r}", path=bpath) from None
            blocks.append(Block(kind=kind, text=str(b["text"]), raw_ref=b.get("raw_ref")))
        sec = Section(
            id=str(obj["id"]),
            level=level,
            title=str(obj["title"]),
            order_index=order,
            blocks=blocks,
        )
        for j, c in enumerate(obj.get("children", [])):
            sec.children.append(parse_section(c, f"{path}.children[{j}]", j, level))
        return sec

    sections = [
        parse_section(s, f"$.sections[{i}]", i, None) for i, s in enumerate(data["sections"])
    ]
    meta = {str(k): str(v) for k, v in data.get("source_meta", {}).items()}
    return Document(
        id=doc_id or str(data["id"]),
        title=str(data["title"]),
        sections=sections,
        source_meta=meta,
    )


def document_to_json(doc: Document) -> dict:
    """Serialize back to the json_document schema (round-trip safe)."""

    def section_to_json(sec: Section) -> dict:
        return {
            "id": sec.id,
            "level": sec.level.value,
            "title": sec.title,
            "blocks": [
                {"kind": b.kind.value, "text": b.text, **({"raw_ref": b.raw_ref} if b.raw_ref else {})}
                for b in sec.blocks
            ],
            "children": [section_to_json(c) for c in sec.children],
        }

    return {
        "id": doc.id,
        "title": doc.title,
        "sections": [section_to_json(s) for s in doc.sections],
        "source_meta": dict(doc.source_meta),
    }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _is_valid_markdown_table(text: str) -> bool:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 2:
        return False
    header = _split_table_row(lines[0])
    sep = _split_table_row(lines[1])
    if not header or len(sep) != len(header):
        return False
    return all(_TABLE_SEP_CELL_RE.match(cell) for cell in sep)


def _split_table_row(line: str) -> list[str]:
    line = line.strip()
    if not line.startswith("|"):
        return []
    return [c.strip() for c in line.strip("|").split("|")]


def validate_document(doc: Document) -> list[ValidationIssue]:
    """Collect all invariant violations without mutating the document."""
    issues: list[ValidationIssue] = []
    if not doc.sections:
        issues.append(ValidationIssue("empty_document", "document has no sections"))

    seen_ids: set[str] = set()
    for sec, ancestors in doc.walk():
        if sec.id in seen_ids:
            issues.append(
                ValidationIssue("duplicate_section_id", f"section id {sec.id!r} appears twice", sec.id)
            )
        seen_ids.add(sec.id)
        if ancestors and level_depth(sec.level) <= level_depth(ancestors[-1].level):
            issues.append(
                ValidationIssue(
                    "level_not_increasing",
                    f"{sec.level.value} section {sec.title!r} under {ancestors[-1].level.value}",
                    sec.id,
                )
            )
        for block in sec.blocks:
            if block.kind is BlockKind.IMAGE and not block.text.strip():
                issues.append(
                    ValidationIssue("empty_image_caption", f"image without description in {sec.id}", sec.id)
                )
            if block.kind is BlockKind.TABLE and not _is_valid_markdown_table(block.text):
                issues.append(
                    ValidationIssue("malformed_table", f"table without header/separator in {sec.id}", sec.id)
                )

    def check_order(siblings: list[Section]) -> None:
        indices = sorted(s.order_index for s in siblings)
        if indices != list(range(len(siblings))):
            issues.append(
                ValidationIssue(
                    "order_index_gap",
                    f"sibling order_index values {indices} are not 0..{len(siblings) - 1}",
                    siblings[0].id if siblings else None,
                )
            )
        for s in siblings:
            check_order(s.children)

    if doc.sections:
        check_order(doc.sections)
    return issues
