"""Prompt templates, stored as editable text files under ``templates/``.

Placeholders use ``{{name}}`` and are replaced verbatim (no escaping), so
payload text may safely contain braces. Each template addresses the model
with named sections (``TEXT:``, ``QUESTION:``, ...); the offline provider
parses those same markers, so edits to a template's instruction prose are
safe but section markers must be kept.

Placeholder sets per template:

==================== =======================================================
summarize            title, max_tokens, text
keywords             text
extract_high         concepts          (lines: id<TAB>title<TAB>summary)
extract_mid          context, ontology, text
extract_low          modality, text
complete_attributes  entity, neighborhood (lines: chunk_id<TAB>text)
decompose            max_subqueries, question
refine_entity        question, terms   (one term per line)
refine_section       question, terms
answer               graph_context, passages, history, question
judge_split          answer
judge_verdict        context, claims   (one claim per line)
judge_relevance      ground_truth, contexts (one context per line)
==================== =======================================================
"""
from __future__ import annotations

import re
from functools import lru_cache
from pathlib import Path

TEMPLATE_DIR = Path(__file__).parent / "templates"

# Section markers shared between templates and the offline provider.
SECTION_NAMES = (
    "TEXT",
    "CONTEXT",
    "ONTOLOGY",
    "CONCEPTS",
    "MODALITY",
    "ENTITY",
    "NEIGHBORHOOD",
    "QUESTION",
    "TERMS",
    "MODE",
    "ANSWER",
    "CLAIMS",
    "CONTEXTS",
    "GROUND_TRUTH",
)

_MARKER_RE = re.compile(r"^([A-Z_]{2,}):\s*(.*)$")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = TEMPLATE_DIR / f"{name}.txt"
    if not path.exists():
        raise KeyError(f"no template named {name!r}")
    return path.read_text(encoding="utf-8")


def render(name: str, **placeholders: object) -> str:
    text = load_template(name)
    for key, value in placeholders.items():
        text = text.replace("{{" + key + "}}", str(value))
    leftover = re.search(r"\{\{([a-z_]+)\}\}", text)
    if leftover:
        raise KeyError(f"template {name!r} placeholder {leftover.group(1)!r} not filled")
    return text


def parse_sections(prompt: str) -> dict[str, str]:
    """Split a rendered prompt into its named sections."""
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in prompt.splitlines():
        m = _MARKER_RE.match(line)
        if m and m.group(1) in SECTION_NAMES:
            current = m.group(1)
            sections[current] = []
            if m.group(2):
                sections[current].append(m.group(2))
            continue
        if current is not None:
            sections[current].append(line)
    return {k: "\n".join(v).strip() for k, v in sections.items()}
