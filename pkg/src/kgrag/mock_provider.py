"""Deterministic offline provider.

Every operation is a pure function of its inputs plus the configured seed:
embeddings are L2-normalized hashed bags of non-stopword tokens, and
generation dispatches on the request role with small rule-based extractors
(token frequency for keywords, leading sentences for summaries,
subject-verb-object patterns for relations, substring entailment for the
judge). The rules are intentionally narrow; they exist so that pipelines
are assertable without a network, not to be linguistically clever.
"""
from __future__ import annotations

import math
import re
import zlib
from collections import Counter

from .gateway import Gateway, GenerationRequest, Role
from .prompts import parse_sections

STOPWORDS = frozenset(
    """a about after all also an and any are as at be because been before between
    but by can could did do does down each every for from had has have here how i
    if in into is it its just like many may might more most much must my no not
    now of off on once only or other our out over per she shall should so some
    such than that the their them then there these they this to too under up us
    very was we were what when where which while who why will with would you
    your""".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_CITATION_RE = re.compile(r"\[chunk:[^\]]*\]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]


def norm_text(text: str) -> str:
    return " ".join(tokenize(text))


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s.strip()]


# ---------------------------------------------------------------------------
# Rule primitives (exposed for oracle-style tests)
# ---------------------------------------------------------------------------

def embed_values(text: str, dim: int, seed: int) -> list[float]:
    """Hashed bag of non-stopword tokens, L2-normalized."""
    tokens = content_tokens(text) or tokenize(text)
    vec = [0.0] * dim
    if tokens:
        for tok in tokens:
            vec[zlib.crc32(f"{seed}:{tok}".encode("utf-8")) % dim] += 1.0
    else:
        vec[zlib.crc32(f"{seed}:{text}".encode("utf-8")) % dim] = 1.0
    norm = math.sqrt(sum(v * v for v in vec))
    return [v / norm for v in vec]


def top_keywords(text: str, k: int = 5) -> list[str]:
    counts = Counter(t for t in content_tokens(text) if len(t) >= 3)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:k]]


def first_sentences(text: str, n: int = 2) -> str:
    return " ".join(split_sentences(text)[:n])


def split_conjuncts(question: str) -> list[str]:
    parts = [p.strip() for p in question.split(" and ") if p.strip()]
    if len(parts) >= 2 and all(len(tokenize(p)) >= 2 for p in parts):
        return parts
    return [question.strip()]


def svo_triples(text: str) -> list[tuple[str, str, str]]:
    """(subject, verb, object) per sentence for '<NP> <verb-s> <NP>' patterns."""
    triples = []
    for sentence in split_sentences(text):
        toks = tokenize(sentence)
        for i in range(1, len(toks) - 1):
            t = toks[i]
            if t in STOPWORDS or len(t) <= 3 or not t.endswith("s") or t.endswith("ss"):
                continue
            subj = [x for x in toks[:i] if x not in STOPWORDS]
            obj = [x for x in toks[i + 1 :] if x not in STOPWORDS]
            if 1 <= len(subj) <= 3 and 1 <= len(obj) <= 3:
                triples.append((" ".join(subj), t, " ".join(obj)))
            break
    return triples


_PARAM_RE = re.compile(r"([A-Za-z][A-Za-z0-9_.]*)\s*=\s*([A-Za-z0-9][A-Za-z0-9_.%-]*)")
_STEP_RE = re.compile(r"\b(\d+)[.)]\s+([A-Z][^.!?]*)")
_IDENT_RE = re.compile(r"\b([A-Z][A-Z0-9]+-[A-Z0-9-]+)\b")
_UNIT_RE = re.compile(
    r"\bin (milliseconds|seconds|minutes|hours|bytes|kilobytes|megabytes|gigabytes|percent|connections|pages)\b"
)


def param_pairs(text: str) -> list[tuple[str, str]]:
    return _PARAM_RE.findall(text)


def step_items(text: str) -> list[tuple[str, str]]:
    return [(num, frag.strip()) for num, frag in _STEP_RE.findall(text)]


def ident_tokens(text: str) -> list[str]:
    return _IDENT_RE.findall(text)


def unit_phrase(text: str) -> str | None:
    m = _UNIT_RE.search(text)
    return m.group(1) if m else None


def parse_table(text: str) -> tuple[list[str], list[list[str]]]:
    rows = []
    for line in text.strip().splitlines():
        line = line.strip()
        if line.startswith("|"):
            rows.append([c.strip() for c in line.strip("|").split("|")])
    if len(rows) >= 2 and all(re.fullmatch(r":?-+:?", c) for c in rows[1] if c):
        return rows[0], rows[2:]
    return [], rows


def claim_supported(claim: str, context: str) -> bool:
    c = norm_text(_CITATION_RE.sub(" ", claim))
    return bool(c) and f" {c} " in f" {norm_text(context)} "


def context_relevant(context: str, ground_truth: str) -> bool:
    gt = set(content_tokens(ground_truth))
    if not gt:
        return False
    return len(gt & set(content_tokens(context))) / len(gt) >= 0.5


# ---------------------------------------------------------------------------
# Provider
# ---------------------------------------------------------------------------

class MockGateway(Gateway):
    def _embed_raw(self, texts: list[str]) -> list[list[float]]:
        return [embed_values(t, self.config.mock_dim, self.config.mock_seed) for t in texts]

    def rerank(self, query: str, candidates: list[str]) -> list[tuple[int, float]]:
        if not candidates:
            raise ValueError("candidates must be non-empty")
        vectors = self.embed([query] + list(candidates))
        q = vectors[0].values
        scored = [
            (i, sum(a * b for a, b in zip(q, v.values)))
            for i, v in enumerate(vectors[1:])
        ]
        return sorted(scored, key=lambda s: (-s[1], s[0]))

    def generate(self, req: GenerationRequest) -> str:
        sections = parse_sections(req.prompt)
        handler = {
            Role.SUMMARIZE: self._summarize,
            Role.KEYWORDS: self._keywords,
            Role.EXTRACT_HIGH: self._extract_high,
            Role.EXTRACT_MID: self._extract_mid,
            Role.EXTRACT_LOW: self._extract_low,
            Role.COMPLETE_ATTRIBUTES: self._complete_attributes,
            Role.DECOMPOSE: self._decompose,
            Role.REFINE_QUERY: self._refine,
            Role.ANSWER: self._answer,
            Role.JUDGE_CLAIMS: self._judge,
        }[req.role]
        return handler(req.prompt, sections)

    # -- role rules ----------------------------------------------------------

    def _payload(self, prompt: str, sections: dict[str, str], name: str) -> str:
        return sections.get(name) or prompt

    def _summarize(self, prompt, sections) -> str:
        return first_sentences(self._payload(prompt, sections, "TEXT"), 2)

    def _keywords(self, prompt, sections) -> str:
        return "\n".join(top_keywords(self._payload(prompt, sections, "TEXT"), 5))

    def _extract_high(self, prompt, sections) -> str:
        entries = []
        for line in sections.get("CONCEPTS", "").splitlines():
            parts = line.split("\t")
            if len(parts) >= 3:
                entries.append((parts[0], norm_text(parts[1]), norm_text(parts[2])))
        out = []
        for cid_a, _, summary_a in entries:
            for cid_b, title_b, _ in entries:
                if cid_a == cid_b or len(title_b) < 4:
                    continue
                if f" {title_b} " in f" {summary_a} ":
                    out.append(f"REL\t{cid_a}\treferences\t{cid_b}")
        return "\n".join(out)

    def _extract_mid(self, prompt, sections) -> str:
        out = []
        for subj, verb, obj in svo_triples(sections.get("TEXT", "")):
            out.append(f"ENTITY\tcomponent\t{subj}\t")
            out.append(f"ENTITY\toperation\t{verb}\t")
            out.append(f"ENTITY\tcomponent\t{obj}\t")
            out.append(f"REL\t{subj}\t{verb}\t{obj}")
        return "\n".join(out)

    def _extract_low(self, prompt, sections) -> str:
        modality = (sections.get("MODALITY") or "text").split()[0].strip().lower()
        text = sections.get("TEXT", "")
        out = []
        if modality == "table":
            header, rows = parse_table(text)
            label = ", ".join(h for h in header if h) or "untitled"
            out.append(f"ENTITY\tartifact_table\ttable: {label}\t")
            for row in rows:
                if len(row) >= 2 and row[0] and row[1]:
                    out.append(f"ENTITY\tparametric\t{row[0]}\tvalue={row[1]}")
        elif modality == "image":
            caption = " ".join(text.split())
            name = " ".join(caption.split()[:6]) or "figure"
            out.append(f"ENTITY\tartifact_image\t{name}\tdescription={caption}")
        else:
            for name, value in param_pairs(text):
                out.append(f"ENTITY\tparametric\t{name}\tvalue={value}")
            for num, frag in step_items(text):
                name = " ".join(frag.split()[:6])
                out.append(f"ENTITY\tprocedural\t{name}\tstep={num}")
            for code in ident_tokens(text):
                out.append(f"ENTITY\tidentificational\t{code}\tcode={code}")
        return "\n".join(out)

    def _complete_attributes(self, prompt, sections) -> str:
        entity_line = sections.get("ENTITY", "")
        parts = entity_line.split("\t")
        entity_class = parts[0] if parts else ""
        attrs = parts[2] if len(parts) > 2 else ""
        if entity_class != "parametric" or "unit=" in attrs:
            return ""
        for line in sections.get("NEIGHBORHOOD", "").splitlines():
            chunk_id, _, text = line.partition("\t")
            unit = unit_phrase(text)
            if unit:
                return f"ATTR\tunit\t{unit}\t{chunk_id}"
        return ""

    def _decompose(self, prompt, sections) -> str:
        return "\n".join(split_conjuncts(sections.get("QUESTION", "")))

    def _refine(self, prompt, sections) -> str:
        question = sections.get("QUESTION", "").strip()
        terms = " ".join(t.strip() for t in sections.get("TERMS", "").splitlines() if t.strip())
        return f"{question} {terms}".strip()

    def _answer(self, prompt, sections) -> str:
        bracket = _parse_bracket_sections(prompt)
        passages = _parse_passages(bracket.get("RETRIEVED PASSAGES", ""))
        facts = []
        for line in bracket.get("GRAPH CONTEXT", "").splitlines():
            m = re.match(r"- ([^=(]+?) = ([^(]+?)(?:\s*\(|$)", line.strip())
            if m:
                facts.append(f"{m.group(1).strip()} = {m.group(2).strip()}.")
        parts = []
        if passages:
            chunk_id, text = passages[0]
            first = split_sentences(text)[:1]
            if first:
                parts.append(f"{first[0]} [chunk:{chunk_id}]")
        parts.extend(facts[:3])
        if not parts:
            return "No supporting knowledge was retrieved for this question."
        return " ".join(parts)

    def _judge(self, prompt, sections) -> str:
        mode = (sections.get("MODE") or "split").split()[0].strip().lower()
        if mode == "split":
            answer = _CITATION_RE.sub(" ", sections.get("ANSWER", ""))
            claims = [s for s in split_sentences(answer) if len(tokenize(s)) >= 2]
            return "\n".join(claims)
        if mode == "verdict":
            context = sections.get("CONTEXT", "")
            verdicts = []
            for claim in sections.get("CLAIMS", "").splitlines():
                if not claim.strip():
                    continue
                verdicts.append("SUPPORTED" if claim_supported(claim, context) else "UNSUPPORTED")
            return "\n".join(verdicts)
        if mode == "relevance":
            gt = sections.get("GROUND_TRUTH", "")
            verdicts = []
            for ctx in sections.get("CONTEXTS", "").splitlines():
                if not ctx.strip():
                    continue
                verdicts.append("RELEVANT" if context_relevant(ctx, gt) else "IRRELEVANT")
            return "\n".join(verdicts)
        return ""


def _parse_bracket_sections(prompt: str) -> dict[str, str]:
    sections: dict[str, list[str]] = {}
    current = None
    for line in prompt.splitlines():
        m = re.match(r"^\[([A-Z ]+)\]\s*$", line.strip())
        if m:
            current = m.group(1)
            sections[current] = []
            continue
        if current is not None:
            sections[current].append(line)
    return {k: "\n".join(v).strip() for k, v in sections.items()}


def _parse_passages(text: str) -> list[tuple[str, str]]:
    passages: list[tuple[str, str]] = []
    current_id = None
    buf: list[str] = []
    for line in text.splitlines():
        m = re.match(r"^\[chunk:([^\]]+)\]\s*$", line.strip())
        if m:
            if current_id is not None:
                passages.append((current_id, "\n".join(buf).strip()))
            current_id = m.group(1)
            buf = []
            continue
        buf.append(line)
    if current_id is not None:
        passages.append((current_id, "\n".join(buf).strip()))
    return passages
