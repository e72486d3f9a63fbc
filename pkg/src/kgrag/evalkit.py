"""QA evaluation: faithfulness, answer relevancy, context precision.

* faithfulness -- the answer is split into atomic claims and each claim is
  judged context-supported or not; the score is supported/total.
* answer relevancy -- cosine similarity of the question and answer
  embeddings, clamped to [0, 1] for reporting.
* context precision -- rank-weighted relevance of the retrieved contexts:
  ``sum_k(precision@k * v_k) / (number of relevant contexts)`` with
  ``v_k in {0, 1}``, so relevant entries ranked earlier score higher.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .gateway import Gateway, GatewayError, GenerationRequest, Role, cosine
from .prompts import render

logger = logging.getLogger(__name__)


@dataclass
class EvalSample:
    id: str
    question: str
    ground_truth: str
    reference_section_ids: list[str] | None = None

    def __post_init__(self) -> None:
        if not self.question.strip() or not self.ground_truth.strip():
            raise ValueError(f"sample {self.id!r} needs a non-empty question and ground_truth")


@dataclass
class EvalScores:
    faithfulness: float | None = None
    answer_relevancy: float | None = None
    context_precision: float | None = None
    diagnostics: dict = field(default_factory=dict)


METRICS = ("faithfulness", "answer_relevancy", "context_precision")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def faithfulness(answer: str, contexts: list[str], gateway: Gateway) -> tuple[float, dict]:
    """Supported claims / total claims. Zero extractable claims scores 0."""
    if not answer.strip():
        raise ValueError("answer is empty")
    split_prompt = render("judge_split", answer=answer)
    raw_claims = gateway.generate(GenerationRequest(role=Role.JUDGE_CLAIMS, prompt=split_prompt))
    claims = [c.strip() for c in raw_claims.splitlines() if c.strip()]
    if not claims:
        return 0.0, {"claims": [], "verdicts": [], "flag": "no_claims"}
    context_text = "\n".join(" ".join(c.split()) for c in contexts)
    verdict_prompt = render("judge_verdict", context=context_text, claims="\n".join(claims))
    raw_verdicts = gateway.generate(GenerationRequest(role=Role.JUDGE_CLAIMS, prompt=verdict_prompt))
    verdicts = [v.strip().upper() for v in raw_verdicts.splitlines() if v.strip()]
    supported = sum(1 for v in verdicts[: len(claims)] if v.startswith("SUPPORTED"))
    return supported / len(claims), {
        "claims": claims,
        "verdicts": verdicts[: len(claims)],
        "supported": supported,
    }


def answer_relevancy(question: str, answer: str, gateway: Gateway) -> tuple[float, dict]:
    if not question.strip() or not answer.strip():
        raise ValueError("question and answer must be non-empty")
    q_vec, a_vec = gateway.embed([question, answer])
    raw = cosine(q_vec, a_vec)
    return min(1.0, max(0.0, raw)), {"raw_cosine": raw}


def rank_weighted_precision(flags: Sequence[bool]) -> float:
    """sum_k(precision@k * v_k) / (number of relevant entries)."""
    relevant = sum(1 for f in flags if f)
    if relevant == 0:
        return 0.0
    total = 0.0
    seen = 0
    for k, flag in enumerate(flags, start=1):
        if flag:
            seen += 1
            total += seen / k
    return total / relevant


def context_precision(
    ranked_contexts: list[str],
    sample: EvalSample,
    gateway: Gateway,
    context_section_ids: list[str] | None = None,
) -> tuple[float, dict]:
    """Relevance comes from reference_section_ids when both sides are known,
    otherwise from the judge."""
    if not ranked_contexts:
        raise ValueError("ranked_contexts must be non-empty")
    if sample.reference_section_ids is not None and context_section_ids is not None:
        reference = set(sample.reference_section_ids)
        flags = [sid in reference for sid in context_section_ids]
    else:
        lines = "\n".join(" ".join(c.split()) for c in ranked_contexts)
        prompt = render("judge_relevance", ground_truth=sample.ground_truth, contexts=lines)
        raw = gateway.generate(GenerationRequest(role=Role.JUDGE_CLAIMS, prompt=prompt))
        verdicts = [v.strip().upper() for v in raw.splitlines() if v.strip()]
        flags = [v.startswith("RELEVANT") for v in verdicts[: len(ranked_contexts)]]
        flags += [False] * (len(ranked_contexts) - len(flags))
    score = rank_weighted_precision(flags)
    diag = {"relevance": [1 if f else 0 for f in flags]}
    if not any(flags):
        diag["flag"] = "no_relevant_contexts"
    return score, diag


# ---------------------------------------------------------------------------
# Batch runner
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    unscored: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "means": self.means,
            "unscored": self.unscored,
            "samples": len(self.rows),
        }

    def to_markdown(self) -> str:
        def fmt(value) -> str:
            return f"{value:.4f}" if value is not None else "-"

        lines = [
            "| Sample | Faithfulness | Answer Relevancy | Context Precision |",
            "|---|---|---|---|",
        ]
        for row in self.rows:
            lines.append(
                f"| {row['sample_id']} | {fmt(row['faithfulness'])} "
                f"| {fmt(row['answer_relevancy'])} | {fmt(row['context_precision'])} |"
            )
        lines.append(
            f"| **Mean** | {fmt(self.means.get('faithfulness'))} "
            f"| {fmt(self.means.get('answer_relevancy'))} "
            f"| {fmt(self.means.get('context_precision'))} |"
        )
        return "\n".join(lines)


def load_dataset(path: str | Path) -> list[EvalSample]:
    samples = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        data = json.loads(line)
        samples.append(
            EvalSample(
                id=str(data.get("id", f"sample-{i}")),
                question=data["question"],
                ground_truth=data["ground_truth"],
                reference_section_ids=data.get("reference_section_ids"),
            )
        )
    return samples


def run_eval(dataset: list[EvalSample], engine, gateway: Gateway) -> EvalReport:
    """Answer every sample in a fresh session and score all three metrics.

    Per-sample failures are isolated: a judge/embedding failure marks that
    metric unscored for the sample and the run completes.
    """
    report = EvalReport(unscored={m: 0 for m in METRICS})
    for sample in sorted(dataset, key=lambda s: s.id):
        ans, usc = engine.ask(sample.question, session_id=None)
        contexts = [excerpt for _, _, excerpt in usc.vector_hits]
        section_ids = [engine.chunk_section(cid) or "" for cid, _, _ in usc.vector_hits]
        scores = EvalScores()
        diagnostics: dict = {"answer_flags": list(ans.degradation_flags)}
        try:
            scores.faithfulness, diag = faithfulness(ans.text, contexts, gateway)
            diagnostics["claims_total"] = len(diag["claims"])
            diagnostics["claims_supported"] = diag.get("supported", 0)
            if "flag" in diag:
                diagnostics["faithfulness_flag"] = diag["flag"]
        except (GatewayError, ValueError) as exc:
            logger.warning("faithfulness unscored for %s: %s", sample.id, exc)
            report.unscored["faithfulness"] += 1
        try:
            scores.answer_relevancy, _ = answer_relevancy(sample.question, ans.text, gateway)
        except (GatewayError, ValueError) as exc:
            logger.warning("answer_relevancy unscored for %s: %s", sample.id, exc)
            report.unscored["answer_relevancy"] += 1
        try:
            scores.context_precision, diag = context_precision(
                contexts, sample, gateway, context_section_ids=section_ids
            )
            diagnostics["relevance"] = diag["relevance"]
            if "flag" in diag:
                diagnostics["context_precision_flag"] = diag["flag"]
        except (GatewayError, ValueError) as exc:
            logger.warning("context_precision unscored for %s: %s", sample.id, exc)
            report.unscored["context_precision"] += 1
        report.rows.append(
            {
                "sample_id": sample.id,
                "faithfulness": _round(scores.faithfulness),
                "answer_relevancy": _round(scores.answer_relevancy),
                "context_precision": _round(scores.context_precision),
                "diagnostics": diagnostics,
            }
        )
    for metric in METRICS:
        values = [row[metric] for row in report.rows if row[metric] is not None]
        report.means[metric] = _round(sum(values) / len(values)) if values else None
    return report


def _round(value: float | None) -> float | None:
    return round(value, 6) if value is not None else None
