"""Tests for kgrag.evalkit: the three metrics and the batch runner."""

from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FaultInjectingGateway
from kgrag.evalkit import (
    EvalSample,
    answer_relevancy,
    context_precision,
    faithfulness,
    rank_weighted_precision,
    run_eval,
)
from kgrag.gateway import ProviderConfig, Role


def sample(question="What is the flush interval?", ground_truth="The flush interval is 200 milliseconds.", refs=None):
    return EvalSample(id="s1", question=question, ground_truth=ground_truth, reference_section_ids=refs)


class TestFaithfulness:
    def test_two_claims_both_supported(self, gateway):
        answer = "The pool caches pages. The interval is 200 milliseconds."
        contexts = [
            "In this engine the pool caches pages for reads.",
            "By default the interval is 200 milliseconds exactly.",
        ]
        score, diag = faithfulness(answer, contexts, gateway)
        assert score == 1.0
        assert diag["supported"] == 2

    def test_one_of_two_supported(self, gateway):
        answer = "The pool caches pages. The moon is cheese."
        contexts = ["the pool caches pages"]
        score, _ = faithfulness(answer, contexts, gateway)
        assert score == 0.5

    def test_three_of_four_hand_labeled(self, gateway):
        answer = "Alpha holds beta. Gamma holds delta. Epsilon holds zeta. Unsupported claim here."
        contexts = ["alpha holds beta. gamma holds delta.", "epsilon holds zeta."]
        score, diag = faithfulness(answer, contexts, gateway)
        assert score == pytest.approx(0.75)
        assert diag["verdicts"].count("SUPPORTED") == 3

    def test_no_claims_scores_zero_with_flag(self, gateway):
        score, diag = faithfulness("!!!", ["anything"], gateway)
        assert score == 0.0
        assert diag["flag"] == "no_claims"

    def test_empty_answer_rejected(self, gateway):
        with pytest.raises(ValueError):
            faithfulness("  ", ["ctx"], gateway)

    def test_monotone_in_support_set(self, gateway):
        answer = "Alpha holds beta. Gamma holds delta."
        weak = ["alpha holds beta"]
        strong = weak + ["gamma holds delta"]
        s_weak, _ = faithfulness(answer, weak, gateway)
        s_strong, _ = faithfulness(answer, strong, gateway)
        assert s_strong >= s_weak

    def test_judge_failure_propagates(self):
        gw = FaultInjectingGateway(ProviderConfig(), fail_roles={Role.JUDGE_CLAIMS})
        from kgrag.gateway import GatewayError

        with pytest.raises(GatewayError):
            faithfulness("A claim here.", ["ctx"], gw)


class TestAnswerRelevancy:
    def test_self_pair_is_one(self, gateway):
        score, _ = answer_relevancy("buffer pool size", "buffer pool size", gateway)
        assert score == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_tokens_zero(self, gateway):
        score, _ = answer_relevancy("alpha beta", "gamma delta", gateway)
        assert score == pytest.approx(0.0, abs=1e-6)

    def test_matches_standalone_cosine(self, gateway):
        from kgrag.gateway import cosine

        q, a = "replication lag threshold", "the lag threshold is five hundred"
        expected = max(0.0, min(1.0, cosine(*gateway.embed([q, a]))))
        score, _ = answer_relevancy(q, a, gateway)
        assert score == pytest.approx(expected, abs=1e-9)

    def test_clamped_to_unit_interval(self, gateway):
        score, _ = answer_relevancy("a b c", "a weird z", gateway)
        assert 0.0 <= score <= 1.0


class TestContextPrecision:
    def test_pattern_110(self):
        assert rank_weighted_precision([True, True, False]) == pytest.approx(1.0)

    def test_pattern_000(self):
        assert rank_weighted_precision([False, False, False]) == 0.0

    def test_pattern_101(self):
        assert rank_weighted_precision([True, False, True]) == pytest.approx(0.8333, abs=1e-4)

    def test_reference_section_labels(self, gateway):
        s = sample(refs=["sec-a"])
        score, diag = context_precision(
            ["ctx one", "ctx two", "ctx three"],
            s,
            gateway,
            context_section_ids=["sec-a", "sec-b", "sec-a"],
        )
        assert diag["relevance"] == [1, 0, 1]
        assert score == pytest.approx(0.8333, abs=1e-4)

    def test_judge_fallback_without_labels(self, gateway):
        s = sample(ground_truth="the flush interval is 200 milliseconds")
        contexts = [
            "the flush interval is 200 milliseconds by default",
            "completely unrelated text about cooking pasta",
        ]
        score, diag = context_precision(contexts, s, gateway)
        assert diag["relevance"] == [1, 0]
        assert score == pytest.approx(1.0)

    def test_no_relevant_flagged(self, gateway):
        s = sample(refs=["sec-x"])
        score, diag = context_precision(["a"], s, gateway, context_section_ids=["sec-y"])
        assert score == 0.0
        assert diag["flag"] == "no_relevant_contexts"

    def test_empty_contexts_rejected(self, gateway):
        with pytest.raises(ValueError):
            context_precision([], sample(), gateway)

    @given(st.lists(st.booleans(), min_size=1, max_size=12))
    @settings(max_examples=200, deadline=None)
    def test_promoting_a_relevant_entry_never_decreases(self, flags):
        # Move one relevant entry one slot earlier; score must not drop.
        base = rank_weighted_precision(flags)
        for i in range(1, len(flags)):
            if flags[i] and not flags[i - 1]:
                swapped = list(flags)
                swapped[i - 1], swapped[i] = swapped[i], swapped[i - 1]
                assert rank_weighted_precision(swapped) >= base - 1e-12

    def test_against_direct_formula_on_random_vectors(self):
        rng = random.Random(123)
        for _ in range(300):
            flags = [rng.random() < 0.5 for _ in range(rng.randint(1, 10))]
            relevant = sum(flags)
            if relevant == 0:
                expected = 0.0
            else:
                expected = sum(
                    sum(flags[: k + 1]) / (k + 1) for k, f in enumerate(flags) if f
                ) / relevant
            assert rank_weighted_precision(flags) == pytest.approx(expected)


class TestRunEval:
    class StubEngine:
        """Echo engine: answer quotes the single context verbatim."""

        def __init__(self, contexts_by_q, sections_by_chunk):
            self.contexts_by_q = contexts_by_q
            self.sections_by_chunk = sections_by_chunk

        def ask(self, question, session_id=None):
            from kgrag.qa import Answer
            from kgrag.retrieval import GraphContext, UnifiedSearchContext

            hits = self.contexts_by_q[question]
            usc = UnifiedSearchContext(
                query=question,
                graph_context=GraphContext(),
                vector_hits=hits,
                refined_queries=[question],
            )
            text = hits[0][2].split("\n")[0] if hits else "No supporting knowledge."
            return Answer(text=text), usc

        def chunk_section(self, chunk_id):
            return self.sections_by_chunk.get(chunk_id)

    def make_engine(self):
        contexts = {
            "What is the flush interval?": [("c1", 0.9, "The flush interval is 200 milliseconds.")],
            "What marks a standby degraded?": [
                ("c2", 0.9, "Totally unrelated cooking text."),
                ("c3", 0.8, "The max lag threshold marks a standby degraded."),
            ],
        }
        sections = {"c1": "sec-a", "c2": "sec-b", "c3": "sec-c"}
        return self.StubEngine(contexts, sections)

    def make_dataset(self):
        return [
            EvalSample(id="q2", question="What marks a standby degraded?",
                       ground_truth="The max lag threshold marks a standby degraded.",
                       reference_section_ids=["sec-c"]),
            EvalSample(id="q1", question="What is the flush interval?",
                       ground_truth="The flush interval is 200 milliseconds.",
                       reference_section_ids=["sec-a"]),
        ]

    def test_rows_sorted_and_means_hand_averaged(self, gateway):
        report = run_eval(self.make_dataset(), self.make_engine(), gateway)
        assert [r["sample_id"] for r in report.rows] == ["q1", "q2"]
        by_id = {r["sample_id"]: r for r in report.rows}
        assert by_id["q1"]["context_precision"] == pytest.approx(1.0)
        assert by_id["q2"]["context_precision"] == pytest.approx(0.5)
        assert report.means["context_precision"] == pytest.approx(0.75)

    def test_empty_dataset(self, gateway):
        report = run_eval([], self.make_engine(), gateway)
        assert report.rows == []
        assert report.means["faithfulness"] is None

    def test_rerun_identical_report(self, gateway):
        import json

        a = run_eval(self.make_dataset(), self.make_engine(), gateway)
        b = run_eval(self.make_dataset(), self.make_engine(), gateway)
        assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)

    def test_judge_failure_isolated_with_count(self):
        gw = FaultInjectingGateway(ProviderConfig(), fail_roles={Role.JUDGE_CLAIMS})
        dataset = self.make_dataset()
        report = run_eval(dataset, self.make_engine(), gw)
        assert len(report.rows) == 2
        assert report.unscored["faithfulness"] == 2
        # relevancy is embedding-based and still scored; precision used labels.
        assert report.unscored["answer_relevancy"] == 0
        assert all(r["faithfulness"] is None for r in report.rows)

    def test_markdown_layout(self, gateway):
        report = run_eval(self.make_dataset(), self.make_engine(), gateway)
        md = report.to_markdown()
        header = md.splitlines()[0]
        assert header == "| Sample | Faithfulness | Answer Relevancy | Context Precision |"
        assert "**Mean**" in md.splitlines()[-1]

    def test_scores_within_unit_interval(self, gateway):
        report = run_eval(self.make_dataset(), self.make_engine(), gateway)
        for row in report.rows:
            for metric in ("faithfulness", "answer_relevancy", "context_precision"):
                if row[metric] is not None:
                    assert 0.0 <= row[metric] <= 1.0


class TestSampleValidation:
    def test_empty_question_rejected(self):
        with pytest.raises(ValueError):
            EvalSample(id="x", question=" ", ground_truth="y")

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            EvalSample(id="x", question="q", ground_truth="  ")
