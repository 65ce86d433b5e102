from __future__ import annotations

import pytest

from pointcot.corpus import Corpus
from pointcot.mockmodels import (
    OfflineMock,
    evaluator_response,
    refinement_response,
)
from pointcot.refine import (
    QualityVerdict,
    RefPair,
    Stage1Options,
    Unevaluable,
    VerdictError,
    build_reference_db,
    evaluate_sample,
    normalize_for_match,
    refine_invalid,
    run_stage1,
)
from pointcot.structured import extract_section

from conftest import make_corpus, make_sample, tiny_views

VIEWS = tiny_views()


def scripted_evaluator(verdicts, refinements=None):
    """Handler mapping instruction text to a verdict (and refinement)."""
    refinements = refinements or {}

    def handler(request):
        failed = extract_section(request.prompt_text, "Failed instruction")
        if failed is not None:
            outcome = refinements.get(failed)
            if outcome is None:
                return refinement_response(
                    "pair_regenerated",
                    f"New question about {failed[:20]}?",
                    f"New answer about {failed[:20]}.",
                )
            return outcome
        instruction = extract_section(request.prompt_text, "Instruction")
        label = verdicts[instruction]
        if label == "IMPROVE":
            answer = extract_section(request.prompt_text, "Answer")
            return evaluator_response("IMPROVE", refined_answer=f"{answer} Now with detail.")
        return evaluator_response(label)

    return handler


class TestQualityVerdict:
    def test_refined_answer_iff_improve(self):
        with pytest.raises(VerdictError):
            QualityVerdict("KEEP", "r", "a", "c", refined_answer="x")
        with pytest.raises(VerdictError):
            QualityVerdict("IMPROVE", "r", "a", "c")

    def test_reasons_must_be_nonempty(self):
        with pytest.raises(VerdictError):
            QualityVerdict("KEEP", "r", "", "c")


class TestEvaluateSample:
    def test_keep_pass_through(self, gateway, mock_provider):
        sample = make_sample("c1", "How many legs does this chair have?", "Four legs.")
        mock_provider.handler = scripted_evaluator({sample.instruction: "KEEP"})
        verdict = evaluate_sample(gateway, VIEWS, sample)
        assert verdict.label == "KEEP"
        assert verdict.refined_answer is None

    def test_improve_carries_refined_answer(self, gateway, mock_provider):
        sample = make_sample("c1", "What color is it?", "It is green.")
        mock_provider.handler = scripted_evaluator({sample.instruction: "IMPROVE"})
        verdict = evaluate_sample(gateway, VIEWS, sample)
        assert verdict.label == "IMPROVE"
        assert verdict.refined_answer == "It is green. Now with detail."

    def test_invalid_label(self, gateway, mock_provider):
        sample = make_sample("c1", "What is the capital of France?", "Paris.")
        mock_provider.handler = scripted_evaluator({sample.instruction: "INVALID"})
        verdict = evaluate_sample(gateway, VIEWS, sample)
        assert verdict.label == "INVALID"

    def test_reask_recovers_once(self, gateway, mock_provider):
        sample = make_sample("c1", "What is this?", "A lamp.")

        def handler(request):
            if "could not be parsed" in request.prompt_text:
                return evaluator_response("KEEP")
            return "sorry, no block today"

        mock_provider.handler = handler
        verdict = evaluate_sample(gateway, VIEWS, sample)
        assert verdict.label == "KEEP"
        assert mock_provider.calls == 2

    def test_unevaluable_after_two_failures(self, gateway, mock_provider):
        sample = make_sample("c1", "What is this?", "A lamp.")
        mock_provider.handler = lambda r: "still prose"
        with pytest.raises(Unevaluable):
            evaluate_sample(gateway, VIEWS, sample)
        assert mock_provider.calls == 2


class TestReferenceDb:
    def _verdicts(self, corpus, labels):
        verdicts = {}
        for sample, label in zip(corpus.samples, labels):
            refined = f"{sample.answer} Improved." if label == "IMPROVE" else None
            verdicts[sample.sample_id] = QualityVerdict(
                label, "r", "a", "c", refined_answer=refined)
        return verdicts

    def test_counts_keep_and_improve(self):
        corpus = Corpus(name="x", kind="instruction")
        for i in range(4):
            corpus.add(make_sample("cloudA", f"Q{i}?", f"A{i}."))
        verdicts = self._verdicts(corpus, ["KEEP", "KEEP", "IMPROVE", "INVALID"])
        db = build_reference_db(verdicts, corpus)
        assert len(db.pairs_for("cloudA")) == 3

    def test_all_invalid_cloud_absent(self):
        corpus = Corpus(name="x", kind="instruction")
        corpus.add(make_sample("cloudB", "Q?", "A."))
        db = build_reference_db(self._verdicts(corpus, ["INVALID"]), corpus)
        assert db.pairs_for("cloudB") == []
        assert "cloudB" not in db.cloud_ids()

    def test_improve_pair_stores_refined_answer(self):
        corpus = Corpus(name="x", kind="instruction")
        sample = make_sample("cloudC", "Q?", "Original answer.")
        corpus.add(sample)
        db = build_reference_db(self._verdicts(corpus, ["IMPROVE"]), corpus)
        pair = db.pairs_for("cloudC")[0]
        assert pair.answer != sample.answer
        assert pair.answer == "Original answer. Improved."
        assert pair.provenance == "improved"

    def test_pairs_ordered_by_sample_id(self):
        corpus = Corpus(name="x", kind="instruction")
        for i in range(5):
            corpus.add(make_sample("cloudD", f"Q{i}?", f"A{i}."))
        db = build_reference_db(self._verdicts(corpus, ["KEEP"] * 5), corpus)
        ids = [p.sample_id for p in db.pairs_for("cloudD")]
        assert ids == sorted(ids)


class TestRefineInvalid:
    def test_answer_refined_keeps_instruction(self, gateway, mock_provider):
        sample = make_sample("c1", "Is it made of wood?", "Maybe.")
        mock_provider.handler = scripted_evaluator(
            {}, {sample.instruction: refinement_response(
                "answer_refined", "ignored by contract", "Yes, oak planks.")})
        refs = [RefPair("Other?", "Other.", "kept", "s1")]
        outcome = refine_invalid(gateway, sample, VIEWS, refs)
        assert outcome.kind == "answer_refined"
        assert outcome.instruction == sample.instruction
        assert outcome.answer == "Yes, oak planks."

    def test_duplicate_then_distinct_retry(self, gateway, mock_provider):
        sample = make_sample("c1", "Off-topic question?", "Answer.")
        refs = [RefPair("What shape is it?", "A tall cylinder.", "kept", "s1")]
        calls = {"n": 0}

        def handler(request):
            if extract_section(request.prompt_text, "Failed instruction") is None:
                return evaluator_response("INVALID")
            calls["n"] += 1
            if calls["n"] == 1:  # duplicates reference #1 modulo case/space
                return refinement_response("pair_regenerated",
                                           "WHAT SHAPE IS IT?", "a  tall   cylinder.")
            return refinement_response("pair_regenerated",
                                       "What is on its top?", "A narrow spout.")

        mock_provider.handler = handler
        outcome = refine_invalid(gateway, sample, VIEWS, refs)
        assert calls["n"] == 2
        assert outcome.kind == "pair_regenerated"
        assert outcome.instruction == "What is on its top?"
        assert "duplicate_regeneration" not in outcome.flags

    def test_persistent_duplicate_flagged(self, gateway, mock_provider):
        sample = make_sample("c1", "Off-topic?", "Answer.")
        refs = [RefPair("What shape is it?", "A tall cylinder.", "kept", "s1")]

        def handler(request):
            if extract_section(request.prompt_text, "Failed instruction") is None:
                return evaluator_response("INVALID")
            return refinement_response("pair_regenerated",
                                       "What shape is it?", "A tall cylinder.")

        mock_provider.handler = handler
        outcome = refine_invalid(gateway, sample, VIEWS, refs)
        assert "duplicate_regeneration" in outcome.flags

    def test_empty_references_flagged(self, gateway, mock_provider):
        sample = make_sample("c1", "Lonely question?", "Answer.")
        mock_provider.handler = scripted_evaluator({}, {})
        outcome = refine_invalid(gateway, sample, VIEWS, [])
        assert "no_reference" in outcome.flags

    def test_normalize_for_match(self):
        assert normalize_for_match("  A  Tall\nCylinder. ") == "a tall cylinder."


class TestRunStage1:
    def _mixed_corpus_and_handler(self):
        corpus = Corpus(name="mix", kind="instruction")
        verdicts = {}
        for i in range(10):
            sample = make_sample(f"cloud{i % 3}", f"Question {i}?", f"Answer {i}.")
            corpus.add(sample)
            verdicts[sample.instruction] = (
                "KEEP" if i < 6 else "IMPROVE" if i < 8 else "INVALID")
        return corpus, scripted_evaluator(verdicts)

    def test_scripted_mix_counts(self, gateway, mock_provider):
        corpus, handler = self._mixed_corpus_and_handler()
        mock_provider.handler = handler
        result = run_stage1(corpus, gateway, lambda cid: VIEWS)
        assert len(result.corpus) == 10
        assert result.report.verdict_counts == {"KEEP": 6, "IMPROVE": 2, "INVALID": 2}
        assert result.report.conservation_holds()
        stages = [s.lineage[-1].stage for s in result.corpus]
        assert stages.count("kept") == 6
        assert stages.count("improved") == 2
        assert stages.count("answer_refined") + stages.count("pair_regenerated") == 2

    def test_improved_answers_differ_from_originals(self, gateway, mock_provider):
        corpus, handler = self._mixed_corpus_and_handler()
        mock_provider.handler = handler
        originals = {s.sample_id: s.answer for s in corpus.samples}
        result = run_stage1(corpus, gateway, lambda cid: VIEWS)
        for sample in result.corpus:
            if sample.lineage[-1].stage == "improved":
                assert sample.answer != originals[sample.lineage[-1].prior]

    def test_disable_refinement_passes_through(self, gateway, mock_provider):
        corpus, _ = self._mixed_corpus_and_handler()
        mock_provider.handler = lambda r: pytest.fail("no model calls expected")
        result = run_stage1(corpus, gateway, lambda cid: VIEWS,
                            Stage1Options(disable_refinement=True))
        assert len(result.corpus) == 10
        for sample, original in zip(result.corpus, corpus.samples):
            assert sample.lineage[-1].stage == "refinement_skipped"
            assert sample.answer == original.answer
        assert result.report.conservation_holds()

    def test_empty_corpus(self, gateway):
        result = run_stage1(Corpus(name="e", kind="instruction"), gateway,
                            lambda cid: VIEWS)
        assert len(result.corpus) == 0
        assert result.report.conservation_holds()

    def test_unevaluable_routed_not_dropped_silently(self, gateway, mock_provider):
        corpus = Corpus(name="u", kind="instruction")
        good = make_sample("c1", "Good question?", "Good answer.")
        bad = make_sample("c1", "Cursed question?", "Cursed answer.")
        corpus.add(good)
        corpus.add(bad)

        def handler(request):
            instruction = extract_section(request.prompt_text, "Instruction")
            if instruction == bad.instruction:
                return "no block, ever"
            return evaluator_response("KEEP")

        mock_provider.handler = handler
        result = run_stage1(corpus, gateway, lambda cid: VIEWS)
        assert len(result.corpus) == 1
        assert [s.sample_id for s in result.unevaluable] == [bad.sample_id]
        assert result.report.outcome_counts["unevaluable"] == 1
        assert result.report.conservation_holds()

    def test_idempotent_under_keep_mock(self, gateway, mock_provider):
        corpus = make_corpus(n_clouds=2, per_cloud=3)
        mock_provider.handler = lambda r: evaluator_response("KEEP")
        first = run_stage1(corpus, gateway, lambda cid: VIEWS)
        second = run_stage1(first.corpus, gateway, lambda cid: VIEWS)
        first_content = [(s.sample_id, s.instruction, s.answer) for s in first.corpus]
        second_content = [(s.sample_id, s.instruction, s.answer) for s in second.corpus]
        assert first_content == second_content

    def test_reason_histograms_populated(self, gateway, mock_provider):
        corpus, handler = self._mixed_corpus_and_handler()
        mock_provider.handler = handler
        result = run_stage1(corpus, gateway, lambda cid: VIEWS)
        assert sum(result.report.reason_histograms["relevance"].values()) == 10

    def test_verify_improved_round(self, gateway, mock_provider):
        corpus = Corpus(name="v", kind="instruction")
        ok = make_sample("c1", "Fixable question?", "Thin answer.")
        bad = make_sample("c1", "Stubborn question?", "Wrong answer.")
        corpus.add(ok)
        corpus.add(bad)

        def handler(request):
            instruction = extract_section(request.prompt_text, "Instruction")
            answer = extract_section(request.prompt_text, "Answer")
            if instruction in (ok.instruction, bad.instruction) and \
                    "corrected" not in answer:
                return evaluator_response(
                    "IMPROVE", refined_answer=answer + " corrected.")
            # Verification round: accept one fix, reject the other.
            if instruction == bad.instruction:
                return evaluator_response(
                    "IMPROVE", refined_answer=answer + " again?")
            return evaluator_response("KEEP")

        mock_provider.handler = handler
        result = run_stage1(corpus, gateway, lambda cid: VIEWS,
                            Stage1Options(verify_improved=True))
        assert result.report.outcome_counts["improved"] == 2
        flagged = result.report.flagged["verify_failed"]
        assert len(flagged) == 1

    def test_offline_mock_mix_is_deterministic(self, gateway, mock_provider):
        corpus = make_corpus(n_clouds=4, per_cloud=5)
        mock_provider.handler = OfflineMock(seed=3)
        r1 = run_stage1(corpus, gateway, lambda cid: VIEWS)
        r2 = run_stage1(corpus, gateway, lambda cid: VIEWS)
        assert r1.report.verdict_counts == r2.report.verdict_counts
        assert [s.sample_id for s in r1.corpus] == [s.sample_id for s in r2.corpus]

    def test_parallel_workers_match_sequential(self, gateway, mock_provider):
        corpus = make_corpus(n_clouds=6, per_cloud=4)
        mock_provider.handler = OfflineMock(seed=7)
        seq = run_stage1(corpus, gateway, lambda cid: VIEWS,
                         Stage1Options(workers=1))
        par = run_stage1(corpus, gateway, lambda cid: VIEWS,
                         Stage1Options(workers=6))
        assert [s.to_json() for s in par.corpus] == [s.to_json() for s in seq.corpus]
        assert par.report.to_json() == seq.report.to_json()

    def test_rejects_cot_corpus(self, gateway):
        with pytest.raises(VerdictError, match="instruction corpus"):
            run_stage1(Corpus(name="x", kind="cot"), gateway, lambda cid: VIEWS)

    def test_empty_regenerated_content_routed_to_review(self, gateway,
                                                        mock_provider):
        corpus = Corpus(name="e", kind="instruction")
        sample = make_sample("c1", "Bad question?", "Bad answer.")
        corpus.add(sample)

        def handler(request):
            if extract_section(request.prompt_text, "Failed instruction") is None:
                return evaluator_response("INVALID")
            return refinement_response("pair_regenerated", "   ", "   ")

        mock_provider.handler = handler
        result = run_stage1(corpus, gateway, lambda cid: VIEWS)
        assert len(result.corpus) == 0
        assert result.report.outcome_counts["unevaluable"] == 1
        assert result.report.conservation_holds()
