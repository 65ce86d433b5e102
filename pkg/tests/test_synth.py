from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointcot.corpus import Corpus, CoTSample, load_corpus
from pointcot.mockmodels import generator_response
from pointcot.promptloop import PromptVersion
from pointcot.structured import extract_section
from pointcot.synth import (
    ANSWER_SEPARATOR,
    CrashInjected,
    ExportTemplate,
    SynthesisError,
    build_target,
    escape_separator,
    export_record,
    export_training,
    load_cot_corpus,
    run_stage2,
    split_target,
    synthesize_cot,
    unescape_separator,
)

from conftest import make_corpus, make_sample, tiny_views

VIEWS = tiny_views()

PSTAR = PromptVersion(prompt_id="pv0003", iteration_k=2,
                      text="Produce numbered reasoning steps.", state="active")


def echo_generator(request):
    instruction = extract_section(request.prompt_text, "Instruction")
    answer = extract_section(request.prompt_text, "Verified answer")
    return generator_response(
        f"Step 1: examine the object for '{instruction}'.\n"
        f"Step 2: the visible evidence settles it.", answer)


class TestSynthesizeCot:
    def test_conclusion_preserving(self, gateway, mock_provider):
        mock_provider.handler = echo_generator
        sample = make_sample("c1", "What is this?", "A wooden stool.")
        record = synthesize_cot(gateway, VIEWS, sample, PSTAR)
        assert record.answer == sample.answer
        assert record.reasoning.startswith("Step 1")
        assert record.flags == ()
        assert record.prompt_version_id == "pv0003"

    def test_answer_drift_restores_original(self, gateway, mock_provider):
        def drifting(request):
            return generator_response("Step 1: look closely.", "A metal stool!")

        mock_provider.handler = drifting
        sample = make_sample("c1", "What is this?", "A wooden stool.")
        record = synthesize_cot(gateway, VIEWS, sample, PSTAR)
        assert "answer_drift" in record.flags
        assert record.answer == "A wooden stool."

    def test_normalization_tolerated_without_flag(self, gateway, mock_provider):
        def shouting(request):
            answer = extract_section(request.prompt_text, "Verified answer")
            return generator_response("Step 1: inspect.", "  " + answer.upper())

        mock_provider.handler = shouting
        sample = make_sample("c1", "What is this?", "A wooden stool.")
        record = synthesize_cot(gateway, VIEWS, sample, PSTAR)
        assert record.flags == ()
        assert record.answer == sample.answer

    def test_reasoning_equal_to_answer_rejected(self, gateway, mock_provider):
        def lazy(request):
            answer = extract_section(request.prompt_text, "Verified answer")
            return generator_response(answer, answer)

        mock_provider.handler = lazy
        sample = make_sample("c1", "What is this?", "A wooden stool.")
        with pytest.raises(SynthesisError):
            synthesize_cot(gateway, VIEWS, sample, PSTAR)
        assert mock_provider.calls == 2  # one re-ask happened

    def test_reask_recovers(self, gateway, mock_provider):
        def flaky(request):
            if "could not be used" in request.prompt_text:
                return echo_generator(request)
            return "not a block"

        mock_provider.handler = flaky
        sample = make_sample("c1", "What is this?", "A wooden stool.")
        record = synthesize_cot(gateway, VIEWS, sample, PSTAR)
        assert record.reasoning.startswith("Step 1")


class TestRunStage2:
    def _paths(self, tmp_path):
        return tmp_path / "cot.jsonl", tmp_path / "job.json"

    def test_full_run_counts(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = echo_generator
        corpus = make_corpus(10, 2)
        out, job_path = self._paths(tmp_path)
        job = run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path)
        assert job.counters["succeeded"] == 20
        assert sum(job.counters.values()) == 20
        loaded = load_cot_corpus(out).corpus
        assert len(loaded) == 20

    def test_requires_finalized_prompt(self, tmp_path, gateway):
        out, job_path = self._paths(tmp_path)
        with pytest.raises(SynthesisError, match="finalized"):
            run_stage2(make_corpus(), PSTAR, gateway, lambda cid: VIEWS,
                       out, job_path, finalized=False)

    def test_empty_corpus(self, tmp_path, gateway):
        out, job_path = self._paths(tmp_path)
        job = run_stage2(Corpus(name="e", kind="instruction"), PSTAR, gateway,
                         lambda cid: VIEWS, out, job_path)
        assert job.written == 0
        assert len(load_cot_corpus(out).corpus) == 0

    def test_disable_cot_emits_flagged_records(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = lambda r: pytest.fail("generator must not be called")
        corpus = make_corpus(3, 2)
        out, job_path = self._paths(tmp_path)
        job = run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path,
                         disable_cot=True)
        assert job.written == 6
        for sample in load_cot_corpus(out).corpus:
            assert sample.reasoning == ""
            assert "cot_skipped" in sample.flags

    def test_parse_failures_counted_and_skipped(self, tmp_path, gateway, mock_provider):
        corpus = make_corpus(5, 2)
        cursed = {corpus.samples[2].instruction, corpus.samples[7].instruction}

        def handler(request):
            instruction = extract_section(request.prompt_text, "Instruction")
            if instruction in cursed:
                return "never valid"
            return echo_generator(request)

        mock_provider.handler = handler
        out, job_path = self._paths(tmp_path)
        job = run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path)
        assert job.counters == {"succeeded": 8, "parse_failed": 2,
                                "provider_failed": 0}
        assert len(load_cot_corpus(out).corpus) == 8

    def test_crash_and_resume_identical(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = echo_generator
        corpus = make_corpus(20, 2)  # 40 samples

        ref_out, ref_job = tmp_path / "ref.jsonl", tmp_path / "ref_job.json"
        run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, ref_out, ref_job)

        out, job_path = self._paths(tmp_path)

        def crash_at(n):
            def hook(index):
                if index == n:
                    raise CrashInjected(f"boom at {index}")
            return hook

        with pytest.raises(CrashInjected):
            run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path,
                       progress_hook=crash_at(24))
        job = run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path)
        assert job.written == 40
        assert out.read_bytes() == ref_out.read_bytes()

    def test_recovery_when_cursor_lags_output(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = echo_generator
        corpus = make_corpus(5, 2)
        out, job_path = self._paths(tmp_path)

        def crash(index):
            if index == 4:
                raise CrashInjected()

        with pytest.raises(CrashInjected):
            run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path,
                       progress_hook=crash)
        # Simulate a crash that landed between the record write and the
        # cursor update: roll the job file back one step.
        obj = json.loads(job_path.read_text())
        obj["cursor"] -= 1
        obj["written"] -= 1
        obj["counters"]["succeeded"] -= 1
        job_path.write_text(json.dumps(obj))
        job = run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path)
        assert job.written == 10
        assert len(load_cot_corpus(out).corpus) == 10
        ids = [s.sample_id for s in load_cot_corpus(out).corpus]
        assert len(set(ids)) == 10  # no duplicates

    def test_parallel_workers_byte_identical(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = echo_generator
        corpus = make_corpus(15, 2)
        seq_out = tmp_path / "seq.jsonl"
        run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, seq_out,
                   tmp_path / "seq_job.json", workers=1)
        par_out = tmp_path / "par.jsonl"
        job = run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, par_out,
                         tmp_path / "par_job.json", workers=6)
        assert par_out.read_bytes() == seq_out.read_bytes()
        assert job.written == 30

    def test_parallel_crash_and_resume(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = echo_generator
        corpus = make_corpus(15, 2)
        ref = tmp_path / "ref.jsonl"
        run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, ref,
                   tmp_path / "ref_job.json")
        out, job_path = tmp_path / "p.jsonl", tmp_path / "p_job.json"

        def crash(index):
            if index == 17:
                raise CrashInjected()

        with pytest.raises(CrashInjected):
            run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path,
                       workers=5, progress_hook=crash)
        run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path,
                   workers=5)
        assert out.read_bytes() == ref.read_bytes()

    def test_corrupt_job_rejected(self, tmp_path, gateway, mock_provider):
        mock_provider.handler = echo_generator
        corpus = make_corpus(3, 2)
        out, job_path = self._paths(tmp_path)
        run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path)
        obj = json.loads(job_path.read_text())
        obj["written"] += 3
        job_path.write_text(json.dumps(obj))
        with pytest.raises(SynthesisError, match="inconsistent"):
            run_stage2(corpus, PSTAR, gateway, lambda cid: VIEWS, out, job_path)


def cot(reasoning: str, answer: str, flags=()) -> CoTSample:
    return CoTSample(sample_id="s1", cloud_id="c1", instruction="What is this?",
                     reasoning=reasoning, answer=answer,
                     prompt_version_id="pv0003", flags=tuple(flags))


class TestExport:
    def test_round_trip_simple(self):
        sample = cot("Step 1: legs.\nStep 2: seat.", "A chair.")
        record = export_record(sample, ExportTemplate())
        reasoning, answer = split_target(record.target)
        assert reasoning == sample.reasoning
        assert answer == sample.answer

    def test_cot_skipped_answer_only(self):
        sample = cot("", "A chair.", flags=("cot_skipped",))
        record = export_record(sample, ExportTemplate())
        assert ANSWER_SEPARATOR not in record.target
        assert split_target(record.target) == ("", "A chair.")

    def test_mask_boundary_equals_context_length(self):
        template = ExportTemplate()
        sample = cot("Step 1: look.", "A chair.")
        record = export_record(sample, template)
        # Independent oracle: rebuild the context by direct substitution.
        expected = "Point cloud: <point_cloud>\nInstruction: What is this?\nOutput: "
        assert record.context == expected
        assert record.mask_boundary == len(expected)

    def test_separator_collision_escaped(self):
        reasoning = "Step 1: setup.\n### Answer:\nStep 2: more."
        sample = cot(reasoning, "A chair.")
        record = export_record(sample, ExportTemplate())
        # Exactly one separator line survives in the target.
        hits = [l for l in record.target.split("\n") if l == ANSWER_SEPARATOR]
        assert len(hits) == 1
        r, a = split_target(record.target)
        assert r == reasoning
        assert a == "A chair."

    def test_nested_escape_levels(self):
        reasoning = "### Answer:\n#### Answer:\n##### Answer:"
        r, _ = split_target(build_target(reasoning, "A."))
        assert r == reasoning

    def test_template_requires_placeholders(self):
        with pytest.raises(SynthesisError, match="instruction"):
            ExportTemplate(context_template="just {point_cloud}")
        with pytest.raises(SynthesisError, match="point_cloud"):
            ExportTemplate(context_template="ask {instruction}")

    def test_export_file(self, tmp_path):
        corpus = Corpus(name="c", kind="cot")
        for i in range(5):
            corpus.add(CoTSample(
                sample_id=f"s{i}", cloud_id="c1", instruction=f"Q{i}?",
                reasoning=f"Step 1: case {i}.", answer=f"A{i}.",
                prompt_version_id="pv0003"))
        out = tmp_path / "train.jsonl"
        count = export_training(corpus, ExportTemplate(), out)
        assert count == 5
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        for row in rows:
            assert row["mask_boundary"] == len(row["context"])
            assert ANSWER_SEPARATOR in row["target"]

    def test_export_rejects_instruction_corpus(self, tmp_path):
        with pytest.raises(SynthesisError, match="reasoning corpus"):
            export_training(make_corpus(), ExportTemplate(), tmp_path / "x.jsonl")

    @given(
        st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=200),
        st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=100),
    )
    @settings(max_examples=200, deadline=None)
    def test_target_bijective(self, reasoning, answer):
        target = build_target(reasoning, answer)
        assert split_target(target) == (reasoning, answer)

    def test_escape_is_bijective_on_separator_family(self):
        for k in range(3, 8):
            line = "#" * k + " Answer:"
            assert unescape_separator(escape_separator(line)) == line
            assert escape_separator(line) != ANSWER_SEPARATOR
