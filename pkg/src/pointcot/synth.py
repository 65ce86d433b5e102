"""Stage 2: large-scale reasoning synthesis and training-record export.

Synthesis runs the finalized generation prompt over every refined sample.
The generator sees the views, the instruction, and the verified answer, and
must produce reasoning that actually arrives at that answer; if it rewrites
the answer beyond trivial normalization, the original answer is restored and
the record is flagged ``answer_drift`` (the verified answer is
authoritative).

Jobs are resumable: records append to the output corpus in corpus order, a
cursor file advances only after a durable write, and a restarted job
continues without duplicating or losing records.

Export turns each reasoning sample into one training record: a context
serialization (point-cloud placeholder token plus instruction) and a target
string ``reasoning + separator + answer``. The ``mask_boundary`` is the
character length of the context, marking where loss-bearing text begins for
any downstream trainer. The separator is a sentinel line; occurrences of the
sentinel pattern inside reasoning or answer are escaped reversibly so the
split is always unambiguous.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

from .corpus import (
    Corpus,
    CoTSample,
    InstructionSample,
    LoadResult,
    load_corpus,
)
from .gateway import Gateway, GatewayError, ModelRequest
from .promptloop import GENERATOR_SCHEMA, PromptVersion
from .refine import normalize_for_match
from .structured import StructuredParseError, format_section, parse_structured

logger = logging.getLogger(__name__)

ANSWER_SEPARATOR = "### Answer:"
_SEPARATOR_FAMILY = re.compile(r"^(#{3,}) Answer:$")
_ESCAPED_FAMILY = re.compile(r"^(#{4,}) Answer:$")

REASK_SUFFIX = (
    "\n\nYour previous reply could not be used. Reply again with one "
    "well-formed result block whose reasoning differs from the answer."
)


class SynthesisError(Exception):
    pass


class CrashInjected(Exception):
    """Raised by test hooks to simulate a mid-job crash."""


# ---------------------------------------------------------------------------
# Single-sample synthesis


def synthesize_cot(
    gateway: Gateway,
    views: Sequence[bytes],
    sample: InstructionSample,
    prompt: PromptVersion,
) -> CoTSample:
    """Generate the reasoning path for one sample under the finalized prompt.

    Raises :class:`SynthesisError` when the generator output is unusable
    after one re-ask (no block, or reasoning that just restates the answer).
    """
    base_prompt = "\n\n".join([
        prompt.text,
        format_section("Instruction", sample.instruction),
        format_section("Verified answer", sample.answer),
    ])

    def attempt(prompt_text: str) -> Tuple[str, str]:
        response = gateway.complete(ModelRequest(
            role="cot_generator", prompt_text=prompt_text, images=tuple(views),
        ))
        doc = parse_structured(response.text, GENERATOR_SCHEMA)
        reasoning, answer_out = doc["reasoning"], doc["answer"]
        if not reasoning.strip() or reasoning.strip() == answer_out.strip():
            raise StructuredParseError("reasoning must be distinct from the answer",
                                       response.text)
        return reasoning, answer_out

    try:
        reasoning, answer_out = attempt(base_prompt)
    except StructuredParseError:
        try:
            reasoning, answer_out = attempt(base_prompt + REASK_SUFFIX)
        except StructuredParseError as exc:
            raise SynthesisError(f"sample {sample.sample_id}: {exc.reason}") from exc

    flags: Tuple[str, ...] = ()
    if normalize_for_match(answer_out) != normalize_for_match(sample.answer):
        flags = ("answer_drift",)  # keep the verified answer, note the drift
    return CoTSample(
        sample_id=sample.sample_id,
        cloud_id=sample.cloud_id,
        instruction=sample.instruction,
        reasoning=reasoning,
        answer=sample.answer,
        prompt_version_id=prompt.prompt_id,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Resumable batch job


@dataclass
class SynthesisJob:
    job_id: str
    prompt_id: str
    corpus_path: str
    cursor: int = -1  # index of the last fully processed sample
    last_sample_id: Optional[str] = None
    written: int = 0  # records in the output file (excludes header)
    counters: Dict[str, int] = field(default_factory=lambda: {
        "succeeded": 0, "parse_failed": 0, "provider_failed": 0,
    })

    @property
    def processed(self) -> int:
        return self.cursor + 1

    def consistent(self) -> bool:
        return sum(self.counters.values()) == self.processed and \
            self.counters["succeeded"] == self.written

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id, "prompt_id": self.prompt_id,
            "corpus_path": self.corpus_path, "cursor": self.cursor,
            "last_sample_id": self.last_sample_id, "written": self.written,
            "counters": self.counters,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthesisJob":
        return cls(
            job_id=obj["job_id"], prompt_id=obj["prompt_id"],
            corpus_path=obj["corpus_path"], cursor=obj["cursor"],
            last_sample_id=obj.get("last_sample_id"), written=obj["written"],
            counters=dict(obj["counters"]),
        )


def save_job(job: SynthesisJob, path: Union[str, Path]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(job.to_json(), indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_job(path: Union[str, Path]) -> SynthesisJob:
    return SynthesisJob.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


ViewsLoader = Callable[[str], Sequence[bytes]]
ProgressHook = Callable[[int], None]


def _count_output_records(path: Path) -> int:
    if not path.exists():
        return 0
    with open(path, "r", encoding="utf-8") as fh:
        return max(0, sum(1 for line in fh if line.strip()) - 1)  # minus header


def run_stage2(
    corpus: Corpus,
    prompt: PromptVersion,
    gateway: Gateway,
    views_loader: ViewsLoader,
    out_path: Union[str, Path],
    job_path: Union[str, Path],
    disable_cot: bool = False,
    finalized: bool = True,
    progress_hook: Optional[ProgressHook] = None,
    workers: int = 1,
) -> SynthesisJob:
    """Synthesize reasoning for a whole corpus, resumably.

    ``disable_cot`` emits records with empty reasoning and the
    ``cot_skipped`` flag instead of calling the generator (the no-reasoning
    ablation arm). ``progress_hook`` is called with the sample index after
    each durable write; tests use it to inject crashes.

    With ``workers`` > 1 samples synthesize concurrently (bounded further by
    the gateway's per-provider budget) while the single writer appends
    strictly in corpus order, so the output stream is identical to a
    sequential run and the cursor semantics are unchanged.
    """
    if not finalized:
        raise SynthesisError("synthesis requires the finalized prompt")
    out_path = Path(out_path)
    job_path = Path(job_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    if job_path.exists():
        job = load_job(job_path)
        if job.prompt_id != prompt.prompt_id:
            raise SynthesisError(
                f"job was started under prompt {job.prompt_id!r}, got {prompt.prompt_id!r}"
            )
        actual = _count_output_records(out_path)
        if actual == job.written + 1:
            # Crash landed between the record write and the cursor update;
            # writes are in corpus order, so the extra record is the next
            # sample's success. Fold it in instead of re-emitting it.
            job.cursor += 1
            job.written += 1
            job.counters["succeeded"] += 1
            job.last_sample_id = corpus.samples[job.cursor].sample_id
            save_job(job, job_path)
        elif actual != job.written or not job.consistent():
            raise SynthesisError(
                f"job cursor inconsistent with output: cursor says {job.written} "
                f"records, file has {actual}"
            )
    else:
        job = SynthesisJob(job_id=f"synth-{prompt.prompt_id}", prompt_id=prompt.prompt_id,
                           corpus_path="")
        header = {"schema_version": 1, "kind": "cot", "name": f"{corpus.name}-cot"}
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        save_job(job, job_path)

    def synthesize_one(sample: InstructionSample):
        if disable_cot:
            return CoTSample(
                sample_id=sample.sample_id, cloud_id=sample.cloud_id,
                instruction=sample.instruction, reasoning="",
                answer=sample.answer, prompt_version_id=prompt.prompt_id,
                flags=("cot_skipped",),
            )
        return synthesize_cot(gateway, views_loader(sample.cloud_id),
                              sample, prompt)

    def outcomes():
        """(index, record-or-error) strictly in corpus order."""
        indices = range(job.cursor + 1, len(corpus))
        if workers <= 1 or disable_cot:
            for index in indices:
                try:
                    yield index, synthesize_one(corpus.samples[index])
                except (SynthesisError, GatewayError) as exc:
                    yield index, exc
            return
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            window: list = []
            for index in indices:
                window.append((index, pool.submit(synthesize_one,
                                                  corpus.samples[index])))
                if len(window) >= workers * 2:
                    i, fut = window.pop(0)
                    try:
                        yield i, fut.result()
                    except (SynthesisError, GatewayError) as exc:
                        yield i, exc
            for i, fut in window:
                try:
                    yield i, fut.result()
                except (SynthesisError, GatewayError) as exc:
                    yield i, exc

    with open(out_path, "a", encoding="utf-8") as fh:
        for index, outcome in outcomes():
            sample = corpus.samples[index]
            record: Optional[CoTSample] = None
            if isinstance(outcome, SynthesisError):
                logger.warning("parse failure, skipping: %s", outcome)
                job.counters["parse_failed"] += 1
            elif isinstance(outcome, GatewayError):
                logger.warning("provider failure, skipping: %s", outcome)
                job.counters["provider_failed"] += 1
            else:
                record = outcome
            if record is not None:
                fh.write(json.dumps(record.to_json(), ensure_ascii=False,
                                    separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
                job.written += 1
                job.counters["succeeded"] += 1
            job.cursor = index
            job.last_sample_id = sample.sample_id
            save_job(job, job_path)
            if progress_hook is not None:
                progress_hook(index)
    return job


# ---------------------------------------------------------------------------
# Training export


@dataclass(frozen=True)
class TrainingRecord:
    context: str
    target: str
    mask_boundary: int
    flags: Tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "context": self.context, "target": self.target,
            "mask_boundary": self.mask_boundary, "flags": list(self.flags),
        }


@dataclass(frozen=True)
class ExportTemplate:
    """Context template; must reference both placeholders."""

    context_template: str = (
        "Point cloud: {point_cloud}\nInstruction: {instruction}\nOutput: "
    )
    point_cloud_token: str = "<point_cloud>"

    def __post_init__(self) -> None:
        for placeholder in ("{point_cloud}", "{instruction}"):
            if placeholder not in self.context_template:
                raise SynthesisError(
                    f"context_template is missing the {placeholder} placeholder"
                )

    def render_context(self, instruction: str) -> str:
        return (self.context_template
                .replace("{point_cloud}", self.point_cloud_token)
                .replace("{instruction}", instruction))


def escape_separator(text: str) -> str:
    """Add one '#' to any line that could collide with the separator."""
    lines = [
        "#" + line if _SEPARATOR_FAMILY.match(line) else line
        for line in text.split("\n")
    ]
    return "\n".join(lines)


def unescape_separator(text: str) -> str:
    lines = [
        line[1:] if _ESCAPED_FAMILY.match(line) else line
        for line in text.split("\n")
    ]
    return "\n".join(lines)


def build_target(reasoning: str, answer: str, cot_skipped: bool = False) -> str:
    if cot_skipped:
        return escape_separator(answer)
    return escape_separator(reasoning) + "\n" + ANSWER_SEPARATOR + "\n" + escape_separator(answer)


def split_target(target: str) -> Tuple[str, str]:
    """Recover (reasoning, answer) from a target string."""
    lines = target.split("\n")
    hits = [i for i, line in enumerate(lines) if line == ANSWER_SEPARATOR]
    if not hits:
        return "", unescape_separator(target)
    if len(hits) > 1:
        raise SynthesisError("target contains multiple separator lines")
    i = hits[0]
    return (unescape_separator("\n".join(lines[:i])),
            unescape_separator("\n".join(lines[i + 1:])))


def export_record(sample: CoTSample, template: ExportTemplate) -> TrainingRecord:
    context = template.render_context(sample.instruction)
    target = build_target(sample.reasoning, sample.answer,
                          cot_skipped="cot_skipped" in sample.flags)
    return TrainingRecord(context=context, target=target,
                          mask_boundary=len(context), flags=sample.flags)


def export_training(
    cot_corpus: Corpus,
    template: ExportTemplate,
    out_path: Union[str, Path],
) -> int:
    """Write one training record per reasoning sample; returns the count."""
    if cot_corpus.kind != "cot":
        raise SynthesisError("export takes a reasoning corpus")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for sample in cot_corpus.samples:
            record = export_record(sample, template)
            fh.write(json.dumps(record.to_json(), ensure_ascii=False,
                                separators=(",", ":")) + "\n")
            count += 1
    return count


def load_cot_corpus(path: Union[str, Path]) -> LoadResult:
    result = load_corpus(path)
    if result.corpus.kind != "cot":
        raise SynthesisError(f"{path}: expected a reasoning corpus")
    return result
