"""Stage 1: quality evaluation, reference building, and refinement.

Each instruction sample is audited by the evaluator model against the
rendered views and labeled KEEP, IMPROVE, or INVALID. KEEP and IMPROVE pairs
(the latter with their corrected answers) form a per-cloud reference
database; INVALID samples are then re-worked with those references as
context, either keeping the question with a fixed answer or regenerating a
new pair that must differ from every reference.

The stage conserves samples: kept + improved + answer_refined +
pair_regenerated + unevaluable equals the input count on every run.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .corpus import (
    Corpus,
    CorpusError,
    InstructionSample,
    LineageRecord,
    make_sample_id,
)
from .gateway import Gateway, GatewayError, ModelRequest
from .prompt_assets import load_prompt
from .structured import (
    FieldSpec,
    StructuredParseError,
    format_section,
    parse_structured,
)

logger = logging.getLogger(__name__)

VERDICT_LABELS = ("KEEP", "IMPROVE", "INVALID")

EVALUATOR_SCHEMA = (
    FieldSpec("label", choices=VERDICT_LABELS),
    FieldSpec("relevance_reason"),
    FieldSpec("accuracy_reason"),
    FieldSpec("completeness_reason"),
    FieldSpec("refined_answer", required=False),
)

REFINEMENT_SCHEMA = (
    FieldSpec("decision", choices=("answer_refined", "pair_regenerated")),
    FieldSpec("instruction"),
    FieldSpec("answer"),
    FieldSpec("rationale"),
)

REASK_SUFFIX = (
    "\n\nYour previous reply could not be parsed. Reply again and end with "
    "exactly one well-formed result block."
)

ViewsLoader = Callable[[str], Sequence[bytes]]


class VerdictError(ValueError):
    pass


class Unevaluable(Exception):
    """Raised when the evaluator output stays unusable after one re-ask."""


@dataclass(frozen=True)
class QualityVerdict:
    label: str
    relevance_reason: str
    accuracy_reason: str
    completeness_reason: str
    refined_answer: Optional[str] = None

    def __post_init__(self) -> None:
        if self.label not in VERDICT_LABELS:
            raise VerdictError(f"unknown label {self.label!r}")
        for dim in (self.relevance_reason, self.accuracy_reason, self.completeness_reason):
            if not dim.strip():
                raise VerdictError("all three reason fields must be non-empty")
        if (self.refined_answer is not None) != (self.label == "IMPROVE"):
            raise VerdictError("refined_answer is present iff label is IMPROVE")
        if self.label == "IMPROVE" and not (self.refined_answer or "").strip():
            raise VerdictError("refined_answer must be non-empty for IMPROVE")


@dataclass(frozen=True)
class RefPair:
    instruction: str
    answer: str
    provenance: str  # "kept" | "improved"
    sample_id: str


class ReferenceDatabase:
    """Verified (instruction, answer) pairs per cloud, ordered by sample_id."""

    def __init__(self) -> None:
        self._by_cloud: Dict[str, List[RefPair]] = {}

    def add(self, cloud_id: str, pair: RefPair) -> None:
        self._by_cloud.setdefault(cloud_id, []).append(pair)

    def pairs_for(self, cloud_id: str) -> List[RefPair]:
        return list(self._by_cloud.get(cloud_id, []))

    def cloud_ids(self) -> List[str]:
        return sorted(self._by_cloud)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_cloud.values())


@dataclass(frozen=True)
class RefinementOutcome:
    kind: str  # "answer_refined" | "pair_regenerated"
    instruction: str
    answer: str
    rationale: str
    flags: Tuple[str, ...] = ()


def normalize_for_match(text: str) -> str:
    """Case-fold and collapse whitespace; the exact-match key for diversity."""
    return re.sub(r"\s+", " ", text.strip()).casefold()


def _ask(gateway: Gateway, role: str, prompt: str, images: Sequence[bytes],
         schema: Sequence[FieldSpec]):
    """One evaluator call with a single re-ask on unusable output."""
    request = ModelRequest(role=role, prompt_text=prompt, images=tuple(images))
    response = gateway.complete(request)
    try:
        return parse_structured(response.text, schema), response
    except StructuredParseError as first_error:
        logger.debug("structured parse failed, re-asking: %s", first_error.reason)
    request = ModelRequest(role=role, prompt_text=prompt + REASK_SUFFIX,
                           images=tuple(images))
    response = gateway.complete(request)
    return parse_structured(response.text, schema), response


def evaluate_sample(
    gateway: Gateway,
    views: Sequence[bytes],
    sample: InstructionSample,
    prompt_text: Optional[str] = None,
) -> QualityVerdict:
    """Audit one sample; raises :class:`Unevaluable` after a failed re-ask."""
    prompt_text = prompt_text or load_prompt("evaluator")
    prompt = "\n\n".join([
        prompt_text,
        format_section("Instruction", sample.instruction),
        format_section("Answer", sample.answer),
    ])
    try:
        doc, _ = _ask(gateway, "evaluator", prompt, views, EVALUATOR_SCHEMA)
        return QualityVerdict(
            label=doc["label"],
            relevance_reason=doc["relevance_reason"],
            accuracy_reason=doc["accuracy_reason"],
            completeness_reason=doc["completeness_reason"],
            refined_answer=doc.get("refined_answer"),
        )
    except (StructuredParseError, VerdictError) as exc:
        raise Unevaluable(f"sample {sample.sample_id}: {exc}") from exc


def build_reference_db(
    verdicts: Dict[str, QualityVerdict], corpus: Corpus
) -> ReferenceDatabase:
    """KEEP pairs as-is; IMPROVE pairs with their corrected answers."""
    db = ReferenceDatabase()
    for sample in sorted(corpus.samples, key=lambda s: s.sample_id):
        verdict = verdicts.get(sample.sample_id)
        if verdict is None:
            continue
        if verdict.label == "KEEP":
            db.add(sample.cloud_id, RefPair(sample.instruction, sample.answer,
                                            "kept", sample.sample_id))
        elif verdict.label == "IMPROVE":
            db.add(sample.cloud_id, RefPair(sample.instruction, verdict.refined_answer,
                                            "improved", sample.sample_id))
    return db


def _serialize_references(references: Sequence[RefPair]) -> str:
    if not references:
        return "(no verified pairs exist for this object)"
    lines = []
    for i, ref in enumerate(references, start=1):
        lines.append(f"{i}. Q: {ref.instruction}")
        lines.append(f"   A: {ref.answer}")
    return "\n".join(lines)


def refine_invalid(
    gateway: Gateway,
    sample: InstructionSample,
    views: Sequence[bytes],
    references: Sequence[RefPair],
    prompt_text: Optional[str] = None,
) -> RefinementOutcome:
    """Re-work one INVALID sample with the reference pairs as context.

    A regenerated pair must differ from every reference after case-fold and
    whitespace collapse; a duplicate gets one retry with a strengthened
    instruction and is flagged ``duplicate_regeneration`` if it persists.
    """
    prompt_text = prompt_text or load_prompt("refinement")
    flags: List[str] = []
    if not references:
        flags.append("no_reference")
    base_prompt = "\n\n".join([
        prompt_text,
        format_section("Failed instruction", sample.instruction),
        format_section("Failed answer", sample.answer),
        format_section("Reference pairs", _serialize_references(references)),
    ])
    ref_keys = {
        (normalize_for_match(r.instruction), normalize_for_match(r.answer))
        for r in references
    }

    def run(prompt: str) -> RefinementOutcome:
        doc, _ = _ask(gateway, "evaluator", prompt, views, REFINEMENT_SCHEMA)
        kind = doc["decision"]
        # The prompt demands the original instruction for answer_refined;
        # enforce it so the invariant holds regardless of model behavior.
        instruction = sample.instruction if kind == "answer_refined" else doc["instruction"]
        return RefinementOutcome(kind=kind, instruction=instruction,
                                 answer=doc["answer"], rationale=doc["rationale"])

    outcome = run(base_prompt)
    if outcome.kind == "pair_regenerated":
        key = (normalize_for_match(outcome.instruction), normalize_for_match(outcome.answer))
        if key in ref_keys:
            retry_prompt = base_prompt + (
                "\n\nYour previous pair duplicated a reference pair. Produce a "
                "pair about a different aspect of the object, sharing no "
                "wording with any reference."
            )
            outcome = run(retry_prompt)
            key = (normalize_for_match(outcome.instruction),
                   normalize_for_match(outcome.answer))
            if key in ref_keys:
                flags.append("duplicate_regeneration")
    if flags:
        outcome = RefinementOutcome(kind=outcome.kind, instruction=outcome.instruction,
                                    answer=outcome.answer, rationale=outcome.rationale,
                                    flags=tuple(flags))
    return outcome


@dataclass
class Stage1Options:
    disable_refinement: bool = False
    verify_improved: bool = False
    workers: int = 1  # evaluation/refinement passes parallelize per sample


@dataclass
class Stage1Report:
    input_count: int = 0
    verdict_counts: Counter = field(default_factory=Counter)
    outcome_counts: Counter = field(default_factory=Counter)
    reason_histograms: Dict[str, Counter] = field(default_factory=lambda: {
        "relevance": Counter(), "accuracy": Counter(), "completeness": Counter(),
    })
    flagged: Dict[str, List[str]] = field(default_factory=lambda: {
        "unevaluable": [], "duplicate_regeneration": [], "no_reference": [],
        "verify_failed": [],
    })

    def conservation_holds(self) -> bool:
        processed = sum(
            self.outcome_counts[k]
            for k in ("kept", "improved", "answer_refined", "pair_regenerated",
                      "unevaluable", "refinement_skipped")
        )
        return processed == self.input_count

    def to_json(self) -> dict:
        return {
            "input_count": self.input_count,
            "verdict_counts": dict(self.verdict_counts),
            "outcome_counts": dict(self.outcome_counts),
            "reason_histograms": {k: dict(v) for k, v in self.reason_histograms.items()},
            "flagged": self.flagged,
        }

    def render_text(self) -> str:
        lines = [f"stage 1: {self.input_count} samples"]
        for label in VERDICT_LABELS:
            lines.append(f"  verdict {label}: {self.verdict_counts.get(label, 0)}")
        for key in sorted(self.outcome_counts):
            lines.append(f"  outcome {key}: {self.outcome_counts[key]}")
        for key, ids in self.flagged.items():
            if ids:
                lines.append(f"  flagged {key}: {len(ids)}")
        return "\n".join(lines)


@dataclass
class Stage1Result:
    corpus: Corpus
    report: Stage1Report
    unevaluable: List[InstructionSample] = field(default_factory=list)


def _unique_id(corpus: Corpus, base_id: str) -> str:
    if base_id not in corpus.sample_ids():
        return base_id
    k = 1
    while f"{base_id}-{k}" in corpus.sample_ids():
        k += 1
    return f"{base_id}-{k}"


def _derived_sample(corpus_out: Corpus, original: InstructionSample, instruction: str,
                    answer: str, source: str, stage: str, verdict: str,
                    outcome_flags: Sequence[str] = ()) -> InstructionSample:
    base_id = make_sample_id(original.cloud_id, instruction, answer, source)
    sample = InstructionSample(
        sample_id=_unique_id(corpus_out, base_id),
        cloud_id=original.cloud_id,
        instruction=instruction,
        answer=answer,
        source=source,
        lineage=original.lineage + (
            LineageRecord(stage=stage, prior=original.sample_id, verdict=verdict),
        ),
    )
    return sample


def run_stage1(
    corpus: Corpus,
    gateway: Gateway,
    views_loader: ViewsLoader,
    options: Optional[Stage1Options] = None,
) -> Stage1Result:
    """Run the two-pass refinement stage over an instruction corpus.

    Pass 1 evaluates every sample; the reference database is built at the
    barrier between passes; pass 2 re-works the INVALID samples. A failing
    sample never aborts the batch: unusable evaluator output routes the
    sample to the manual-review list.
    """
    options = options or Stage1Options()
    if corpus.kind != "instruction":
        raise VerdictError("stage 1 takes an instruction corpus")
    report = Stage1Report(input_count=len(corpus))
    out = Corpus(name=f"{corpus.name}-refined", kind="instruction")
    result = Stage1Result(corpus=out, report=report)

    if options.disable_refinement:
        for sample in corpus.samples:
            out.add(sample.with_lineage(LineageRecord(stage="refinement_skipped")))
            report.outcome_counts["refinement_skipped"] += 1
        return result

    evaluator_prompt = load_prompt("evaluator")
    refinement_prompt = load_prompt("refinement")

    def worker_map(fn, items):
        """Parallel map that preserves item order; workers=1 stays inline."""
        if options.workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            return list(pool.map(fn, items))

    # Pass 1: evaluate everything. Outcomes carry either a verdict or the
    # failure; counters and flag lists are folded in corpus order so output
    # is identical whatever the thread interleaving was.
    def evaluate_one(sample):
        try:
            return evaluate_sample(gateway, views_loader(sample.cloud_id),
                                   sample, evaluator_prompt)
        except (Unevaluable, GatewayError) as exc:
            return exc

    verdicts: Dict[str, QualityVerdict] = {}
    for sample, outcome in zip(corpus.samples,
                               worker_map(evaluate_one, corpus.samples)):
        if isinstance(outcome, Exception):
            logger.warning("unevaluable: %s", outcome)
            report.outcome_counts["unevaluable"] += 1
            report.flagged["unevaluable"].append(sample.sample_id)
            result.unevaluable.append(sample)
            continue
        verdicts[sample.sample_id] = outcome
        report.verdict_counts[outcome.label] += 1
        report.reason_histograms["relevance"][outcome.relevance_reason] += 1
        report.reason_histograms["accuracy"][outcome.accuracy_reason] += 1
        report.reason_histograms["completeness"][outcome.completeness_reason] += 1

    # Barrier: the reference database needs every verdict before any
    # refinement starts.
    reference_db = build_reference_db(verdicts, corpus)

    invalid_samples = [s for s in corpus.samples
                       if verdicts.get(s.sample_id) is not None
                       and verdicts[s.sample_id].label == "INVALID"]

    def refine_one(sample):
        try:
            return refine_invalid(gateway, sample,
                                  views_loader(sample.cloud_id),
                                  reference_db.pairs_for(sample.cloud_id),
                                  refinement_prompt)
        except (StructuredParseError, GatewayError) as exc:
            return exc

    refinements = dict(zip((s.sample_id for s in invalid_samples),
                           worker_map(refine_one, invalid_samples)))

    for sample in corpus.samples:
        verdict = verdicts.get(sample.sample_id)
        if verdict is None:
            continue  # already routed to manual review
        if verdict.label == "KEEP":
            out.add(sample.with_lineage(
                LineageRecord(stage="kept", prior=sample.sample_id, verdict="KEEP")))
            report.outcome_counts["kept"] += 1
        elif verdict.label == "IMPROVE":
            improved = _derived_sample(out, sample, sample.instruction,
                                       verdict.refined_answer, sample.source,
                                       "improved", "IMPROVE")
            if options.verify_improved:
                views = views_loader(sample.cloud_id)
                try:
                    check = evaluate_sample(gateway, views, improved, evaluator_prompt)
                    if check.label != "KEEP":
                        report.flagged["verify_failed"].append(improved.sample_id)
                except (Unevaluable, GatewayError):
                    report.flagged["verify_failed"].append(improved.sample_id)
            out.add(improved)
            report.outcome_counts["improved"] += 1
        else:  # INVALID
            outcome = refinements[sample.sample_id]
            if isinstance(outcome, Exception):
                logger.warning("refinement unevaluable: %s", outcome)
                report.outcome_counts["unevaluable"] += 1
                report.flagged["unevaluable"].append(sample.sample_id)
                result.unevaluable.append(sample)
                continue
            source = sample.source if outcome.kind == "answer_refined" else "regenerated"
            try:
                refined = _derived_sample(out, sample, outcome.instruction,
                                          outcome.answer, source, outcome.kind,
                                          "INVALID")
            except CorpusError as exc:
                # Empty or otherwise invalid regenerated content: manual review.
                logger.warning("refinement produced an invalid sample: %s", exc)
                report.outcome_counts["unevaluable"] += 1
                report.flagged["unevaluable"].append(sample.sample_id)
                result.unevaluable.append(sample)
                continue
            out.add(refined)
            report.outcome_counts[outcome.kind] += 1
            for flag in outcome.flags:
                report.flagged[flag].append(refined.sample_id)
    return result
