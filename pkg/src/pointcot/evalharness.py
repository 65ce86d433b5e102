"""Multi-judge evaluation of point-cloud-conditioned subject models.

Two task families are supported:

- Generative classification, queried with an instruction-style prompt
  ("What is this?") or a completion-style prompt ("This is an object of").
  Closed-set judging maps the response to exactly one label of a fixed
  category list; open-ended judging returns a binary same-category verdict
  against a reference description.
- Captioning, queried with "Caption this 3D model in detail." and scored by
  each judge on a 0-100 scale, with embedding cosine similarity reported
  alongside.

Every judge is weighted equally: per-judge aggregates are computed first and
their plain arithmetic mean is the headline number, which damps any single
evaluator's bias. Unscorable judge output counts as incorrect for
classification and is excluded (with a coverage note) for captioning.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import PointCloud
from .gateway import Gateway, GatewayError, ModelRequest
from .prompt_assets import load_prompt
from .render import RenderConfig, encode_view, render_views
from .structured import (
    FieldSpec,
    StructuredParseError,
    format_section,
    parse_structured,
)

logger = logging.getLogger(__name__)

QUERY_PROMPTS = {
    "instruction": "What is this?",
    "completion": "This is an object of",
    "caption": "Caption this 3D model in detail.",
}

BENCHMARKS = ("closed_set", "open_ended", "captioning")

CLOSED_SET_SCHEMA = (FieldSpec("label"),)
OPEN_ENDED_SCHEMA = (FieldSpec("same_category", choices=("true", "false")),)
CAPTION_SCHEMA = (FieldSpec("score"),)
CAPTION_GT_SCHEMA = (FieldSpec("caption"),)


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalItem:
    cloud_id: str
    ground_truth: str


@dataclass
class EvalTask:
    benchmark: str
    prompt_type: str
    items: List[EvalItem]
    label_set: Tuple[str, ...] = ()
    dataset: str = "dataset"

    def __post_init__(self) -> None:
        if self.benchmark not in BENCHMARKS:
            raise EvalError(f"unknown benchmark {self.benchmark!r}")
        if self.prompt_type not in QUERY_PROMPTS:
            raise EvalError(f"unknown prompt_type {self.prompt_type!r}")
        if self.benchmark == "closed_set":
            if not self.label_set:
                raise EvalError("closed_set tasks need a non-empty label_set")
            for item in self.items:
                if item.ground_truth not in self.label_set:
                    raise EvalError(
                        f"ground truth {item.ground_truth!r} outside the label set"
                    )


def save_eval_task(task: EvalTask, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "benchmark": task.benchmark, "prompt_type": task.prompt_type,
        "label_set": list(task.label_set), "dataset": task.dataset,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for item in task.items:
            fh.write(json.dumps(
                {"cloud_id": item.cloud_id, "ground_truth": item.ground_truth},
                ensure_ascii=False,
            ) + "\n")


def load_eval_task(path: Union[str, Path]) -> EvalTask:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise EvalError(f"{path}: empty task file")
    header = json.loads(lines[0])
    items = [
        EvalItem(cloud_id=obj["cloud_id"], ground_truth=obj["ground_truth"])
        for obj in map(json.loads, lines[1:])
    ]
    return EvalTask(
        benchmark=header["benchmark"], prompt_type=header["prompt_type"],
        items=items, label_set=tuple(header.get("label_set", [])),
        dataset=header.get("dataset", path.stem),
    )


# ---------------------------------------------------------------------------
# Scalar helpers


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise EvalError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise EvalError("cosine similarity is undefined for a zero vector")
    value = float(va @ vb) / (na * nb)
    return max(-1.0, min(1.0, value))


def average_equal_weight(values: Sequence[float]) -> float:
    if not values:
        raise EvalError("cannot average an empty sequence")
    return float(sum(values)) / len(values)


def aggregate_caption_scores(scores: Sequence[Optional[float]]) -> Optional[float]:
    """Equal-weight mean over the judges that produced a valid score."""
    valid = [s for s in scores if s is not None]
    if not valid:
        return None
    return average_equal_weight(valid)


# ---------------------------------------------------------------------------
# Judging


@dataclass(frozen=True)
class JudgeScore:
    judge_id: str
    value: object  # bool for classification, float in [0, 100] for captioning
    raw_text: str
    flags: Tuple[str, ...] = ()


def query_subject(
    gateway: Gateway,
    cloud_id: str,
    prompt_type: str,
    views: Sequence[bytes] = (),
) -> Optional[str]:
    """Ask the subject model; None marks an unanswered item (scored 0)."""
    if prompt_type not in QUERY_PROMPTS:
        raise EvalError(f"unknown prompt_type {prompt_type!r}")
    try:
        response = gateway.complete(ModelRequest(
            role="subject_model", prompt_text=QUERY_PROMPTS[prompt_type],
            images=tuple(views),
        ))
        return response.text
    except GatewayError as exc:
        logger.warning("subject model failed on %s: %s", cloud_id, exc)
        return None


def judge_classification(
    gateway: Gateway,
    response: Optional[str],
    ground_truth: str,
    task: EvalTask,
    judges: Sequence[str],
) -> List[JudgeScore]:
    """One correctness verdict per judge for a single item."""
    if not judges:
        raise EvalError("at least one judge is required")
    scores: List[JudgeScore] = []
    for judge_id in judges:
        if response is None:
            scores.append(JudgeScore(judge_id, False, "", ("unanswered",)))
            continue
        if task.benchmark == "closed_set":
            prompt = "\n\n".join([
                load_prompt("judge_closed_set"),
                format_section("Allowed labels", "\n".join(task.label_set)),
                format_section("Response", response),
            ])
            schema = CLOSED_SET_SCHEMA
        else:
            prompt = "\n\n".join([
                load_prompt("judge_open_ended"),
                format_section("Reference", ground_truth),
                format_section("Response", response),
            ])
            schema = OPEN_ENDED_SCHEMA
        try:
            reply = gateway.complete(ModelRequest(
                role="judge", provider_id=judge_id, prompt_text=prompt,
            ))
        except GatewayError as exc:
            scores.append(JudgeScore(judge_id, False, str(exc), ("provider_failed",)))
            continue
        try:
            doc = parse_structured(reply.text, schema)
        except StructuredParseError:
            scores.append(JudgeScore(judge_id, False, reply.text, ("parse_failed",)))
            continue
        if task.benchmark == "closed_set":
            label = doc["label"]
            if label not in task.label_set:
                scores.append(JudgeScore(judge_id, False, reply.text, ("out_of_set",)))
            else:
                scores.append(JudgeScore(judge_id, label == ground_truth, reply.text))
        else:
            scores.append(JudgeScore(judge_id, doc["same_category"] == "true", reply.text))
    return scores


def score_caption(
    gateway: Gateway,
    candidate: Optional[str],
    reference: str,
    judges: Sequence[str],
) -> Tuple[List[JudgeScore], Optional[float]]:
    """Per-judge 0-100 scores and their equal-weight average.

    Judges that fail to produce an in-range number are flagged unscorable
    and excluded from the average; an item where every judge is unscorable
    averages to None and is excluded from aggregates upstream.
    """
    if not judges:
        raise EvalError("at least one judge is required")
    scores: List[JudgeScore] = []
    for judge_id in judges:
        if candidate is None:
            scores.append(JudgeScore(judge_id, 0.0, "", ("unanswered",)))
            continue
        prompt = "\n\n".join([
            load_prompt("judge_caption"),
            format_section("Reference", reference),
            format_section("Candidate caption", candidate),
        ])
        try:
            reply = gateway.complete(ModelRequest(
                role="judge", provider_id=judge_id, prompt_text=prompt,
            ))
        except GatewayError as exc:
            scores.append(JudgeScore(judge_id, None, str(exc),
                                     ("provider_failed", "unscorable")))
            continue
        try:
            doc = parse_structured(reply.text, CAPTION_SCHEMA)
            value = float(doc["score"])
            if math.isnan(value) or not 0.0 <= value <= 100.0:
                raise ValueError(value)
            scores.append(JudgeScore(judge_id, value, reply.text))
        except (StructuredParseError, ValueError):
            scores.append(JudgeScore(judge_id, None, reply.text, ("unscorable",)))
    average = aggregate_caption_scores(
        [s.value if isinstance(s.value, float) else None for s in scores]
    )
    return scores, average


def gen_reference_captions(
    gateway: Gateway,
    clouds: Sequence[PointCloud],
    render_config: Optional[RenderConfig] = None,
) -> Tuple[List[Tuple[str, str]], List[str]]:
    """Brief reference captions for unlabeled clouds, via the four views.

    Returns (captions, excluded_cloud_ids); a generator failure excludes the
    cloud and is logged rather than aborting the sweep.
    """
    captions: List[Tuple[str, str]] = []
    excluded: List[str] = []
    for cloud in clouds:
        views = render_views(cloud, render_config)
        images = tuple(encode_view(v) for v in views.views)
        prompt = load_prompt("caption_gt")
        try:
            reply = gateway.complete(ModelRequest(
                role="caption_gt_generator", prompt_text=prompt, images=images,
            ))
            doc = parse_structured(reply.text, CAPTION_GT_SCHEMA)
            captions.append((cloud.cloud_id, doc["caption"]))
        except (GatewayError, StructuredParseError) as exc:
            logger.warning("caption generation failed for %s: %s", cloud.cloud_id, exc)
            excluded.append(cloud.cloud_id)
    return captions, excluded


# ---------------------------------------------------------------------------
# Task runners and report


@dataclass
class ItemResult:
    cloud_id: str
    ground_truth: str
    response: Optional[str]
    judge_scores: List[JudgeScore]
    item_average: Optional[float] = None  # captioning only
    similarities: Dict[str, float] = field(default_factory=dict)


def _format_table(rows: List[List[str]]) -> List[str]:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    out = []
    for row in rows:
        first = row[0].ljust(widths[0])
        rest = "  ".join(cell.rjust(widths[i + 1]) for i, cell in enumerate(row[1:]))
        out.append((first + "  " + rest).rstrip())
    return out


@dataclass
class EvalReport:
    kind: str  # "classification" | "captioning"
    # classification: cell key "dataset(prompt_type)" -> {judge -> accuracy %}
    per_judge_cells: Dict[str, Dict[str, float]] = field(default_factory=dict)
    cells: Dict[str, float] = field(default_factory=dict)  # equal-weight over judges
    overall_average: Optional[float] = None
    # captioning
    judge_means: Dict[str, float] = field(default_factory=dict)
    caption_average: Optional[float] = None
    similarity_means: Dict[str, float] = field(default_factory=dict)
    coverage_notes: List[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "per_judge_cells": self.per_judge_cells,
            "cells": self.cells,
            "overall_average": self.overall_average,
            "judge_means": self.judge_means,
            "caption_average": self.caption_average,
            "similarity_means": self.similarity_means,
            "coverage_notes": self.coverage_notes,
        }

    def render_text(self) -> str:
        """Columnar table: one column per cell (or judge), Average last."""
        lines = []
        if self.kind == "classification":
            cells = sorted(self.cells)
            header = [""] + cells + ["Average"]
            rows = [header]
            judges = sorted({j for per in self.per_judge_cells.values() for j in per})
            for judge in judges:
                row = [judge]
                values = []
                for cell in cells:
                    value = self.per_judge_cells.get(cell, {}).get(judge)
                    row.append("-" if value is None else f"{value:.2f}")
                    if value is not None:
                        values.append(value)
                row.append(f"{average_equal_weight(values):.2f}" if values else "-")
                rows.append(row)
            summary = ["accuracy"] + [f"{self.cells[c]:.2f}" for c in cells]
            summary.append("-" if self.overall_average is None
                           else f"{self.overall_average:.2f}")
            rows.append(summary)
            lines.extend(_format_table(rows))
        else:
            judges = sorted(self.judge_means)
            sims = sorted(self.similarity_means)
            header = [""] + judges + ["Average"] + sims
            row = ["score"] + [f"{self.judge_means[j]:.2f}" for j in judges]
            row.append("-" if self.caption_average is None
                       else f"{self.caption_average:.2f}")
            row.extend(f"{self.similarity_means[s]:.2f}" for s in sims)
            lines.extend(_format_table([header, row]))
        for note in self.coverage_notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def run_classification_task(
    gateway: Gateway,
    task: EvalTask,
    judges: Sequence[str],
    views_loader: Optional[Callable[[str], Sequence[bytes]]] = None,
) -> List[ItemResult]:
    results = []
    for item in task.items:
        views = views_loader(item.cloud_id) if views_loader else ()
        response = query_subject(gateway, item.cloud_id, task.prompt_type, views)
        scores = judge_classification(gateway, response, item.ground_truth, task, judges)
        results.append(ItemResult(item.cloud_id, item.ground_truth, response, scores))
    return results


def run_caption_task(
    gateway: Gateway,
    task: EvalTask,
    judges: Sequence[str],
    views_loader: Optional[Callable[[str], Sequence[bytes]]] = None,
    similarity_providers: Sequence[str] = (),
) -> List[ItemResult]:
    results = []
    for item in task.items:
        views = views_loader(item.cloud_id) if views_loader else ()
        response = query_subject(gateway, item.cloud_id, "caption", views)
        scores, item_avg = score_caption(gateway, response, item.ground_truth, judges)
        result = ItemResult(item.cloud_id, item.ground_truth, response, scores,
                            item_average=item_avg)
        if response is not None:
            for provider_id in similarity_providers:
                vectors = gateway.embed([response, item.ground_truth],
                                        provider_id=provider_id)
                result.similarities[provider_id] = cosine_similarity(vectors[0],
                                                                     vectors[1])
        results.append(result)
    return results


def build_report(
    task_results: Optional[Mapping[str, Sequence[ItemResult]]] = None,
    judges: Sequence[str] = (),
    *,
    classification_cells: Optional[Mapping[str, float]] = None,
    caption_results: Optional[Sequence[ItemResult]] = None,
) -> EvalReport:
    """Fold per-item results into the equal-weight report.

    ``task_results`` maps a cell name ("dataset(prompt_type)") to its item
    results for classification. ``classification_cells`` feeds precomputed
    per-cell accuracies straight into the cross-cell average (golden checks
    and external aggregation). ``caption_results`` builds a captioning
    report.
    """
    if classification_cells is not None:
        report = EvalReport(kind="classification",
                            cells=dict(classification_cells))
        report.overall_average = average_equal_weight(list(classification_cells.values()))
        return report

    if caption_results is not None:
        report = EvalReport(kind="captioning")
        judge_ids = list(judges)
        for judge_id in judge_ids:
            values = []
            for item in caption_results:
                for score in item.judge_scores:
                    if score.judge_id == judge_id and isinstance(score.value, float):
                        values.append(score.value)
            if values:
                report.judge_means[judge_id] = average_equal_weight(values)
            else:
                report.coverage_notes.append(f"judge {judge_id}: no scorable items")
        excluded = sum(1 for item in caption_results if item.item_average is None)
        if excluded:
            report.coverage_notes.append(
                f"{excluded} item(s) excluded: unscorable by every judge"
            )
        if report.judge_means:
            report.caption_average = average_equal_weight(
                list(report.judge_means.values())
            )
        providers = {p for item in caption_results for p in item.similarities}
        for provider_id in sorted(providers):
            values = [item.similarities[provider_id] for item in caption_results
                      if provider_id in item.similarities]
            report.similarity_means[provider_id] = average_equal_weight(values)
        return report

    if task_results is None:
        raise EvalError("build_report needs results or precomputed cells")

    report = EvalReport(kind="classification")
    for cell, items in task_results.items():
        judge_ids = list(judges) or sorted(
            {s.judge_id for item in items for s in item.judge_scores}
        )
        per_judge = {}
        for judge_id in judge_ids:
            outcomes = []
            for item in items:
                for score in item.judge_scores:
                    if score.judge_id == judge_id:
                        outcomes.append(bool(score.value))
            if outcomes:
                per_judge[judge_id] = 100.0 * sum(outcomes) / len(outcomes)
        report.per_judge_cells[cell] = per_judge
        if per_judge:
            report.cells[cell] = average_equal_weight(list(per_judge.values()))
    if report.cells:
        report.overall_average = average_equal_weight(list(report.cells.values()))
    return report
