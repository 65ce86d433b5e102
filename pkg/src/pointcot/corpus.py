"""Domain types, corpus ingestion, and line-oriented corpus storage.

A corpus file is UTF-8 JSONL: the first line is a header record
``{"schema_version": 1, "kind": "instruction"|"cot"}`` and every following
line is one sample record. Field order is canonical so that saving a loaded
corpus reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SOURCES = ("shapellm_sft", "cap3d_caption", "regenerated")

# Instruction attached to caption-only records. One fixed string (not a
# sampled pool) keeps re-ingestion deterministic; override via config.
DEFAULT_CAPTION_INSTRUCTION = "Describe this object."


class CorpusError(Exception):
    """Invariant violation or unusable corpus input."""


def make_sample_id(cloud_id: str, instruction: str, answer: str, source: str) -> str:
    """Content hash so re-ingesting identical inputs yields identical ids."""
    h = hashlib.sha256()
    for part in (cloud_id, instruction, answer, source):
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class LineageRecord:
    """One transformation a sample has passed through."""

    stage: str
    prior: Optional[str] = None  # sample_id before the transformation
    verdict: Optional[str] = None  # evaluator label that caused it, if any

    def to_json(self) -> dict:
        return {"stage": self.stage, "prior": self.prior, "verdict": self.verdict}

    @classmethod
    def from_json(cls, obj: dict) -> "LineageRecord":
        return cls(stage=obj["stage"], prior=obj.get("prior"), verdict=obj.get("verdict"))


@dataclass(frozen=True)
class InstructionSample:
    sample_id: str
    cloud_id: str
    instruction: str
    answer: str
    source: str
    lineage: tuple[LineageRecord, ...] = ()

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise CorpusError(f"sample {self.sample_id!r}: empty instruction")
        if not self.answer.strip():
            raise CorpusError(f"sample {self.sample_id!r}: empty answer")
        if self.source not in SOURCES:
            raise CorpusError(f"sample {self.sample_id!r}: unknown source {self.source!r}")

    def with_lineage(self, record: LineageRecord) -> "InstructionSample":
        return replace(self, lineage=self.lineage + (record,))

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "cloud_id": self.cloud_id,
            "instruction": self.instruction,
            "answer": self.answer,
            "source": self.source,
            "lineage": [rec.to_json() for rec in self.lineage],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InstructionSample":
        return cls(
            sample_id=obj["sample_id"],
            cloud_id=obj["cloud_id"],
            instruction=obj["instruction"],
            answer=obj["answer"],
            source=obj["source"],
            lineage=tuple(LineageRecord.from_json(rec) for rec in obj.get("lineage", [])),
        )


@dataclass(frozen=True)
class CoTSample:
    """Instruction sample enriched with an explicit reasoning path."""

    sample_id: str
    cloud_id: str
    instruction: str
    reasoning: str
    answer: str
    prompt_version_id: str
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise CorpusError(f"sample {self.sample_id!r}: empty instruction")
        if not self.answer.strip():
            raise CorpusError(f"sample {self.sample_id!r}: empty answer")
        # Empty reasoning is only legal for the no-reasoning ablation arm.
        if "cot_skipped" not in self.flags:
            if not self.reasoning.strip():
                raise CorpusError(f"sample {self.sample_id!r}: empty reasoning")
            if self.reasoning.strip() == self.answer.strip():
                raise CorpusError(
                    f"sample {self.sample_id!r}: reasoning must be distinct from answer"
                )

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "cloud_id": self.cloud_id,
            "instruction": self.instruction,
            "reasoning": self.reasoning,
            "answer": self.answer,
            "prompt_version_id": self.prompt_version_id,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CoTSample":
        return cls(
            sample_id=obj["sample_id"],
            cloud_id=obj["cloud_id"],
            instruction=obj["instruction"],
            reasoning=obj["reasoning"],
            answer=obj["answer"],
            prompt_version_id=obj["prompt_version_id"],
            flags=tuple(obj.get("flags", [])),
        )


Sample = Union[InstructionSample, CoTSample]


@dataclass
class Corpus:
    name: str
    kind: str  # "instruction" | "cot"
    samples: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.kind not in ("instruction", "cot"):
            raise CorpusError(f"unknown corpus kind {self.kind!r}")
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise CorpusError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def add(self, sample: Sample) -> None:
        if any(s.sample_id == sample.sample_id for s in self.samples):
            raise CorpusError(f"duplicate sample_id {sample.sample_id!r}")
        self.samples.append(sample)

    def sample_ids(self) -> set:
        return {s.sample_id for s in self.samples}

    def cloud_ids(self) -> set:
        return {s.cloud_id for s in self.samples}


@dataclass(frozen=True)
class RejectedRecord:
    line_no: int
    reason: str


@dataclass
class IngestResult:
    corpus: Corpus
    rejects: list

    @property
    def reject_count(self) -> int:
        return len(self.rejects)


def ingest_instruction_corpus(
    lines: Iterable[str],
    source: str,
    name: str = "ingested",
    caption_instruction: str = DEFAULT_CAPTION_INSTRUCTION,
) -> IngestResult:
    """Ingest external instruction records (JSONL) into a fresh corpus.

    Two record shapes are accepted:

    - ``{"cloud_id": ..., "instruction": ..., "answer": ...}``
    - ``{"cloud_id": ..., "caption": ...}`` -- caption becomes the answer to
      the standardized ``caption_instruction``.

    Malformed records are rejected with their line number and ingestion
    continues; a duplicate sample_id is fatal because it means the input
    itself contains byte-identical samples under one source.
    """
    if source not in SOURCES:
        raise CorpusError(f"unknown source {source!r}")
    corpus = Corpus(name=name, kind="instruction")
    rejects: list[RejectedRecord] = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append(RejectedRecord(line_no, f"invalid JSON: {exc}"))
            continue
        if not isinstance(obj, dict):
            rejects.append(RejectedRecord(line_no, "record is not an object"))
            continue
        cloud_id = obj.get("cloud_id")
        if not isinstance(cloud_id, str) or not cloud_id:
            rejects.append(RejectedRecord(line_no, "missing cloud_id"))
            continue
        if "caption" in obj and "instruction" not in obj:
            instruction = caption_instruction
            answer = obj.get("caption")
        else:
            instruction = obj.get("instruction")
            answer = obj.get("answer")
        if not isinstance(instruction, str) or not instruction.strip():
            rejects.append(RejectedRecord(line_no, "missing or empty instruction"))
            continue
        if not isinstance(answer, str) or not answer.strip():
            rejects.append(RejectedRecord(line_no, "missing or empty answer"))
            continue
        sample = InstructionSample(
            sample_id=make_sample_id(cloud_id, instruction, answer, source),
            cloud_id=cloud_id,
            instruction=instruction,
            answer=answer,
            source=source,
            lineage=(LineageRecord(stage="ingested"),),
        )
        corpus.add(sample)  # duplicate sample_id raises CorpusError (fatal)
    return IngestResult(corpus=corpus, rejects=rejects)


# ---------------------------------------------------------------------------
# Point clouds


@dataclass
class PointCloud:
    """Normalized colored point set: centroid at origin, max norm 1."""

    cloud_id: str
    xyz: np.ndarray  # (N, 3) float64
    rgb: Optional[np.ndarray] = None  # (N, 3) float64 in [0, 1]
    extent: float = 1.0  # max point norm before scaling (0 for degenerate clouds)

    def __post_init__(self) -> None:
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3 or self.xyz.shape[0] == 0:
            raise CorpusError(f"cloud {self.cloud_id!r}: need a non-empty (N, 3) array")
        if not np.isfinite(self.xyz).all():
            raise CorpusError(f"cloud {self.cloud_id!r}: non-finite coordinate")
        if self.rgb is not None and self.rgb.shape != self.xyz.shape:
            raise CorpusError(f"cloud {self.cloud_id!r}: color shape mismatch")

    @property
    def n_points(self) -> int:
        return int(self.xyz.shape[0])


def normalize_cloud(
    raw_points: np.ndarray,
    cloud_id: str,
    colors: Optional[np.ndarray] = None,
) -> PointCloud:
    """Center at the centroid and scale so the max point norm is 1.

    Degenerate clouds whose points all coincide get extent 0 and stay at the
    origin (the max-norm invariant is waived for them); real scans can
    collapse like this under aggressive subsampling.
    """
    pts = np.asarray(raw_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise CorpusError(f"cloud {cloud_id!r}: need a non-empty (N, 3) array")
    if not np.isfinite(pts).all():
        raise CorpusError(f"cloud {cloud_id!r}: non-finite coordinate")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    extent = float(np.linalg.norm(centered, axis=1).max())
    if extent > 0.0:
        centered = centered / extent
    rgb = None
    if colors is not None:
        rgb = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)
    return PointCloud(cloud_id=cloud_id, xyz=centered, rgb=rgb, extent=extent)


# ---------------------------------------------------------------------------
# Corpus storage

_SAMPLE_TYPES = {"instruction": InstructionSample, "cot": CoTSample}


def _sample_line(sample: Sample) -> str:
    return json.dumps(sample.to_json(), ensure_ascii=False, separators=(",", ":"))


def save_corpus(corpus: Corpus, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema_version": corpus.schema_version, "kind": corpus.kind, "name": corpus.name}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")) + "\n")
        for sample in corpus.samples:
            fh.write(_sample_line(sample) + "\n")
    tmp.replace(path)


@dataclass
class LoadResult:
    corpus: Corpus
    truncated: bool = False
    dropped_line: Optional[int] = None


def load_corpus(path: Union[str, Path]) -> LoadResult:
    """Load a corpus file; a truncated final line is dropped and reported."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    lines = raw.split("\n")
    # A well-formed file ends with "\n", so the final split element is "".
    truncated = bool(lines and lines[-1] != "")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusError(f"{path}: empty corpus file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CorpusError(
            f"{path}: schema_version {version!r} not supported (expected {SCHEMA_VERSION})"
        )
    kind = header.get("kind")
    if kind not in _SAMPLE_TYPES:
        raise CorpusError(f"{path}: unknown corpus kind {kind!r}")
    sample_type = _SAMPLE_TYPES[kind]
    corpus = Corpus(name=header.get("name", path.stem), kind=kind)
    dropped_line = None
    for idx, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            corpus.add(sample_type.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as exc:
            if truncated and idx == len(lines):
                dropped_line = idx
                logger.warning("%s: final line %d truncated mid-record, dropped", path, idx)
                break
            raise CorpusError(f"{path}: unreadable record at line {idx}: {exc}") from exc
    if truncated and dropped_line is None:
        # Final line parsed despite the missing newline; report but keep it.
        logger.warning("%s: file does not end with a newline", path)
    return LoadResult(corpus=corpus, truncated=truncated, dropped_line=dropped_line)
