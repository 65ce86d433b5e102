"""Human-in-the-loop optimization of the reasoning-generation prompt.

The loop alternates three moves: sample a batch of reasoning snippets under
the current prompt, let the refiner model propose a candidate prompt from
that batch, and gate the candidate behind an explicit human accept/reject
decision. Accepting retires the previous prompt and increments the
iteration; the operator finalizes the surviving prompt for large-scale
synthesis.

State lives in an append-only event log (init, batch, candidate, decision,
finalize) and every view of it is a fold over the events, which makes the
human gate tamper-evident: a prompt can only become active through the
initialization event or an accept decision, and replaying the log
reconstructs the exact store state.
"""

from __future__ import annotations

import difflib
import json
import random
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .corpus import Corpus
from .gateway import Gateway, ModelRequest
from .prompt_assets import load_prompt
from .structured import (
    FieldSpec,
    StructuredParseError,
    format_section,
    parse_structured,
)

GENERATOR_SCHEMA = (FieldSpec("reasoning"), FieldSpec("answer"))
REFINER_SCHEMA = (FieldSpec("analysis", required=False), FieldSpec("prompt_text"))

DEFAULT_BATCH_SIZE = 100  # representative sample per optimization iteration
DEFAULT_SNIPPET_CHAR_BUDGET = 1200

TRUNCATION_MARK = " …[truncated]"


class PromptStoreError(Exception):
    pass


@dataclass(frozen=True)
class HumanDecision:
    decision: str  # "accept" | "reject"
    reviewer: str
    note: str = ""
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.decision not in ("accept", "reject"):
            raise PromptStoreError(f"unknown decision {self.decision!r}")
        if not self.reviewer.strip():
            raise PromptStoreError("decision requires a reviewer name")


@dataclass(frozen=True)
class Snippet:
    sample_id: str
    cloud_id: str
    instruction: str
    answer: str
    text: str
    parse_ok: bool

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id, "cloud_id": self.cloud_id,
            "instruction": self.instruction, "answer": self.answer,
            "text": self.text, "parse_ok": self.parse_ok,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Snippet":
        return cls(sample_id=obj["sample_id"], cloud_id=obj["cloud_id"],
                   instruction=obj["instruction"], answer=obj["answer"],
                   text=obj["text"], parse_ok=obj["parse_ok"])


@dataclass(frozen=True)
class CoTBatch:
    batch_id: str
    prompt_id: str
    seed: int
    snippets: Tuple[Snippet, ...]

    @property
    def size(self) -> int:
        return len(self.snippets)

    @property
    def parse_failures(self) -> int:
        return sum(1 for s in self.snippets if not s.parse_ok)


@dataclass
class PromptVersion:
    prompt_id: str
    iteration_k: int
    text: str
    state: str  # draft | candidate | active | rejected | retired
    parent_id: Optional[str] = None
    batch_id: Optional[str] = None
    decision: Optional[HumanDecision] = None
    diff: Optional[str] = None  # unified diff against the parent
    no_change: bool = False
    created_at: float = 0.0


def unified_diff(parent_text: str, candidate_text: str) -> str:
    lines = difflib.unified_diff(
        parent_text.splitlines(), candidate_text.splitlines(),
        fromfile="parent", tofile="candidate", lineterm="",
    )
    return "\n".join(lines)


class PromptStore:
    """Fold over the append-only event log; optionally file-backed."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self._events: List[dict] = []
        self._prompts: Dict[str, PromptVersion] = {}
        self._batches: Dict[str, CoTBatch] = {}
        self._order: List[str] = []  # prompt ids in creation order
        self._active_id: Optional[str] = None
        self._finalized_id: Optional[str] = None
        self._decision_order: List[str] = []  # candidate ids in decision order
        self._lock = threading.RLock()
        if self.path and self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._apply(json.loads(line))

    # -- event plumbing -----------------------------------------------------

    def _append(self, event: dict) -> None:
        event = dict(event, ts=event.get("ts", time.time()))
        self._apply(event)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, ensure_ascii=False, separators=(",", ":")) + "\n")

    def _next_prompt_id(self) -> str:
        return f"pv{len(self._order) + 1:04d}"

    def _next_batch_id(self) -> str:
        return f"batch{len(self._batches) + 1:04d}"

    def _apply(self, event: dict) -> None:
        self._events.append(event)
        kind = event["event"]
        if kind == "init":
            version = PromptVersion(
                prompt_id=event["prompt_id"], iteration_k=0, text=event["text"],
                state="active", created_at=event.get("ts", 0.0),
            )
            self._prompts[version.prompt_id] = version
            self._order.append(version.prompt_id)
            self._active_id = version.prompt_id
        elif kind == "batch":
            batch = CoTBatch(
                batch_id=event["batch_id"], prompt_id=event["prompt_id"],
                seed=event["seed"],
                snippets=tuple(Snippet.from_json(s) for s in event["snippets"]),
            )
            self._batches[batch.batch_id] = batch
        elif kind == "candidate":
            parent = self._prompts[event["parent_id"]]
            version = PromptVersion(
                prompt_id=event["prompt_id"],
                iteration_k=parent.iteration_k + 1,
                text=event["text"], state="candidate",
                parent_id=parent.prompt_id, batch_id=event["batch_id"],
                diff=unified_diff(parent.text, event["text"]),
                no_change=event["text"] == parent.text,
                created_at=event.get("ts", 0.0),
            )
            self._prompts[version.prompt_id] = version
            self._order.append(version.prompt_id)
        elif kind == "decision":
            candidate = self._prompts[event["prompt_id"]]
            decision = HumanDecision(
                decision=event["decision"], reviewer=event["reviewer"],
                note=event.get("note", ""), timestamp=event.get("ts", 0.0),
            )
            candidate.decision = decision
            self._decision_order.append(candidate.prompt_id)
            if decision.decision == "accept":
                previous = self._prompts[self._active_id]
                previous.state = "retired"
                candidate.state = "active"
                candidate.iteration_k = self._prompts[candidate.parent_id].iteration_k + 1
                self._active_id = candidate.prompt_id
            else:
                candidate.state = "rejected"
        elif kind == "finalize":
            self._finalized_id = event["prompt_id"]
        else:
            raise PromptStoreError(f"unknown event kind {kind!r}")

    def events(self) -> List[dict]:
        return list(self._events)

    @classmethod
    def replay(cls, events: Sequence[dict]) -> "PromptStore":
        store = cls(path=None)
        for event in events:
            store._apply(event)
        return store

    # -- queries ------------------------------------------------------------

    def initialized(self) -> bool:
        return self._active_id is not None

    def active(self) -> PromptVersion:
        if self._active_id is None:
            raise PromptStoreError("prompt store not initialized")
        return self._prompts[self._active_id]

    def get(self, prompt_id: str) -> PromptVersion:
        if prompt_id not in self._prompts:
            raise PromptStoreError(f"unknown prompt {prompt_id!r}")
        return self._prompts[prompt_id]

    def get_batch(self, batch_id: str) -> CoTBatch:
        if batch_id not in self._batches:
            raise PromptStoreError(f"unknown batch {batch_id!r}")
        return self._batches[batch_id]

    def list_prompts(self) -> List[PromptVersion]:
        return [self._prompts[pid] for pid in self._order]

    def pending_candidates(self) -> List[PromptVersion]:
        return [p for p in self.list_prompts() if p.state == "candidate"]

    def list_batches(self) -> List[CoTBatch]:
        return [self._batches[bid] for bid in sorted(self._batches)]

    def finalized(self) -> Optional[PromptVersion]:
        return self._prompts.get(self._finalized_id) if self._finalized_id else None

    # -- commands -----------------------------------------------------------

    def init_prompt(self, text: str) -> PromptVersion:
        with self._lock:
            if self._active_id is not None:
                raise PromptStoreError("an active prompt already exists")
            if not text.strip():
                raise PromptStoreError("initial prompt text must be non-empty")
            prompt_id = self._next_prompt_id()
            self._append({"event": "init", "prompt_id": prompt_id, "text": text})
            return self._prompts[prompt_id]

    def record_batch(self, prompt_id: str, seed: int,
                     snippets: Sequence[Snippet]) -> CoTBatch:
        with self._lock:
            if self.active().prompt_id != prompt_id:
                raise PromptStoreError("batches are generated under the active prompt")
            batch_id = self._next_batch_id()
            self._append({
                "event": "batch", "batch_id": batch_id, "prompt_id": prompt_id,
                "seed": seed, "snippets": [s.to_json() for s in snippets],
            })
            return self._batches[batch_id]

    def add_candidate(self, text: str, batch_id: str) -> PromptVersion:
        with self._lock:
            active = self.active()
            batch = self.get_batch(batch_id)
            if batch.prompt_id != active.prompt_id:
                raise PromptStoreError(
                    "candidate must come from a batch of the active prompt"
                )
            prompt_id = self._next_prompt_id()
            self._append({
                "event": "candidate", "prompt_id": prompt_id,
                "parent_id": active.prompt_id, "batch_id": batch_id, "text": text,
            })
            return self._prompts[prompt_id]

    def apply_decision(self, candidate_id: str, decision: HumanDecision) -> PromptVersion:
        with self._lock:
            candidate = self.get(candidate_id)
            if candidate.decision is not None:
                raise PromptStoreError(f"{candidate_id}: decision already recorded")
            if candidate.state != "candidate":
                raise PromptStoreError(
                    f"{candidate_id}: decisions apply to candidates, not "
                    f"{candidate.state!r}"
                )
            if decision.decision == "accept" and candidate.parent_id != self._active_id:
                # Accepting a stale sibling would break iteration monotonicity.
                raise PromptStoreError(
                    f"{candidate_id}: parent prompt is no longer active; reject instead"
                )
            self._append({
                "event": "decision", "prompt_id": candidate_id,
                "decision": decision.decision, "reviewer": decision.reviewer,
                "note": decision.note,
            })
            return self._prompts[candidate_id]

    def finalize(self) -> PromptVersion:
        with self._lock:
            active = self.active()
            self._append({"event": "finalize", "prompt_id": active.prompt_id})
            return active

    def check_convergence(self) -> Tuple[bool, str]:
        """Converged when the operator finalized, or when the last accepted
        candidate changed nothing (the refiner has stabilized)."""
        if self._finalized_id is not None:
            return True, f"finalized as {self._finalized_id}"
        for pid in reversed(self._decision_order):
            prompt = self._prompts[pid]
            if prompt.decision and prompt.decision.decision == "accept":
                if prompt.no_change:
                    return True, f"accepted candidate {pid} proposed no change"
                return False, f"last accepted candidate {pid} still changed the prompt"
        return False, "no accepted candidate yet"

    # -- invariant checks (used by tests and status reporting) --------------

    def check_invariants(self) -> List[str]:
        problems = []
        if self._active_id is not None:
            actives = [p for p in self._prompts.values() if p.state == "active"]
            if len(actives) != 1:
                problems.append(f"expected exactly one active prompt, found {len(actives)}")
        iters = [
            self._prompts[pid].iteration_k
            for pid in self._order
            if self._prompts[pid].state in ("active", "retired")
        ]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            problems.append(f"active-prompt iterations not strictly increasing: {iters}")
        for prompt in self._prompts.values():
            if prompt.state in ("active", "retired") and prompt.parent_id is not None:
                if prompt.decision is None or prompt.decision.decision != "accept":
                    problems.append(f"{prompt.prompt_id} became active without an accept")
            if prompt.parent_id is not None and prompt.batch_id is not None:
                batch = self._batches.get(prompt.batch_id)
                if batch is None or batch.prompt_id != prompt.parent_id:
                    problems.append(f"{prompt.prompt_id} batch provenance broken")
        return problems


# ---------------------------------------------------------------------------
# Loop operations


ViewsLoader = Callable[[str], Sequence[bytes]]


def init_prompt(store: PromptStore, text: Optional[str] = None) -> PromptVersion:
    """Install the manually crafted starting prompt (iteration 0, active)."""
    return store.init_prompt(text if text is not None else load_prompt("generator_v0"))


def generate_sample_batch(
    store: PromptStore,
    corpus: Corpus,
    gateway: Gateway,
    n: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
    views_loader: Optional[ViewsLoader] = None,
) -> CoTBatch:
    """Draw ``n`` distinct samples (seeded, uniform, without replacement) and
    run each through the reasoning generator under the active prompt.

    Per-snippet parse failures are recorded, never fatal: the batch is the
    refiner's evidence, and failures are exactly what it needs to see.
    """
    active = store.active()
    if len(corpus) < n:
        raise PromptStoreError(f"corpus has {len(corpus)} samples, need {n}")
    rng = random.Random(seed)
    indices = rng.sample(range(len(corpus)), n)
    snippets = []
    for idx in indices:
        sample = corpus.samples[idx]
        prompt = "\n\n".join([
            active.text,
            format_section("Instruction", sample.instruction),
            format_section("Verified answer", sample.answer),
        ])
        images = tuple(views_loader(sample.cloud_id)) if views_loader else ()
        response = gateway.complete(
            ModelRequest(role="cot_generator", prompt_text=prompt, images=images)
        )
        try:
            doc = parse_structured(response.text, GENERATOR_SCHEMA)
            text, parse_ok = doc["reasoning"], True
        except StructuredParseError:
            text, parse_ok = response.text, False
        snippets.append(Snippet(
            sample_id=sample.sample_id, cloud_id=sample.cloud_id,
            instruction=sample.instruction, answer=sample.answer,
            text=text, parse_ok=parse_ok,
        ))
    return store.record_batch(active.prompt_id, seed, snippets)


def serialize_batch(batch: CoTBatch,
                    char_budget: int = DEFAULT_SNIPPET_CHAR_BUDGET) -> str:
    """Refiner-facing rendering of a batch; long snippets are cut at the
    character budget with the truncation marked inline."""
    parts = []
    for i, snippet in enumerate(batch.snippets, start=1):
        text = snippet.text
        if len(text) > char_budget:
            text = text[:char_budget] + TRUNCATION_MARK
        parts.append(
            f"--- snippet {i} (parse_ok={str(snippet.parse_ok).lower()}) ---\n"
            f"instruction: {snippet.instruction}\n"
            f"verified answer: {snippet.answer}\n"
            f"reasoning:\n{text}"
        )
    return "\n".join(parts)


def propose_refinement(
    store: PromptStore,
    batch: CoTBatch,
    gateway: Gateway,
    char_budget: int = DEFAULT_SNIPPET_CHAR_BUDGET,
) -> PromptVersion:
    """Ask the refiner model for a candidate prompt built from the batch.

    The candidate is stored with its parent link and a unified diff against
    the parent; identical text is flagged ``no_change`` (the convergence
    signal). Unparseable refiner output creates no candidate.
    """
    active = store.active()
    if batch.prompt_id != active.prompt_id:
        raise PromptStoreError("batch does not belong to the active prompt")
    prompt = "\n\n".join([
        load_prompt("prompt_refiner"),
        format_section("Current prompt", active.text),
        format_section("Sample batch", serialize_batch(batch, char_budget)),
    ])
    response = gateway.complete(ModelRequest(role="prompt_refiner", prompt_text=prompt))
    doc = parse_structured(response.text, REFINER_SCHEMA)  # raises on failure
    return store.add_candidate(doc["prompt_text"], batch.batch_id)


def check_convergence(store: PromptStore) -> Tuple[bool, str]:
    return store.check_convergence()
