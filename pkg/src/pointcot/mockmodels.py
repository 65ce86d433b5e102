"""Deterministic offline model behavior for every pipeline role.

`OfflineMock` is a handler for :class:`~pointcot.gateway.MockModelProvider`;
with it bound to all roles, the whole pipeline is a pure function of its
inputs and seeds. Responses are derived from a stable hash of the request
content, so reruns and cache checks agree byte for byte.

The helpers that format responses are also used directly by tests to script
exact verdict sequences.
"""

from __future__ import annotations

import hashlib
from typing import Optional

from .gateway import ModelRequest
from .structured import extract_section, format_block

ADDED_CONSTRAINTS = (
    "- Name the single most discriminative visible feature before any other step.",
    "- End the final step by restating how the evidence supports the answer.",
)


def _stable_int(*parts: str) -> int:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def evaluator_response(label: str, relevance: str = "grounded in the object",
                       accuracy: str = "claims match the views",
                       completeness: str = "detail is sufficient",
                       refined_answer: Optional[str] = None) -> str:
    fields = {
        "label": label,
        "relevance_reason": relevance,
        "accuracy_reason": accuracy,
        "completeness_reason": completeness,
    }
    if refined_answer is not None:
        fields["refined_answer"] = refined_answer
    return format_block(fields)


def refinement_response(decision: str, instruction: str, answer: str,
                        rationale: str = "re-assessed against the references") -> str:
    return format_block({
        "decision": decision,
        "instruction": instruction,
        "answer": answer,
        "rationale": rationale,
    })


def generator_response(reasoning: str, answer: str) -> str:
    return format_block({"reasoning": reasoning, "answer": answer})


def refiner_response(prompt_text: str, analysis: str = "batch reviewed") -> str:
    return format_block({"analysis": analysis, "prompt_text": prompt_text})


class OfflineMock:
    """Role-keyed deterministic responses.

    Evaluator verdicts follow a configurable KEEP/IMPROVE/INVALID mix chosen
    per sample by content hash. The prompt refiner appends one known
    constraint per iteration and then stabilizes, which drives the prompt
    loop to convergence.
    """

    def __init__(self, keep_pct: int = 60, improve_pct: int = 20, seed: int = 0):
        if keep_pct + improve_pct > 100:
            raise ValueError("verdict mix exceeds 100%")
        self.keep_pct = keep_pct
        self.improve_pct = improve_pct
        self.seed = seed

    # -- role handlers -------------------------------------------------------

    def __call__(self, request: ModelRequest) -> str:
        role = request.role
        if role == "evaluator":
            if extract_section(request.prompt_text, "Failed instruction") is not None:
                return self._refinement(request)
            return self._evaluate(request)
        if role == "cot_generator":
            return self._generate(request)
        if role == "prompt_refiner":
            return self._refine_prompt(request)
        if role == "judge":
            return self._judge(request)
        if role == "caption_gt_generator":
            return self._caption(request)
        if role == "subject_model":
            return self._subject(request)
        raise ValueError(f"offline mock has no handler for role {role!r}")

    def _evaluate(self, request: ModelRequest) -> str:
        instruction = extract_section(request.prompt_text, "Instruction") or ""
        answer = extract_section(request.prompt_text, "Answer") or ""
        bucket = _stable_int("verdict", str(self.seed), instruction, answer) % 100
        if bucket < self.keep_pct:
            return evaluator_response("KEEP")
        if bucket < self.keep_pct + self.improve_pct:
            return evaluator_response(
                "IMPROVE",
                accuracy="the stated color disagrees with the views",
                refined_answer=f"{answer} (colors corrected against the views)",
            )
        return evaluator_response(
            "INVALID", relevance="the question is unrelated to the visible object"
        )

    def _refinement(self, request: ModelRequest) -> str:
        instruction = extract_section(request.prompt_text, "Failed instruction") or ""
        answer = extract_section(request.prompt_text, "Failed answer") or ""
        references = extract_section(request.prompt_text, "Reference pairs") or ""
        token = _stable_int("refine", str(self.seed), instruction, answer)
        if token % 2 == 0:
            return refinement_response(
                "answer_refined", instruction,
                f"{answer} (grounded against the verified references)",
            )
        return refinement_response(
            "pair_regenerated",
            f"What is the most distinctive visible feature of this object? ({token % 9973})",
            f"Its most distinctive feature is the surface pattern variant {token % 9973}.",
            rationale=f"question was off-topic; wrote a new pair distinct from "
                      f"{references.count(chr(10)) + 1} references",
        )

    def _generate(self, request: ModelRequest) -> str:
        instruction = extract_section(request.prompt_text, "Instruction") or ""
        answer = extract_section(request.prompt_text, "Verified answer") or ""
        token = _stable_int("cot", instruction, answer) % 997
        reasoning = (
            f"Step 1: The silhouette and proportions narrow the object down (cue {token}).\n"
            f"Step 2: Visible part structure is consistent with the question '{instruction[:60]}'.\n"
            f"Step 3: Combining both cues leads to the stated conclusion."
        )
        return generator_response(reasoning, answer)

    def _refine_prompt(self, request: ModelRequest) -> str:
        current = extract_section(request.prompt_text, "Current prompt") or ""
        for constraint in ADDED_CONSTRAINTS:
            if constraint not in current:
                return refiner_response(
                    current + "\n" + constraint,
                    analysis="snippets showed weakly grounded openings; tightened one rule",
                )
        return refiner_response(current, analysis="no systematic failures left")

    def _judge(self, request: ModelRequest) -> str:
        labels_text = extract_section(request.prompt_text, "Allowed labels")
        response = extract_section(request.prompt_text, "Response") or ""
        if labels_text is not None:  # closed-set label mapping
            labels = [line for line in labels_text.split("\n") if line]
            chosen = labels[0] if labels else ""
            lowered = response.lower()
            for label in labels:
                if label.lower() in lowered:
                    chosen = label
                    break
            return format_block({"label": chosen})
        reference = extract_section(request.prompt_text, "Reference") or ""
        if extract_section(request.prompt_text, "Candidate caption") is not None:
            candidate = extract_section(request.prompt_text, "Candidate caption") or ""
            score = 35 + _stable_int("caption-score", candidate, reference) % 56
            return format_block({"score": str(score)})
        same = any(
            tok and tok in response.lower()
            for tok in reference.lower().split()
            if len(tok) >= 4
        )
        return format_block({"same_category": "true" if same else "false"})

    def _caption(self, request: ModelRequest) -> str:
        sig = hashlib.sha256(b"".join(request.images)).hexdigest()[:6]
        return format_block(
            {"caption": f"A compact synthetic object with surface signature {sig}."}
        )

    def _subject(self, request: ModelRequest) -> str:
        sig = hashlib.sha256(b"".join(request.images)).hexdigest()[:6]
        return f"It appears to be a synthetic object with signature {sig}."
