"""Versioned prompt text assets.

Prompts ship as plain text files so runs can hash-pin the exact wording they
used; run manifests record the hash of every asset involved.
"""

from __future__ import annotations

import hashlib
from importlib import resources

ASSET_NAMES = (
    "evaluator",
    "refinement",
    "generator_v0",
    "prompt_refiner",
    "judge_closed_set",
    "judge_open_ended",
    "judge_caption",
    "caption_gt",
)


def load_prompt(name: str) -> str:
    if name not in ASSET_NAMES:
        raise KeyError(f"unknown prompt asset {name!r}")
    ref = resources.files("pointcot").joinpath("prompts").joinpath(f"{name}.txt")
    return ref.read_text(encoding="utf-8")


def prompt_hash(name: str) -> str:
    return hashlib.sha256(load_prompt(name).encode("utf-8")).hexdigest()[:16]


def all_prompt_hashes() -> dict:
    return {name: prompt_hash(name) for name in ASSET_NAMES}
