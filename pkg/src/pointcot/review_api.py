"""HTTP review server for the prompt-optimization human gate.

Serves the browser review UI: reviewers inspect the active prompt, candidate
diffs, and the attached sample batch (with rendered views), then accept or
reject candidates and finalize the production prompt. The server is the sole
writer of the prompt event log while a review session runs; every request
folds the log fresh so concurrent CLI reads stay consistent.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .promptloop import HumanDecision, PromptStore, PromptStoreError

_VIEW_FILE_RE = re.compile(r"^([1-4])\.png$")


class DecisionBody(BaseModel):
    decision: str
    reviewer: str
    note: str = ""


def _prompt_json(version) -> dict:
    return {
        "prompt_id": version.prompt_id,
        "iteration_k": version.iteration_k,
        "state": version.state,
        "parent_id": version.parent_id,
        "batch_id": version.batch_id,
        "no_change": version.no_change,
        "created_at": version.created_at,
        "decision": None if version.decision is None else {
            "decision": version.decision.decision,
            "reviewer": version.decision.reviewer,
            "note": version.decision.note,
            "timestamp": version.decision.timestamp,
        },
    }


def create_app(
    events_path: Union[str, Path],
    views_dir: Union[str, Path],
    static_dir: Optional[Union[str, Path]] = None,
) -> FastAPI:
    events_path = Path(events_path)
    views_dir = Path(views_dir)
    app = FastAPI(title="prompt review")

    def store() -> PromptStore:
        return PromptStore(events_path)

    @app.get("/api/prompts")
    def list_prompts() -> list:
        return [_prompt_json(p) for p in store().list_prompts()]

    @app.get("/api/prompts/active")
    def active_prompt() -> dict:
        s = store()
        if not s.initialized():
            raise HTTPException(status_code=404, detail="no active prompt yet")
        version = s.active()
        data = _prompt_json(version)
        data["text"] = version.text
        final = s.finalized()
        data["finalized"] = final is not None and final.prompt_id == version.prompt_id
        return data

    @app.get("/api/candidates/pending")
    def pending() -> list:
        # Newest first: reviewers handle the most recent proposal first.
        return [_prompt_json(p) for p in reversed(store().pending_candidates())]

    @app.get("/api/candidates/{candidate_id}")
    def candidate_detail(candidate_id: str) -> dict:
        s = store()
        try:
            version = s.get(candidate_id)
        except PromptStoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if version.parent_id is None:
            raise HTTPException(status_code=404, detail=f"{candidate_id} is not a candidate")
        parent = s.get(version.parent_id)
        snippets = []
        parse_failures = 0
        if version.batch_id is not None:
            batch = s.get_batch(version.batch_id)
            parse_failures = batch.parse_failures
            for snippet in batch.snippets:
                snippets.append({
                    "sample_id": snippet.sample_id,
                    "cloud_id": snippet.cloud_id,
                    "instruction": snippet.instruction,
                    "answer": snippet.answer,
                    "reasoning": snippet.text,
                    "parse_ok": snippet.parse_ok,
                    "views": [
                        f"/api/views/{snippet.cloud_id}/{i}.png" for i in range(1, 5)
                    ],
                })
        data = _prompt_json(version)
        data.update({
            "candidate_text": version.text,
            "parent_text": parent.text,
            "diff": version.diff,
            "snippets": snippets,
            "parse_stats": {"size": len(snippets), "parse_failures": parse_failures},
        })
        return data

    @app.post("/api/candidates/{candidate_id}/decision")
    def decide(candidate_id: str, body: DecisionBody) -> dict:
        s = store()
        try:
            s.get(candidate_id)
        except PromptStoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        try:
            decision = HumanDecision(decision=body.decision, reviewer=body.reviewer,
                                     note=body.note)
        except PromptStoreError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        try:
            version = s.apply_decision(candidate_id, decision)
        except PromptStoreError as exc:
            # Already decided, or a stale accept: the review state moved on.
            raise HTTPException(status_code=409, detail=str(exc))
        return {
            "prompt_id": version.prompt_id,
            "state": version.state,
            "iteration_k": version.iteration_k,
            "active_prompt_id": s.active().prompt_id,
        }

    @app.post("/api/finalize")
    def finalize() -> dict:
        s = store()
        try:
            version = s.finalize()
        except PromptStoreError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"finalized": version.prompt_id, "iteration_k": version.iteration_k}

    @app.get("/api/views/{cloud_id}/{filename}")
    def view_png(cloud_id: str, filename: str):
        match = _VIEW_FILE_RE.match(filename)
        if match is None:
            raise HTTPException(status_code=404, detail="views are named 1.png .. 4.png")
        path = views_dir / f"{cloud_id}_v{match.group(1)}.png"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no rendered view for {cloud_id}")
        return FileResponse(path, media_type="image/png")

    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
