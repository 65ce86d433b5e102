"""End-to-end pipeline runs with durable stage boundaries.

Stages run in order: ingest, render, stage1, hilpo, stage2, export. After
each stage the manifest is written atomically with a checksum of every
output file, so a rerun skips stages whose outputs are intact, resumes ones
that were interrupted, and refuses to trust a marker whose files changed
underneath it (integrity failure).

One run per output directory is enforced with a lock marker file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from .config import PipelineConfig
from .corpus import Corpus, CorpusError, load_corpus, save_corpus
from .gateway import Gateway, build_provider
from .mockmodels import OfflineMock
from .pcio import CloudStore
from .prompt_assets import all_prompt_hashes
from .promptloop import (
    HumanDecision,
    PromptStore,
    PromptStoreError,
    generate_sample_batch,
    init_prompt,
    propose_refinement,
)
from .refine import Stage1Options, run_stage1
from .render import load_view_bytes, render_to_dir
from .synth import ExportTemplate, export_training, load_cot_corpus, run_stage2

logger = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "render", "stage1", "hilpo", "stage2", "export")

LOCK_NAME = ".run_lock"


class PipelineError(Exception):
    """Stage failure; rerunning resumes from the last durable boundary."""


class IntegrityError(PipelineError):
    """A completed-stage marker no longer matches the files on disk."""


class PendingReviewError(PipelineError):
    """The prompt loop is waiting on a human decision or finalize."""


def file_checksum(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(65536):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    prompt_hashes: Dict[str, str] = field(default_factory=dict)
    stages: Dict[str, dict] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id, "config_hash": self.config_hash,
            "prompt_hashes": self.prompt_hashes, "stages": self.stages,
            "counters": self.counters,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        return cls(run_id=obj["run_id"], config_hash=obj["config_hash"],
                   prompt_hashes=obj.get("prompt_hashes", {}),
                   stages=obj.get("stages", {}), counters=obj.get("counters", {}))

    def stage_complete(self, name: str) -> bool:
        return name in self.stages


def manifest_path(outputs_dir: Path) -> Path:
    return outputs_dir / "run_manifest.json"


def save_manifest(manifest: RunManifest, outputs_dir: Path) -> None:
    path = manifest_path(outputs_dir)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_manifest(outputs_dir: Path) -> Optional[RunManifest]:
    path = manifest_path(outputs_dir)
    if not path.exists():
        return None
    return RunManifest.from_json(json.loads(path.read_text(encoding="utf-8")))


def build_gateway(config: PipelineConfig) -> Gateway:
    providers = {}
    for pconf in config.providers:
        handler = OfflineMock(seed=config.mock_seed) if pconf.kind == "mock" else None
        providers[pconf.provider_id] = build_provider(pconf, mock_handler=handler)
    return Gateway(
        providers=providers,
        bindings=config.bindings,
        cache_dir=config.cache_dir,
        audit_path=config.cache_dir / "audit.log",
        concurrency_budget=config.concurrency_budget,
    )


class _RunLock:
    def __init__(self, outputs_dir: Path):
        self.path = outputs_dir / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"another run owns {self.path.parent} (remove {self.path} if stale)"
            )
        with os.fdopen(fd, "w") as fh:
            fh.write(f"pid={os.getpid()} ts={time.time()}\n")
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def _verify_stage(manifest: RunManifest, name: str, outputs_dir: Path) -> bool:
    """True when the stage marker is present and its outputs are intact."""
    if name not in manifest.stages:
        return False
    for rel, checksum in manifest.stages[name].get("outputs", {}).items():
        path = outputs_dir / rel
        if not path.exists():
            raise IntegrityError(f"stage {name}: missing output {rel}")
        if file_checksum(path) != checksum:
            raise IntegrityError(f"stage {name}: checksum mismatch on {rel}")
    return True


def _mark_stage(manifest: RunManifest, name: str, outputs_dir: Path,
                outputs: List[Path], info: Optional[dict] = None) -> None:
    manifest.stages[name] = {
        "completed_at": time.time(),
        "outputs": {
            str(p.relative_to(outputs_dir)): file_checksum(p) for p in outputs
        },
        "info": info or {},
    }
    save_manifest(manifest, outputs_dir)


def run_pipeline(config: PipelineConfig, crash_after_stage: Optional[str] = None) -> RunManifest:
    """Execute the full pipeline under ``config``; reruns resume.

    ``crash_after_stage`` aborts right after the named stage boundary (used
    by resumability tests).
    """
    outputs = config.outputs_dir
    outputs.mkdir(parents=True, exist_ok=True)
    with _RunLock(outputs):
        manifest = load_manifest(outputs)
        if manifest is None:
            manifest = RunManifest(run_id=f"run-{config.config_hash()}",
                                   config_hash=config.config_hash(),
                                   prompt_hashes=all_prompt_hashes())
            save_manifest(manifest, outputs)
        elif manifest.config_hash != config.config_hash():
            raise PipelineError(
                "output directory belongs to a run with a different config; "
                "use a fresh outputs directory"
            )
        gateway = build_gateway(config)
        store = CloudStore(config.clouds_dir)

        for stage in STAGE_ORDER:
            if _verify_stage(manifest, stage, outputs):
                logger.info("stage %s already complete, skipping", stage)
                continue
            logger.info("running stage %s", stage)
            _STAGE_FNS[stage](config, gateway, store, manifest)
            if crash_after_stage == stage:
                raise PipelineError(f"crash injected after stage {stage}")
    return manifest


# ---------------------------------------------------------------------------
# Stage implementations


def _ingested_path(config: PipelineConfig) -> Path:
    return config.outputs_dir / "corpus_ingested.jsonl"


def _refined_path(config: PipelineConfig) -> Path:
    return config.outputs_dir / "corpus_refined.jsonl"


def _views_dir(config: PipelineConfig) -> Path:
    return config.outputs_dir / "views"


def _cot_path(config: PipelineConfig) -> Path:
    return config.outputs_dir / "corpus_cot.jsonl"


def _stage_ingest(config: PipelineConfig, gateway: Gateway, store: CloudStore,
                  manifest: RunManifest) -> None:
    from .corpus import ingest_instruction_corpus

    if not config.ingest_inputs:
        raise PipelineError("no ingest inputs configured (ingest.inputs)")
    merged = Corpus(name="ingested", kind="instruction")
    total_rejects = 0
    unresolved = 0
    for entry in config.ingest_inputs:
        lines = Path(entry["path"]).read_text(encoding="utf-8").splitlines()
        result = ingest_instruction_corpus(
            lines, entry["source"],
            caption_instruction=config.caption_instruction,
        )
        total_rejects += result.reject_count
        for sample in result.corpus.samples:
            if sample.cloud_id not in store:
                unresolved += 1
                logger.warning("dropping %s: cloud %s not in store",
                               sample.sample_id, sample.cloud_id)
                continue
            merged.add(sample)
    out = _ingested_path(config)
    save_corpus(merged, out)
    manifest.counters["ingested"] = len(merged)
    manifest.counters["ingest_rejects"] = total_rejects
    manifest.counters["ingest_unresolved_clouds"] = unresolved
    _mark_stage(manifest, "ingest", config.outputs_dir, [out],
                {"rejects": total_rejects, "unresolved_clouds": unresolved})


def _stage_render(config: PipelineConfig, gateway: Gateway, store: CloudStore,
                  manifest: RunManifest) -> None:
    corpus = load_corpus(_ingested_path(config)).corpus
    views_dir = _views_dir(config)
    written: List[Path] = []
    for cloud_id in sorted(corpus.cloud_ids()):
        written.extend(render_to_dir(store.load(cloud_id), views_dir, config.render))
    manifest.counters["rendered_clouds"] = len(corpus.cloud_ids())
    _mark_stage(manifest, "render", config.outputs_dir, written)


def _stage_stage1(config: PipelineConfig, gateway: Gateway, store: CloudStore,
                  manifest: RunManifest) -> None:
    corpus = load_corpus(_ingested_path(config)).corpus
    views_dir = _views_dir(config)
    options = Stage1Options(disable_refinement=not config.with_refinement,
                            workers=config.stage_workers)
    result = run_stage1(corpus, gateway,
                        lambda cid: load_view_bytes(views_dir, cid), options)
    refined = _refined_path(config)
    save_corpus(result.corpus, refined)
    report_path = config.outputs_dir / "stage1_report.json"
    report_path.write_text(json.dumps(result.report.to_json(), indent=2) + "\n",
                           encoding="utf-8")
    outputs = [refined, report_path]
    if result.unevaluable:
        manual = Corpus(name="manual-review", kind="instruction",
                        samples=list(result.unevaluable))
        manual_path = config.outputs_dir / "manual_review.jsonl"
        save_corpus(manual, manual_path)
        outputs.append(manual_path)
    if not result.report.conservation_holds():
        raise PipelineError("stage 1 lost samples (conservation violated)")
    manifest.counters["refined"] = len(result.corpus)
    _mark_stage(manifest, "stage1", config.outputs_dir, outputs,
                {"refinement_skipped": not config.with_refinement,
                 "report": result.report.to_json()})


def _prompt_store(config: PipelineConfig) -> PromptStore:
    return PromptStore(config.outputs_dir / "prompt_events.jsonl")


def _stage_hilpo(config: PipelineConfig, gateway: Gateway, store: CloudStore,
                 manifest: RunManifest) -> None:
    prompt_store = _prompt_store(config)
    events_path = config.outputs_dir / "prompt_events.jsonl"
    if not prompt_store.initialized():
        init_prompt(prompt_store)

    if not config.with_hilpo:
        if prompt_store.finalized() is None:
            prompt_store.finalize()
        _mark_stage(manifest, "hilpo", config.outputs_dir, [events_path],
                    {"hilpo_skipped": True,
                     "final_prompt": prompt_store.finalized().prompt_id})
        return

    corpus = load_corpus(_refined_path(config)).corpus
    views_dir = _views_dir(config)
    iterations_done = len(prompt_store.list_batches())
    while prompt_store.finalized() is None:
        converged, reason = prompt_store.check_convergence()
        if converged:
            prompt_store.finalize()
            break
        if prompt_store.pending_candidates():
            if config.hilpo_auto_review == "none":
                raise PendingReviewError(
                    "candidate prompts await review; decide via the review UI "
                    "or `hilpo finalize`, then rerun"
                )
            decision = HumanDecision(decision=config.hilpo_auto_review,
                                     reviewer=config.hilpo_reviewer,
                                     note="scripted decision (auto_review)")
            for candidate in prompt_store.pending_candidates():
                prompt_store.apply_decision(candidate.prompt_id, decision)
            continue
        if iterations_done >= config.hilpo_iterations:
            prompt_store.finalize()
            break
        n = min(config.batch_size, len(corpus))
        batch = generate_sample_batch(
            prompt_store, corpus, gateway, n=n,
            seed=config.batch_seed + iterations_done,
            views_loader=lambda cid: load_view_bytes(views_dir, cid),
        )
        propose_refinement(prompt_store, batch, gateway,
                           char_budget=config.snippet_char_budget)
        iterations_done += 1
        if config.hilpo_auto_review == "none":
            raise PendingReviewError(
                "a candidate prompt awaits review; decide via the review UI "
                "or `hilpo finalize`, then rerun"
            )
    final = prompt_store.finalized()
    _mark_stage(manifest, "hilpo", config.outputs_dir, [events_path],
                {"hilpo_skipped": False, "final_prompt": final.prompt_id,
                 "final_iteration": final.iteration_k})


def _stage_stage2(config: PipelineConfig, gateway: Gateway, store: CloudStore,
                  manifest: RunManifest) -> None:
    prompt_store = _prompt_store(config)
    final = prompt_store.finalized()
    if final is None:
        raise PipelineError("reasoning synthesis requires a finalized prompt")
    corpus = load_corpus(_refined_path(config)).corpus
    views_dir = _views_dir(config)
    out = _cot_path(config)
    job_path = config.outputs_dir / "stage2_job.json"
    job = run_stage2(
        corpus, final, gateway,
        lambda cid: load_view_bytes(views_dir, cid),
        out, job_path,
        disable_cot=not config.with_cot,
        workers=config.stage_workers,
    )
    manifest.counters["cot_records"] = job.written
    manifest.counters.update({f"stage2_{k}": v for k, v in job.counters.items()})
    _mark_stage(manifest, "stage2", config.outputs_dir, [out, job_path],
                {"disable_cot": not config.with_cot, "counters": job.counters})


def _stage_export(config: PipelineConfig, gateway: Gateway, store: CloudStore,
                  manifest: RunManifest) -> None:
    corpus = load_cot_corpus(_cot_path(config)).corpus
    template = ExportTemplate(context_template=config.export_context_template,
                              point_cloud_token=config.export_point_cloud_token)
    out = config.outputs_dir / "train_records.jsonl"
    count = export_training(corpus, template, out)
    manifest.counters["train_records"] = count
    _mark_stage(manifest, "export", config.outputs_dir, [out], {"records": count})


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "render": _stage_render,
    "stage1": _stage_stage1,
    "hilpo": _stage_hilpo,
    "stage2": _stage_stage2,
    "export": _stage_export,
}
