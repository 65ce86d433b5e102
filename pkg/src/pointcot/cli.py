"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 stage failure (rerun
resumes), 3 integrity failure (outputs no longer match the manifest).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE = 2
EXIT_INTEGRITY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors are exit code 1
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pointcot",
                     description="point-cloud reasoning data pipeline")
    parser.add_argument("--config", default="pointcot.yaml",
                        help="path to the pipeline config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate the config file")

    p = sub.add_parser("ingest", help="ingest instruction records")
    p.add_argument("--in", dest="input", required=True, help="records file (JSONL)")
    p.add_argument("--source", default=None,
                   choices=["shapellm_sft", "cap3d_caption", "regenerated"])
    p.add_argument("--out", default=None, help="output corpus path")

    p = sub.add_parser("render", help="render four views per cloud")
    p.add_argument("--clouds", default=None, help="cloud store directory")
    p.add_argument("--out", default=None, help="views output directory")

    p = sub.add_parser("stage1", help="quality evaluation and refinement")
    p.add_argument("--corpus", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--disable-refinement", action="store_true")
    p.add_argument("--verify-improved", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("hilpo", help="prompt optimization loop")
    hsub = p.add_subparsers(dest="hilpo_command", required=True)
    it = hsub.add_parser("iterate", help="generate a batch and propose a candidate")
    it.add_argument("--n", type=int, default=None, help="batch size")
    it.add_argument("--seed", type=int, default=None)
    it.add_argument("--corpus", default=None, help="refined corpus (defaults to run output)")
    sv = hsub.add_parser("serve", help="run the review API server")
    sv.add_argument("--port", type=int, default=8000)
    sv.add_argument("--host", default="127.0.0.1")
    hsub.add_parser("status", help="print loop state")
    hsub.add_parser("finalize", help="designate the active prompt for synthesis")

    p = sub.add_parser("stage2", help="large-scale reasoning synthesis")
    p.add_argument("--corpus", required=True)
    p.add_argument("--prompt-id", required=True)
    p.add_argument("--disable-cot", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("export", help="export training records")
    p.add_argument("--in", dest="input", required=True, help="reasoning corpus")
    p.add_argument("--template", default=None, help="template config (YAML/JSON)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="run the evaluation harness")
    p.add_argument("--task", required=True,
                   help="task file, or comma-separated task files for a "
                        "cross-dataset report")
    p.add_argument("--judges", default=None, help="comma-separated judge provider ids")
    p.add_argument("--similarity", default=None,
                   help="comma-separated embedding provider ids")
    p.add_argument("--views", default=None, help="rendered views directory")
    p.add_argument("--out", default=None, help="report path prefix")

    p = sub.add_parser("gen-gt", help="generate reference captions for unlabeled clouds")
    p.add_argument("--clouds", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--benchmark", default="open_ended",
                   choices=["open_ended", "captioning"])
    p.add_argument("--prompt-type", default="instruction",
                   choices=["instruction", "completion", "caption"])

    p = sub.add_parser("run", help="run the full pipeline")

    return parser


def _load_config(args):
    from .config import validate_config

    return validate_config(args.config)


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    from .config import ConfigError
    from .evalharness import EvalError
    from .pipeline import IntegrityError, PipelineError

    try:
        return _dispatch(args)
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"config error: {issue}", file=sys.stderr)
        return EXIT_USAGE
    except EvalError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except PipelineError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _dispatch(args) -> int:
    if args.command == "validate":
        config = _load_config(args)
        print(json.dumps(config.to_json(), indent=2))
        return EXIT_OK
    if args.command == "ingest":
        return _cmd_ingest(args)
    if args.command == "render":
        return _cmd_render(args)
    if args.command == "stage1":
        return _cmd_stage1(args)
    if args.command == "hilpo":
        return _cmd_hilpo(args)
    if args.command == "stage2":
        return _cmd_stage2(args)
    if args.command == "export":
        return _cmd_export(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "gen-gt":
        return _cmd_gen_gt(args)
    if args.command == "run":
        return _cmd_run(args)
    return EXIT_USAGE


def _cmd_ingest(args) -> int:
    from .corpus import ingest_instruction_corpus, save_corpus

    config = _load_config(args)
    source = args.source or config.ingest_source
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    result = ingest_instruction_corpus(lines, source,
                                       caption_instruction=config.caption_instruction)
    out = Path(args.out) if args.out else config.outputs_dir / "corpus_ingested.jsonl"
    save_corpus(result.corpus, out)
    print(f"ingested {len(result.corpus)} samples, {result.reject_count} rejected -> {out}")
    for reject in result.rejects:
        print(f"  line {reject.line_no}: {reject.reason}", file=sys.stderr)
    return EXIT_OK


def _cmd_render(args) -> int:
    from .pcio import CloudStore
    from .render import render_to_dir

    config = _load_config(args)
    store = CloudStore(args.clouds or config.clouds_dir)
    out = Path(args.out) if args.out else config.outputs_dir / "views"
    count = 0
    for cloud_id in store.ids():
        render_to_dir(store.load(cloud_id), out, config.render)
        count += 1
    print(f"rendered {count} clouds x 4 views -> {out}")
    return EXIT_OK


def _cmd_stage1(args) -> int:
    from .corpus import load_corpus, save_corpus, Corpus
    from .pipeline import build_gateway
    from .refine import Stage1Options, run_stage1
    from .render import load_view_bytes

    config = _load_config(args)
    corpus = load_corpus(args.corpus).corpus
    gateway = build_gateway(config)
    views_dir = Path(args.views)
    options = Stage1Options(disable_refinement=args.disable_refinement,
                            verify_improved=args.verify_improved)
    result = run_stage1(corpus, gateway,
                        lambda cid: load_view_bytes(views_dir, cid), options)
    out = Path(args.out) if args.out else config.outputs_dir / "corpus_refined.jsonl"
    save_corpus(result.corpus, out)
    report_path = out.with_name("stage1_report.json")
    report_path.write_text(json.dumps(result.report.to_json(), indent=2) + "\n",
                           encoding="utf-8")
    if result.unevaluable:
        manual = Corpus(name="manual-review", kind="instruction",
                        samples=list(result.unevaluable))
        save_corpus(manual, out.with_name("manual_review.jsonl"))
    print(result.report.render_text())
    print(f"refined corpus -> {out}")
    return EXIT_OK


def _cmd_hilpo(args) -> int:
    from .corpus import load_corpus
    from .pipeline import build_gateway
    from .promptloop import (
        PromptStore, generate_sample_batch, init_prompt, propose_refinement,
    )
    from .render import load_view_bytes

    config = _load_config(args)
    events_path = config.outputs_dir / "prompt_events.jsonl"
    store = PromptStore(events_path)

    if args.hilpo_command == "status":
        if not store.initialized():
            print("prompt store: not initialized")
            return EXIT_OK
        active = store.active()
        converged, reason = store.check_convergence()
        print(f"active prompt: {active.prompt_id} (iteration {active.iteration_k})")
        print(f"pending candidates: {len(store.pending_candidates())}")
        final = store.finalized()
        print(f"finalized: {final.prompt_id if final else 'no'}")
        print(f"converged: {converged} ({reason})")
        return EXIT_OK

    if args.hilpo_command == "finalize":
        if not store.initialized():
            init_prompt(store)
        version = store.finalize()
        print(f"finalized {version.prompt_id} at iteration {version.iteration_k}")
        return EXIT_OK

    if args.hilpo_command == "iterate":
        corpus_path = Path(args.corpus) if args.corpus else \
            config.outputs_dir / "corpus_refined.jsonl"
        corpus = load_corpus(corpus_path).corpus
        gateway = build_gateway(config)
        if not store.initialized():
            init_prompt(store)
        views_dir = config.outputs_dir / "views"
        loader = (lambda cid: load_view_bytes(views_dir, cid)) if views_dir.exists() \
            else None
        n = args.n if args.n is not None else min(config.batch_size, len(corpus))
        seed = args.seed if args.seed is not None else config.batch_seed
        batch = generate_sample_batch(store, corpus, gateway, n=n, seed=seed,
                                      views_loader=loader)
        candidate = propose_refinement(store, batch, gateway,
                                       char_budget=config.snippet_char_budget)
        print(f"batch {batch.batch_id}: {batch.size} snippets, "
              f"{batch.parse_failures} parse failures")
        print(f"candidate {candidate.prompt_id} "
              f"({'no change' if candidate.no_change else 'changed'}) awaits review")
        return EXIT_OK

    if args.hilpo_command == "serve":
        import uvicorn

        from .review_api import create_app

        app = create_app(events_path, config.outputs_dir / "views",
                         static_dir=_ui_dist_dir())
        uvicorn.run(app, host=args.host, port=args.port)
        return EXIT_OK
    return EXIT_USAGE


def _ui_dist_dir() -> Optional[Path]:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.exists() else None


def _cmd_stage2(args) -> int:
    from .corpus import load_corpus
    from .pipeline import PipelineError, build_gateway
    from .promptloop import PromptStore
    from .render import load_view_bytes
    from .synth import run_stage2

    config = _load_config(args)
    store = PromptStore(config.outputs_dir / "prompt_events.jsonl")
    final = store.finalized()
    if final is None:
        raise PipelineError("no finalized prompt; run `hilpo finalize` first")
    if final.prompt_id != args.prompt_id:
        raise PipelineError(
            f"finalized prompt is {final.prompt_id!r}, not {args.prompt_id!r}"
        )
    corpus = load_corpus(args.corpus).corpus
    gateway = build_gateway(config)
    views_dir = config.outputs_dir / "views"
    out = Path(args.out) if args.out else config.outputs_dir / "corpus_cot.jsonl"
    job = run_stage2(corpus, final, gateway,
                     lambda cid: load_view_bytes(views_dir, cid),
                     out, out.with_name("stage2_job.json"),
                     disable_cot=args.disable_cot)
    print(f"synthesized {job.counters['succeeded']} records "
          f"({job.counters['parse_failed']} parse failures, "
          f"{job.counters['provider_failed']} provider failures) -> {out}")
    return EXIT_OK


def _cmd_export(args) -> int:
    import yaml

    from .synth import ExportTemplate, export_training, load_cot_corpus

    config = _load_config(args)
    if args.template:
        raw = yaml.safe_load(Path(args.template).read_text(encoding="utf-8")) or {}
        template = ExportTemplate(
            context_template=raw.get("context_template",
                                     config.export_context_template),
            point_cloud_token=raw.get("point_cloud_token",
                                      config.export_point_cloud_token),
        )
    else:
        template = ExportTemplate(context_template=config.export_context_template,
                                  point_cloud_token=config.export_point_cloud_token)
    corpus = load_cot_corpus(args.input).corpus
    out = Path(args.out) if args.out else config.outputs_dir / "train_records.jsonl"
    count = export_training(corpus, template, out)
    print(f"exported {count} training records -> {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evalharness import (
        build_report, load_eval_task, run_caption_task, run_classification_task,
    )
    from .pipeline import build_gateway
    from .render import load_view_bytes

    from .evalharness import EvalError

    config = _load_config(args)
    gateway = build_gateway(config)
    tasks = [load_eval_task(p) for p in args.task.split(",")]
    kinds = {"captioning" if t.benchmark == "captioning" else "classification"
             for t in tasks}
    if len(kinds) > 1:
        raise EvalError("cannot mix captioning and classification tasks "
                        "in one report")
    judges = args.judges.split(",") if args.judges else config.judges
    similarity = args.similarity.split(",") if args.similarity else []
    views_dir = Path(args.views) if args.views else config.outputs_dir / "views"
    loader = (lambda cid: load_view_bytes(views_dir, cid)) if views_dir.exists() \
        else None
    if kinds == {"captioning"}:
        results = []
        for task in tasks:
            results.extend(run_caption_task(gateway, task, judges, loader,
                                            similarity))
        report = build_report(judges=judges, caption_results=results)
    else:
        cells = {}
        for task in tasks:
            cell = f"{task.dataset}({task.prompt_type[0].upper()})"
            cells[cell] = run_classification_task(gateway, task, judges, loader)
        report = build_report(cells, judges=judges)
    out_prefix = Path(args.out) if args.out else config.outputs_dir / "eval_report"
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out_prefix}.json").write_text(
        json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    Path(f"{out_prefix}.txt").write_text(report.render_text() + "\n", encoding="utf-8")
    print(report.render_text())
    return EXIT_OK


def _cmd_gen_gt(args) -> int:
    from .evalharness import EvalItem, EvalTask, gen_reference_captions, save_eval_task
    from .pcio import CloudStore
    from .pipeline import build_gateway

    config = _load_config(args)
    gateway = build_gateway(config)
    store = CloudStore(args.clouds)
    clouds = [store.load(cid) for cid in store.ids()]
    captions, excluded = gen_reference_captions(gateway, clouds, config.render)
    task = EvalTask(
        benchmark=args.benchmark, prompt_type=args.prompt_type,
        items=[EvalItem(cloud_id=cid, ground_truth=caption)
               for cid, caption in captions],
        dataset=Path(args.clouds).name,
    )
    out = Path(args.out) if args.out else config.outputs_dir / "reference_captions.jsonl"
    save_eval_task(task, out)
    print(f"captioned {len(captions)} clouds ({len(excluded)} excluded) -> {out}")
    for cid in excluded:
        print(f"  excluded: {cid}", file=sys.stderr)
    return EXIT_OK


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    config = _load_config(args)
    manifest = run_pipeline(config)
    print(f"run {manifest.run_id} complete")
    for stage in manifest.stages:
        print(f"  stage {stage}: done")
    for key, value in sorted(manifest.counters.items()):
        print(f"  {key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
