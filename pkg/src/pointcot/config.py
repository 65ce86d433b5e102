"""Global pipeline configuration: one YAML file, validated strictly.

Unknown keys are errors (not warnings) so typos never silently disable a
stage. String values may interpolate environment variables as ``${VAR}``,
which keeps secrets out of the archived config. Relative paths resolve
against the config file's directory so a run directory is relocatable.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from .gateway import DEFAULT_CONCURRENCY_BUDGET, ProviderConfig, ROLES
from .promptloop import DEFAULT_BATCH_SIZE, DEFAULT_SNIPPET_CHAR_BUDGET
from .render import RenderConfig

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class ConfigIssue:
    field_path: str
    message: str
    remedy: str

    def __str__(self) -> str:
        return f"{self.field_path}: {self.message} ({self.remedy})"


class ConfigError(Exception):
    def __init__(self, issues: List[ConfigIssue]):
        super().__init__("; ".join(str(i) for i in issues))
        self.issues = issues


# Allowed keys per section; None means the value is validated elsewhere.
_SCHEMA: Dict[str, Any] = {
    "paths": {"clouds", "corpora", "outputs", "cache"},
    "render": {"azimuths", "elevation", "projection", "fov", "image_size",
               "splat_radius", "background"},
    "providers": None,
    "bindings": set(ROLES),
    "judges": None,
    "stages": {"with_refinement", "with_hilpo", "with_cot"},
    "seeds": {"batch", "mock"},
    "concurrency": {"budget", "stage_workers"},
    "batch": {"size", "snippet_char_budget"},
    "hilpo": {"iterations", "auto_review", "reviewer"},
    "ingest": {"source", "caption_instruction", "inputs"},
    "export": {"context_template", "point_cloud_token"},
}

_PROVIDER_KEYS = {"provider_id", "kind", "base_url", "model_name", "api_key_env_var",
                  "rate_limit_per_min", "max_retries", "timeout_s",
                  "max_response_bytes"}


@dataclass
class PipelineConfig:
    base_dir: Path
    clouds_dir: Path
    corpora_dir: Path
    outputs_dir: Path
    cache_dir: Path
    render: RenderConfig
    providers: List[ProviderConfig]
    bindings: Dict[str, str]
    judges: List[str]
    with_refinement: bool = True
    with_hilpo: bool = True
    with_cot: bool = True
    batch_seed: int = 0
    mock_seed: int = 0
    concurrency_budget: int = DEFAULT_CONCURRENCY_BUDGET
    stage_workers: int = 4
    batch_size: int = DEFAULT_BATCH_SIZE
    snippet_char_budget: int = DEFAULT_SNIPPET_CHAR_BUDGET
    hilpo_iterations: int = 2
    hilpo_auto_review: str = "none"  # none | accept | reject
    hilpo_reviewer: str = "pipeline"
    ingest_source: str = "shapellm_sft"
    caption_instruction: str = "Describe this object."
    ingest_inputs: List[Dict[str, str]] = field(default_factory=list)
    export_context_template: str = (
        "Point cloud: {point_cloud}\nInstruction: {instruction}\nOutput: "
    )
    export_point_cloud_token: str = "<point_cloud>"

    def config_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "paths": {
                "clouds": str(self.clouds_dir), "corpora": str(self.corpora_dir),
                "outputs": str(self.outputs_dir), "cache": str(self.cache_dir),
            },
            "render": {
                "azimuths": list(self.render.azimuths),
                "elevation": self.render.elevation,
                "projection": self.render.projection,
                "fov": self.render.fov,
                "image_size": self.render.image_size,
                "splat_radius": self.render.splat_radius,
                "background": list(self.render.background),
            },
            "providers": [vars(p) for p in self.providers],
            "bindings": self.bindings,
            "judges": self.judges,
            "stages": {
                "with_refinement": self.with_refinement,
                "with_hilpo": self.with_hilpo,
                "with_cot": self.with_cot,
            },
            "seeds": {"batch": self.batch_seed, "mock": self.mock_seed},
            "concurrency": {"budget": self.concurrency_budget,
                            "stage_workers": self.stage_workers},
            "batch": {"size": self.batch_size,
                      "snippet_char_budget": self.snippet_char_budget},
            "hilpo": {"iterations": self.hilpo_iterations,
                      "auto_review": self.hilpo_auto_review,
                      "reviewer": self.hilpo_reviewer},
            "ingest": {"source": self.ingest_source,
                       "caption_instruction": self.caption_instruction,
                       "inputs": self.ingest_inputs},
            "export": {"context_template": self.export_context_template,
                       "point_cloud_token": self.export_point_cloud_token},
        }


def _interpolate(value: Any, issues: List[ConfigIssue], path: str) -> Any:
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                issues.append(ConfigIssue(
                    path, f"environment variable {name!r} is not set",
                    f"export {name}=... or remove the interpolation",
                ))
                return ""
            return os.environ[name]
        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, issues, f"{path}.{k}") for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, issues, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def _check_unknown_keys(raw: Dict[str, Any], issues: List[ConfigIssue]) -> None:
    for key, value in raw.items():
        if key not in _SCHEMA:
            issues.append(ConfigIssue(
                key, f"unknown key {key!r}",
                f"allowed top-level keys: {sorted(_SCHEMA)}",
            ))
            continue
        allowed = _SCHEMA[key]
        if allowed is not None and isinstance(value, dict):
            for sub in value:
                if sub not in allowed:
                    issues.append(ConfigIssue(
                        f"{key}.{sub}", f"unknown key {sub!r}",
                        f"allowed keys under {key!r}: {sorted(allowed)}",
                    ))


def validate_config(path: Union[str, Path]) -> PipelineConfig:
    """Parse and validate; raises :class:`ConfigError` carrying every issue."""
    path = Path(path)
    issues: List[ConfigIssue] = []
    if not path.exists():
        raise ConfigError([ConfigIssue(str(path), "config file not found",
                                       "create it or fix the path")])
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([ConfigIssue(str(path), f"invalid YAML: {exc}",
                                       "fix the syntax")])
    if not isinstance(raw, dict):
        raise ConfigError([ConfigIssue(str(path), "config root must be a mapping",
                                       "use key: value sections")])
    raw = _interpolate(raw, issues, "")
    _check_unknown_keys(raw, issues)

    base = path.parent.resolve()

    def respath(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    paths = raw.get("paths", {}) or {}
    clouds_dir = respath(paths.get("clouds", "clouds"))
    corpora_dir = respath(paths.get("corpora", "corpora"))
    outputs_dir = respath(paths.get("outputs", "out"))
    cache_dir = respath(paths.get("cache", "cache"))

    render_raw = raw.get("render", {}) or {}
    try:
        render = RenderConfig(
            azimuths=tuple(render_raw.get("azimuths", (0.0, 90.0, 180.0, 270.0))),
            elevation=float(render_raw.get("elevation", 20.0)),
            projection=render_raw.get("projection", "orthographic"),
            fov=float(render_raw.get("fov", 60.0)),
            image_size=int(render_raw.get("image_size", 512)),
            splat_radius=int(render_raw.get("splat_radius", 2)),
            background=tuple(render_raw.get("background", (0, 0, 0))),
        )
    except (ValueError, TypeError) as exc:
        issues.append(ConfigIssue("render", str(exc), "fix the render block"))
        render = RenderConfig()

    providers: List[ProviderConfig] = []
    for i, entry in enumerate(raw.get("providers", []) or []):
        if not isinstance(entry, dict):
            issues.append(ConfigIssue(f"providers[{i}]", "must be a mapping",
                                      "use provider_id/kind/... keys"))
            continue
        for key in entry:
            if key not in _PROVIDER_KEYS:
                issues.append(ConfigIssue(
                    f"providers[{i}].{key}", f"unknown key {key!r}",
                    f"allowed keys: {sorted(_PROVIDER_KEYS)}",
                ))
        if "provider_id" not in entry:
            issues.append(ConfigIssue(f"providers[{i}]", "missing provider_id",
                                      "give every provider a unique id"))
            continue
        providers.append(ProviderConfig(
            provider_id=str(entry["provider_id"]),
            kind=str(entry.get("kind", "http")),
            base_url=str(entry.get("base_url", "")),
            model_name=str(entry.get("model_name", "")),
            api_key_env_var=str(entry.get("api_key_env_var", "")),
            rate_limit_per_min=float(entry.get("rate_limit_per_min", 0)),
            max_retries=int(entry.get("max_retries", 3)),
            timeout_s=float(entry.get("timeout_s", 60.0)),
            max_response_bytes=int(entry.get("max_response_bytes", 4_000_000)),
        ))
    provider_ids = {p.provider_id for p in providers}

    bindings = {str(k): str(v) for k, v in (raw.get("bindings", {}) or {}).items()}
    for role, pid in bindings.items():
        if pid not in provider_ids:
            issues.append(ConfigIssue(
                f"bindings.{role}", f"provider {pid!r} is not declared",
                "add it to the providers list",
            ))

    judges = [str(j) for j in (raw.get("judges", []) or [])]
    for j in judges:
        if j not in provider_ids:
            issues.append(ConfigIssue(
                "judges", f"judge provider {j!r} is not declared",
                "add it to the providers list",
            ))

    stages = raw.get("stages", {}) or {}
    with_refinement = bool(stages.get("with_refinement", True))
    with_hilpo = bool(stages.get("with_hilpo", True))
    with_cot = bool(stages.get("with_cot", True))

    seeds = raw.get("seeds", {}) or {}
    concurrency = raw.get("concurrency", {}) or {}
    batch = raw.get("batch", {}) or {}
    hilpo = raw.get("hilpo", {}) or {}
    ingest = raw.get("ingest", {}) or {}
    export = raw.get("export", {}) or {}

    auto_review = str(hilpo.get("auto_review", "none"))
    if auto_review not in ("none", "accept", "reject"):
        issues.append(ConfigIssue("hilpo.auto_review",
                                  f"unknown value {auto_review!r}",
                                  "use none, accept, or reject"))

    ingest_inputs = []
    for i, entry in enumerate(ingest.get("inputs", []) or []):
        if not isinstance(entry, dict) or "path" not in entry:
            issues.append(ConfigIssue(f"ingest.inputs[{i}]",
                                      "must be a mapping with a path",
                                      "use {path: ..., source: ...}"))
            continue
        input_path = respath(str(entry["path"]))
        if not input_path.exists():
            issues.append(ConfigIssue(
                f"ingest.inputs[{i}].path", f"{input_path} does not exist",
                "fix the path or create the file",
            ))
        ingest_inputs.append({"path": str(input_path),
                              "source": str(entry.get("source",
                                                       ingest.get("source",
                                                                  "shapellm_sft")))})

    if ingest_inputs and not clouds_dir.exists():
        issues.append(ConfigIssue(
            "paths.clouds", f"{clouds_dir} does not exist",
            "create the cloud store directory or fix the path",
        ))

    # Role requirements per enabled stage.
    if with_refinement and "evaluator" not in bindings:
        issues.append(ConfigIssue(
            "bindings.evaluator", "stage 1 is enabled but no evaluator is bound",
            "bind an evaluator provider or set stages.with_refinement: false",
        ))
    if with_hilpo:
        for role in ("cot_generator", "prompt_refiner"):
            if role not in bindings:
                issues.append(ConfigIssue(
                    f"bindings.{role}",
                    f"prompt optimization is enabled but no {role} is bound",
                    "bind a provider or set stages.with_hilpo: false",
                ))
    if with_cot and "cot_generator" not in bindings:
        issues.append(ConfigIssue(
            "bindings.cot_generator",
            "reasoning synthesis is enabled but no generator is bound",
            "bind a provider or set stages.with_cot: false",
        ))

    config = PipelineConfig(
        base_dir=base,
        clouds_dir=clouds_dir,
        corpora_dir=corpora_dir,
        outputs_dir=outputs_dir,
        cache_dir=cache_dir,
        render=render,
        providers=providers,
        bindings=bindings,
        judges=judges,
        with_refinement=with_refinement,
        with_hilpo=with_hilpo,
        with_cot=with_cot,
        batch_seed=int(seeds.get("batch", 0)),
        mock_seed=int(seeds.get("mock", 0)),
        concurrency_budget=int(concurrency.get("budget", DEFAULT_CONCURRENCY_BUDGET)),
        stage_workers=max(1, int(concurrency.get("stage_workers", 4))),
        batch_size=int(batch.get("size", DEFAULT_BATCH_SIZE)),
        snippet_char_budget=int(batch.get("snippet_char_budget",
                                          DEFAULT_SNIPPET_CHAR_BUDGET)),
        hilpo_iterations=int(hilpo.get("iterations", 2)),
        hilpo_auto_review=auto_review,
        hilpo_reviewer=str(hilpo.get("reviewer", "pipeline")),
        ingest_source=str(ingest.get("source", "shapellm_sft")),
        caption_instruction=str(ingest.get("caption_instruction",
                                           "Describe this object.")),
        ingest_inputs=ingest_inputs,
        export_context_template=str(export.get(
            "context_template",
            "Point cloud: {point_cloud}\nInstruction: {instruction}\nOutput: ",
        )),
        export_point_cloud_token=str(export.get("point_cloud_token", "<point_cloud>")),
    )
    if issues:
        raise ConfigError(issues)
    return config
