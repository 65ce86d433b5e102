from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from pointcot.corpus import (
    Corpus,
    InstructionSample,
    LineageRecord,
    make_sample_id,
    normalize_cloud,
)
from pointcot.gateway import Gateway, MockModelProvider, ProviderConfig


def random_cloud(cloud_id: str, n: int = 120, seed: int = 0, colored: bool = True):
    rng = np.random.default_rng(seed)
    xyz = rng.normal(size=(n, 3))
    rgb = rng.uniform(size=(n, 3)) if colored else None
    return normalize_cloud(xyz, cloud_id, colors=rgb)


def make_sample(cloud_id: str, instruction: str, answer: str,
                source: str = "shapellm_sft") -> InstructionSample:
    return InstructionSample(
        sample_id=make_sample_id(cloud_id, instruction, answer, source),
        cloud_id=cloud_id,
        instruction=instruction,
        answer=answer,
        source=source,
        lineage=(LineageRecord(stage="ingested"),),
    )


def make_corpus(n_clouds: int = 3, per_cloud: int = 2) -> Corpus:
    corpus = Corpus(name="fixture", kind="instruction")
    for c in range(n_clouds):
        for k in range(per_cloud):
            corpus.add(make_sample(
                f"cloud{c:03d}",
                f"What is feature {k} of object {c}?",
                f"Feature {k} of object {c} is a rounded ridge.",
            ))
    return corpus


@pytest.fixture
def mock_provider():
    return MockModelProvider(config=ProviderConfig(provider_id="mock", kind="mock"))


@pytest.fixture
def gateway(tmp_path, mock_provider):
    return Gateway(
        providers={"mock": mock_provider},
        bindings={role: "mock" for role in (
            "evaluator", "cot_generator", "prompt_refiner", "judge",
            "caption_gt_generator", "embedder", "subject_model",
        )},
        cache_dir=tmp_path / "cache",
        audit_path=tmp_path / "audit.log",
        retry_base_s=0.001,
    )


def tiny_views() -> tuple:
    """Four tiny deterministic PNG stand-ins for tests that ignore pixels."""
    from pointcot.render import encode_view
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    return tuple(encode_view(img) for _ in range(4))


PIPELINE_CONFIG_TEMPLATE = """\
paths:
  clouds: clouds
  corpora: corpora
  outputs: {outputs}
  cache: {cache}
render:
  image_size: {image_size}
  splat_radius: 1
providers:
  - provider_id: offline
    kind: mock
bindings:
  evaluator: offline
  cot_generator: offline
  prompt_refiner: offline
  judge: offline
  caption_gt_generator: offline
  embedder: offline
  subject_model: offline
judges: [offline]
stages:
  with_refinement: {with_refinement}
  with_hilpo: {with_hilpo}
  with_cot: {with_cot}
batch:
  size: {batch_size}
hilpo:
  iterations: {iterations}
  auto_review: {auto_review}
  reviewer: fixture-reviewer
ingest:
  source: shapellm_sft
  inputs:
    - path: inputs/records.jsonl
      source: shapellm_sft
"""


def build_pipeline_fixture(
    root,
    n_clouds: int = 6,
    per_cloud: int = 2,
    image_size: int = 96,
    with_refinement: bool = True,
    with_hilpo: bool = True,
    with_cot: bool = True,
    auto_review: str = "accept",
    batch_size: int = 4,
    iterations: int = 2,
    outputs: str = "out",
    points_per_cloud: int = 40,
):
    """Write clouds, instruction records, and a config file under ``root``."""
    from pointcot.pcio import save_ply

    root = Path(root)
    clouds_dir = root / "clouds"
    clouds_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(12345)
    for c in range(n_clouds):
        xyz = rng.normal(size=(points_per_cloud, 3))
        rgb = rng.uniform(size=(points_per_cloud, 3))
        save_ply(xyz, clouds_dir / f"cloud{c:03d}.ply", colors=rgb)

    inputs_dir = root / "inputs"
    inputs_dir.mkdir(exist_ok=True)
    with open(inputs_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for c in range(n_clouds):
            for k in range(per_cloud):
                fh.write(json.dumps({
                    "cloud_id": f"cloud{c:03d}",
                    "instruction": f"What is notable about part {k} of object {c}?",
                    "answer": f"Part {k} of object {c} shows a ribbed edge.",
                }) + "\n")

    config_path = root / "pointcot.yaml"
    config_path.write_text(PIPELINE_CONFIG_TEMPLATE.format(
        outputs=outputs, cache="cache", image_size=image_size,
        with_refinement=str(with_refinement).lower(),
        with_hilpo=str(with_hilpo).lower(),
        with_cot=str(with_cot).lower(),
        batch_size=batch_size, iterations=iterations, auto_review=auto_review,
    ), encoding="utf-8")
    return config_path
