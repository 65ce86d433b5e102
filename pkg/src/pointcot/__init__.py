"""Point-cloud instruction data pipeline with chain-of-thought synthesis.

The package is organized around the pipeline stages:

- ``corpus``: domain types, ingestion, and line-oriented corpus storage
- ``pcio``: point-cloud file formats (PLY, raw float32) and the cloud store
- ``render``: deterministic four-view renderer for point clouds
- ``gateway``: uniform model-provider client with caching, retries, and a
  deterministic mock backend
- ``structured``: fenced key/value block parser for model output
- ``refine``: stage 1, quality evaluation and reference-guided refinement
- ``promptloop``: stage 2a, the human-in-the-loop prompt optimization loop
- ``review_api``: HTTP review server backing the browser review UI
- ``synth``: stage 2b, large-scale reasoning synthesis and training export
- ``evalharness``: multi-judge evaluation of subject models
- ``config`` / ``pipeline`` / ``cli``: orchestration
"""

__version__ = "0.1.0"
