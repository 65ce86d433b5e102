"""Uniform client layer over every external model role.

One gateway instance fronts all providers (quality evaluator, reasoning
generator, prompt refiner, judges, caption generator, embedder, subject
model) and gives the pipeline:

- content-addressed response caching (resumable runs without a database)
- retries with exponential backoff on transient failures
- per-provider rate limiting (calls are delayed, never dropped)
- a concurrency budget per provider
- an append-only audit log of every call
- a deterministic in-process mock backend for offline runs and tests

Live providers speak chat-completion-style HTTP+JSON with base64 image
parts; adapters only translate field names.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ROLES = (
    "evaluator",
    "cot_generator",
    "prompt_refiner",
    "judge",
    "caption_gt_generator",
    "embedder",
    "subject_model",
)

DEFAULT_CONCURRENCY_BUDGET = 8


class GatewayError(Exception):
    pass


class TransientProviderError(GatewayError):
    """Retryable: timeouts, connection resets, 429/5xx."""


class ProviderError(GatewayError):
    """Not retryable: auth failures, oversized responses, retries exhausted."""


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: Optional[int] = None


@dataclass(frozen=True)
class ModelRequest:
    role: str
    prompt_text: str
    images: Tuple[bytes, ...] = ()
    provider_id: Optional[str] = None  # resolved from role bindings when unset
    decode: DecodeParams = DecodeParams()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise GatewayError(f"unknown role {self.role!r}")
        if not self.prompt_text:
            raise GatewayError("prompt_text must be non-empty")
        if len(self.images) > 4:
            raise GatewayError("at most 4 images per request")


@dataclass(frozen=True)
class ModelResponse:
    text: str  # verbatim completion, including malformed output
    latency_ms: float
    provider_id: str
    cache_hit: bool


def request_fingerprint(request: ModelRequest, provider_id: str) -> str:
    h = hashlib.sha256()
    h.update(provider_id.encode("utf-8"))
    h.update(b"\x1f")
    h.update(request.prompt_text.encode("utf-8"))
    h.update(b"\x1f")
    for img in request.images:
        h.update(hashlib.sha256(img).digest())
    h.update(
        f"{request.decode.temperature}|{request.decode.max_tokens}|{request.decode.seed}".encode()
    )
    return h.hexdigest()


@dataclass
class ProviderConfig:
    provider_id: str
    kind: str = "http"  # "http" | "mock"
    base_url: str = ""
    model_name: str = ""
    api_key_env_var: str = ""
    rate_limit_per_min: float = 0.0  # 0 disables throttling
    max_retries: int = 3
    timeout_s: float = 60.0
    max_response_bytes: int = 4_000_000


class HttpChatProvider:
    """Chat-completions transport; field names follow the common wire shape."""

    def __init__(self, config: ProviderConfig):
        self.config = config

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var)
            if not key:
                raise ProviderError(
                    f"provider {self.config.provider_id!r}: env var "
                    f"{self.config.api_key_env_var!r} not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: ModelRequest) -> str:
        import requests

        content: List[dict] = [{"type": "text", "text": request.prompt_text}]
        for img in request.images:
            b64 = base64.b64encode(img).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
            )
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_tokens,
        }
        if request.decode.seed is not None:
            payload["seed"] = request.decode.seed
        try:
            resp = requests.post(
                self.config.base_url.rstrip("/") + "/chat/completions",
                json=payload,
                headers=self._headers(),
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransientProviderError(f"{self.config.provider_id}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise ProviderError(f"{self.config.provider_id}: authentication failed")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(
                f"{self.config.provider_id}: HTTP {resp.status_code}"
            )
        if resp.status_code != 200:
            raise ProviderError(f"{self.config.provider_id}: HTTP {resp.status_code}")
        if len(resp.content) > self.config.max_response_bytes:
            raise ProviderError(
                f"{self.config.provider_id}: response exceeds "
                f"{self.config.max_response_bytes} bytes"
            )
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"{self.config.provider_id}: malformed response") from exc

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        import requests

        try:
            resp = requests.post(
                self.config.base_url.rstrip("/") + "/embeddings",
                json={"model": self.config.model_name, "input": list(texts)},
                headers=self._headers(),
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransientProviderError(f"{self.config.provider_id}: {exc}") from exc
        if resp.status_code != 200:
            raise TransientProviderError(f"{self.config.provider_id}: HTTP {resp.status_code}")
        data = resp.json()["data"]
        return [row["embedding"] for row in data]


class ScriptedFailure(Exception):
    """Placed in a mock script to simulate one transient provider failure."""


class MockModelProvider:
    """Deterministic in-process backend.

    Responses come from (in priority order): an exact fingerprint script, a
    per-call FIFO queue, or the handler function. Script entries may be
    ``ScriptedFailure`` instances to exercise the retry path. Embeddings are
    a pure function of the text.
    """

    def __init__(
        self,
        config: Optional[ProviderConfig] = None,
        handler: Optional[Callable[[ModelRequest], str]] = None,
        embed_dim: int = 32,
    ):
        self.config = config or ProviderConfig(provider_id="mock", kind="mock")
        self.handler = handler
        self.embed_dim = embed_dim
        self._by_fingerprint: Dict[str, List[object]] = {}
        self._queue: List[object] = []
        self._lock = threading.Lock()
        self.calls = 0

    def script_fingerprint(self, fingerprint: str, *outcomes: object) -> None:
        self._by_fingerprint.setdefault(fingerprint, []).extend(outcomes)

    def script_next(self, *outcomes: object) -> None:
        self._queue.extend(outcomes)

    def _pop_outcome(self, request: ModelRequest) -> object:
        fp = request_fingerprint(request, self.config.provider_id)
        seq = self._by_fingerprint.get(fp)
        if seq:
            return seq[0] if len(seq) == 1 else seq.pop(0)
        if self._queue:
            return self._queue.pop(0)
        if self.handler is not None:
            return self.handler(request)
        raise ProviderError(f"mock has no script for role {request.role!r}")

    def complete(self, request: ModelRequest) -> str:
        with self._lock:
            self.calls += 1
            outcome = self._pop_outcome(request)
        if isinstance(outcome, ScriptedFailure):
            raise TransientProviderError(str(outcome) or "scripted transient failure")
        if isinstance(outcome, Exception):
            raise outcome
        return str(outcome)

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        out = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            # Deliberately non-unit so gateway-side normalization is observable.
            out.append((rng.standard_normal(self.embed_dim) * 3.0).tolist())
        return out


class _RateLimiter:
    def __init__(self, rate_per_min: float):
        self.interval = 60.0 / rate_per_min if rate_per_min > 0 else 0.0
        self.next_allowed = 0.0
        self.lock = threading.Lock()

    def acquire(self) -> float:
        """Blocks until a slot is free; returns the time waited in seconds."""
        if self.interval <= 0:
            return 0.0
        with self.lock:
            now = time.monotonic()
            wait = max(0.0, self.next_allowed - now)
            self.next_allowed = max(now, self.next_allowed) + self.interval
        if wait > 0:
            time.sleep(wait)
        return wait


class Gateway:
    """Role-routing front end with cache, retries, throttling, and audit."""

    def __init__(
        self,
        providers: Mapping[str, object],
        bindings: Mapping[str, str],
        cache_dir: Optional[Union[str, Path]] = None,
        audit_path: Optional[Union[str, Path]] = None,
        concurrency_budget: int = DEFAULT_CONCURRENCY_BUDGET,
        retry_base_s: float = 0.05,
    ):
        self.providers = dict(providers)
        self.bindings = dict(bindings)
        for role, pid in self.bindings.items():
            if pid not in self.providers:
                raise GatewayError(f"binding {role!r} -> unknown provider {pid!r}")
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.audit_path = Path(audit_path) if audit_path else None
        if self.audit_path:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
        self.retry_base_s = retry_base_s
        self._audit_lock = threading.Lock()
        self._limiters = {
            pid: _RateLimiter(getattr(p, "config", ProviderConfig(pid)).rate_limit_per_min)
            for pid, p in self.providers.items()
        }
        self._budgets = {
            pid: threading.BoundedSemaphore(concurrency_budget) for pid in self.providers
        }
        self._inflight_lock = threading.Lock()
        self._inflight: Dict[str, threading.Lock] = {}

    # -- internals ---------------------------------------------------------

    def _resolve(self, request: ModelRequest) -> str:
        pid = request.provider_id or self.bindings.get(request.role)
        if pid is None:
            raise GatewayError(f"no provider bound for role {request.role!r}")
        if pid not in self.providers:
            raise GatewayError(f"unknown provider {pid!r}")
        return pid

    def _cache_path(self, fingerprint: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{fingerprint}.json"

    def _cache_read(self, fingerprint: str) -> Optional[str]:
        path = self._cache_path(fingerprint)
        if path is None or not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))["text"]
        except (json.JSONDecodeError, KeyError):
            logger.warning("dropping unreadable cache entry %s", path)
            return None

    def _cache_write(self, fingerprint: str, text: str, provider_id: str) -> None:
        path = self._cache_path(fingerprint)
        if path is None:
            return
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps({"fingerprint": fingerprint, "provider_id": provider_id, "text": text},
                       ensure_ascii=False),
            encoding="utf-8",
        )
        tmp.replace(path)

    def _audit(self, record: dict) -> None:
        if self.audit_path is None:
            return
        line = json.dumps(record, ensure_ascii=False, separators=(",", ":"))
        with self._audit_lock:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def _key_lock(self, fingerprint: str) -> threading.Lock:
        with self._inflight_lock:
            lock = self._inflight.get(fingerprint)
            if lock is None:
                lock = self._inflight[fingerprint] = threading.Lock()
            return lock

    # -- public API --------------------------------------------------------

    def complete(self, request: ModelRequest) -> ModelResponse:
        pid = self._resolve(request)
        provider = self.providers[pid]
        fingerprint = request_fingerprint(request, pid)
        start = time.monotonic()
        # Identical concurrent requests serialize here so the cache is
        # populated by exactly one live call.
        with self._key_lock(fingerprint):
            cached = self._cache_read(fingerprint)
            if cached is not None:
                latency = (time.monotonic() - start) * 1000.0
                self._audit({
                    "ts": time.time(), "role": request.role, "request": fingerprint,
                    "provider_id": pid, "cache_hit": True, "latency_ms": latency,
                })
                return ModelResponse(text=cached, latency_ms=latency,
                                     provider_id=pid, cache_hit=True)
            waited = self._limiters[pid].acquire()
            retries = 0
            max_retries = getattr(provider, "config", ProviderConfig(pid)).max_retries
            with self._budgets[pid]:
                while True:
                    try:
                        text = provider.complete(request)
                        break
                    except TransientProviderError as exc:
                        if retries >= max_retries:
                            self._audit({
                                "ts": time.time(), "role": request.role,
                                "request": fingerprint, "provider_id": pid,
                                "cache_hit": False, "latency_ms": None,
                                "retries": retries, "error": str(exc),
                            })
                            raise ProviderError(
                                f"{pid}: unreachable after {retries} retries: {exc}"
                            ) from exc
                        time.sleep(self.retry_base_s * (2 ** retries))
                        retries += 1
            self._cache_write(fingerprint, text, pid)
        latency = (time.monotonic() - start) * 1000.0
        self._audit({
            "ts": time.time(), "role": request.role, "request": fingerprint,
            "provider_id": pid, "cache_hit": False, "latency_ms": latency,
            "waited_ms": waited * 1000.0, "retries": retries,
        })
        return ModelResponse(text=text, latency_ms=latency, provider_id=pid, cache_hit=False)

    def embed(self, texts: Sequence[str], role: str = "embedder",
              provider_id: Optional[str] = None) -> np.ndarray:
        """One L2-normalized vector per text, in input order.

        Normalization happens here regardless of provider behavior.
        """
        if not texts:
            raise GatewayError("embed requires at least one text")
        pid = provider_id or self.bindings.get(role)
        if pid is None or pid not in self.providers:
            raise GatewayError(f"no provider bound for role {role!r}")
        provider = self.providers[pid]
        max_retries = getattr(provider, "config", ProviderConfig(pid)).max_retries
        retries = 0
        while True:
            try:
                raw = provider.embed(texts)
                break
            except TransientProviderError as exc:
                if retries >= max_retries:
                    raise ProviderError(f"{pid}: embedding failed: {exc}") from exc
                time.sleep(self.retry_base_s * (2 ** retries))
                retries += 1
        vectors = np.asarray(raw, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ProviderError(f"{pid}: provider returned a zero embedding")
        self._audit({
            "ts": time.time(), "role": role, "request": f"embed:{len(texts)}",
            "provider_id": pid, "cache_hit": False, "latency_ms": None,
        })
        return vectors / norms

    def audit_records(self) -> List[dict]:
        if self.audit_path is None or not self.audit_path.exists():
            return []
        records = []
        with open(self.audit_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return records


def build_provider(config: ProviderConfig,
                   mock_handler: Optional[Callable[[ModelRequest], str]] = None):
    if config.kind == "mock":
        return MockModelProvider(config=config, handler=mock_handler)
    if config.kind == "http":
        return HttpChatProvider(config)
    raise GatewayError(f"unknown provider kind {config.kind!r}")
