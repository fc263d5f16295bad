"""Uniform client layer over the external model services.

One ``Gateway`` fronts five logical operations (generate, classify,
caption, score, embed) against a pluggable backend: either a live HTTP
service speaking the JSON wire protocol, or the synthetic world linked
in-process. The gateway owns retries, bounded parallelism, request
keys, and blob persistence; callers only ever see domain types.
"""

from __future__ import annotations

import base64
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TypeVar

import numpy as np

from .core import Caption, LabelHierarchy, Prediction, Sample
from .store import BlobStore
from .util import canonical_json, sha256_hex

T = TypeVar("T")


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """Network/5xx-class failure; retryable."""


class ProtocolError(GatewayError):
    """Malformed or contract-violating response; never retried."""


class PartialResultError(GatewayError):
    def __init__(self, missing: Sequence[int]):
        super().__init__(f"backend returned partial results; missing indices {sorted(missing)}")
        self.missing = tuple(sorted(missing))


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 50.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str
    max_in_flight: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_ms: float = 30000.0
    auth_token: Optional[str] = None

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    n: int
    seed: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("generation request needs n >= 1")


@dataclass(frozen=True)
class CaptionRequest:
    image: bytes | str
    prefix: str
    max_sentences: int
    fewshot_profile: str = "default"

    def __post_init__(self):
        if not self.prefix:
            raise ValueError("caption request needs a non-empty prefix")


@dataclass(frozen=True)
class ScoreRequest:
    image: bytes | str
    caption: str

    def __post_init__(self):
        if not self.caption:
            raise ValueError("score request needs a non-empty caption")


def request_key(endpoint: str, op: str, payload: dict) -> str:
    return sha256_hex(canonical_json({"endpoint": endpoint, "op": op, "payload": payload}))


# ---------------------------------------------------------------------------
# Backends


class WorldBackend:
    """In-process backend over a synthetic world config."""

    def __init__(self, cfg):
        self.cfg = cfg

    def generate(self, prompt: str, n: int, seed: int, key: str) -> list[tuple[int, bytes]]:
        from . import synthworld

        return list(enumerate(synthworld.world_generate(self.cfg, prompt, n, seed)))

    def classify(self, png: bytes, k: int, key: str) -> list[tuple[str, float]]:
        from . import synthworld

        return list(synthworld.world_classify(self.cfg, png, k).topk)

    def caption(self, png: bytes, prefix: str, max_sentences: int, profile: str, key: str) -> str:
        from . import synthworld

        return synthworld.world_caption(self.cfg, png, prefix, max_sentences).render()

    def score(self, png: bytes, caption: str, key: str) -> float:
        from . import synthworld

        return synthworld.world_score(self.cfg, png, caption)

    def embed(self, png: bytes, space: str, key: str) -> list[float]:
        from . import synthworld

        return synthworld.world_embed(self.cfg, png, space)


class HttpBackend:
    """JSON-over-HTTP backend speaking the v1 wire protocol."""

    def __init__(self, endpoint: ServiceEndpoint):
        import httpx

        self.endpoint = endpoint
        headers = {}
        if endpoint.auth_token:
            headers["Authorization"] = f"Bearer {endpoint.auth_token}"
        self._client = httpx.Client(
            base_url=endpoint.base_url, timeout=endpoint.timeout_ms / 1000.0, headers=headers
        )

    def _post(self, route: str, body: dict, key: str) -> dict:
        import httpx

        try:
            resp = self._client.post(route, json=body, headers={"X-Request-Key": key})
        except httpx.HTTPError as exc:
            raise TransportError(f"{route}: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"{route}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            try:
                detail = resp.json()
            except Exception:
                detail = {"error": resp.text}
            if detail.get("retryable"):
                raise TransportError(f"{route}: {detail.get('error')}")
            raise ProtocolError(f"{route}: {detail.get('error')}")
        try:
            return resp.json()
        except Exception as exc:
            raise ProtocolError(f"{route}: response is not JSON") from exc

    def generate(self, prompt: str, n: int, seed: int, key: str) -> list[tuple[int, bytes]]:
        body = self._post("/v1/generate", {"prompt": prompt, "n": n, "seed": seed}, key)
        out = []
        for item in body.get("images", []):
            try:
                out.append((int(item["index"]), base64.b64decode(item["png_base64"])))
            except Exception as exc:
                raise ProtocolError(f"undecodable image in response: {exc}") from exc
        return out

    def classify(self, png: bytes, k: int, key: str) -> list[tuple[str, float]]:
        body = self._post(
            "/v1/classify", {"png_base64": base64.b64encode(png).decode("ascii"), "k": k}, key
        )
        return [(d["label"], float(d["score"])) for d in body.get("topk", [])]

    def caption(self, png: bytes, prefix: str, max_sentences: int, profile: str, key: str) -> str:
        body = self._post(
            "/v1/caption",
            {
                "png_base64": base64.b64encode(png).decode("ascii"),
                "prefix": prefix,
                "max_sentences": max_sentences,
                "profile": profile,
            },
            key,
        )
        return body["caption"]

    def score(self, png: bytes, caption: str, key: str) -> float:
        body = self._post(
            "/v1/score",
            {"png_base64": base64.b64encode(png).decode("ascii"), "caption": caption},
            key,
        )
        return float(body["log_likelihood"])

    def embed(self, png: bytes, space: str, key: str) -> list[float]:
        body = self._post(
            "/v1/embed", {"png_base64": base64.b64encode(png).decode("ascii"), "space": space}, key
        )
        vec = [float(v) for v in body["vector"]]
        if "dim" in body and int(body["dim"]) != len(vec):
            raise ProtocolError("embedding dim field disagrees with vector length")
        return vec


# ---------------------------------------------------------------------------
# Gateway


class Gateway:
    """Shared, thread-safe front door to one model-service backend."""

    def __init__(
        self,
        backend,
        blobs: BlobStore,
        endpoint: Optional[ServiceEndpoint] = None,
        hierarchy: Optional[LabelHierarchy] = None,
        jitter_seed: int = 0,
    ):
        self.backend = backend
        self.blobs = blobs
        self.endpoint = endpoint or ServiceEndpoint(base_url="inprocess://world")
        self.hierarchy = hierarchy
        self._sem = threading.Semaphore(self.endpoint.max_in_flight)
        self._pool = ThreadPoolExecutor(max_workers=self.endpoint.max_in_flight)
        self._rng = np.random.default_rng(jitter_seed)
        self._rng_lock = threading.Lock()
        self._space_dims: dict[str, int] = {}
        self._dims_lock = threading.Lock()

    # -- retry machinery -------------------------------------------------

    def _jitter(self) -> float:
        with self._rng_lock:
            return float(self._rng.random())

    def _call(self, fn: Callable[[], T]) -> T:
        retry = self.endpoint.retry
        attempt = 0
        while True:
            with self._sem:
                try:
                    return fn()
                except TransportError:
                    attempt += 1
                    if attempt >= retry.max_attempts:
                        raise
            backoff = retry.base_backoff_ms / 1000.0 * (2 ** (attempt - 1)) * (1.0 + self._jitter())
            time.sleep(backoff)

    def _png(self, image: bytes | str) -> bytes:
        return self.blobs.get(image) if isinstance(image, str) else image

    # -- operations ------------------------------------------------------

    def generate(self, req: GenerationRequest) -> list[Sample]:
        """Generate ``req.n`` images; blobs are persisted before returning."""
        key = request_key(self.endpoint.base_url, "generate", {"prompt": req.prompt, "n": req.n, "seed": req.seed})
        pairs = self._call(lambda: self.backend.generate(req.prompt, req.n, req.seed, key))
        by_index = dict(pairs)
        missing = [i for i in range(req.n) if i not in by_index]
        if missing:
            raise PartialResultError(missing)
        prompt_cap = Caption.parse(req.prompt)
        samples = []
        for i in range(req.n):
            digest = self.blobs.put(by_index[i])
            samples.append(Sample(image=digest, prompt=prompt_cap, seed=req.seed, index=i))
        return samples

    def classify(self, image: bytes | str, k: int) -> Prediction:
        if k < 1:
            raise ValueError("k must be >= 1")
        png = self._png(image)
        key = request_key(self.endpoint.base_url, "classify", {"image": sha256_hex(png), "k": k})
        topk = self._call(lambda: self.backend.classify(png, k, key))
        if self.hierarchy is not None:
            for label, _ in topk:
                if label not in self.hierarchy:
                    raise ProtocolError(f"classifier returned unknown label {label!r}")
        try:
            return Prediction(tuple(topk))
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc

    def caption(self, req: CaptionRequest) -> Caption:
        png = self._png(req.image)
        key = request_key(
            self.endpoint.base_url,
            "caption",
            {
                "image": sha256_hex(png),
                "prefix": req.prefix,
                "max_sentences": req.max_sentences,
                "profile": req.fewshot_profile,
            },
        )
        text = self._call(
            lambda: self.backend.caption(png, req.prefix, req.max_sentences, req.fewshot_profile, key)
        )
        if not text.startswith(req.prefix.rstrip()):
            raise ProtocolError(f"captioner completion does not start with the forced prefix")
        prefix_cap = Caption.parse(req.prefix)
        cap = Caption.parse(text)
        extra = cap.sentences[len(prefix_cap.sentences) :]
        if len(extra) > req.max_sentences:
            raise ProtocolError(
                f"captioner returned {len(extra)} sentences, limit was {req.max_sentences}"
            )
        return cap

    def score_caption(self, req: ScoreRequest) -> float:
        png = self._png(req.image)
        key = request_key(
            self.endpoint.base_url, "score", {"image": sha256_hex(png), "caption": req.caption}
        )
        value = self._call(lambda: self.backend.score(png, req.caption, key))
        if not math.isfinite(value):
            raise ProtocolError(f"caption score is not finite: {value!r}")
        return value

    def embed(self, image: bytes | str, space: str) -> list[float]:
        from .synthworld import EMBED_SPACES

        if space not in EMBED_SPACES:
            raise ValueError(f"unknown embedding space {space!r}")
        png = self._png(image)
        key = request_key(self.endpoint.base_url, "embed", {"image": sha256_hex(png), "space": space})
        vec = self._call(lambda: self.backend.embed(png, space, key))
        if not all(math.isfinite(v) for v in vec):
            raise ProtocolError("embedding contains non-finite entries")
        with self._dims_lock:
            expected = self._space_dims.setdefault(space, len(vec))
        if len(vec) != expected:
            raise ProtocolError(f"embedding dim {len(vec)} != expected {expected} for {space!r}")
        return vec

    # -- ordered parallel helpers ---------------------------------------

    def map_ordered(self, fn: Callable[[T], object], items: Sequence[T]) -> list:
        """Apply ``fn`` with bounded parallelism; results keep input order."""
        futures = [self._pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]

    def classify_many(self, images: Sequence[bytes | str], k: int) -> list[Prediction]:
        return self.map_ordered(lambda im: self.classify(im, k), images)

    def close(self):
        self._pool.shutdown(wait=True)
