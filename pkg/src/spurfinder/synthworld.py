"""Deterministic synthetic model triad with planted spurious correlations.

Provides an in-process generator, classifier, captioner, caption scorer
and embedder that all operate on real PNG blobs. Images encode their
latent (class, attribute set, noise seed) losslessly as colored blocks,
so the full encode/hash/store/decode path is exercised.

The classifier's score for class ``y`` on an image with true class ``t``
and present attributes ``A`` is::

    class_vec(y) . (class_vec(t) + sum of attribute vectors)
      + sum of bias-link weights with attribute in A and target y
      + gaussian noise keyed by (image hash, y)

Bias links are the planted spurious correlations the pipeline is meant
to recover.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .core import (
    Caption,
    CaptionParseError,
    ConfigError,
    LabelHierarchy,
    Prediction,
    parse_base_prompt,
)
from .util import canonical_json, derive_seed, sha256_hex

SCORE_FLOOR = -1e9
_BLOCK = 4  # pixel block size; payload bytes live in every _BLOCK-th pixel
_WIDTH = 16  # payload pixels per row

EMBED_SPACES = ("cluster", "fid")


@dataclass(frozen=True)
class WorldAttribute:
    name: str
    phrase: str  # single caption sentence, ends in "."
    vector: tuple[float, ...]
    prior: dict[str, float] = field(default_factory=dict)  # label -> P(present)


@dataclass(frozen=True)
class WorldClass:
    label: str
    parent: str
    vector: tuple[float, ...]


@dataclass(frozen=True)
class BiasLink:
    attribute: str
    target: str
    weight: float


@dataclass(frozen=True)
class WorldConfig:
    classes: tuple[WorldClass, ...]
    attributes: tuple[WorldAttribute, ...]
    bias_links: tuple[BiasLink, ...]
    noise_sigma: float
    caption_drop_prob: float
    generator_wrong_label_prob: float
    dim: int
    lenient_prompts: bool = True

    def __post_init__(self):
        phrases = [a.phrase for a in self.attributes]
        if len(set(phrases)) != len(phrases):
            raise ConfigError("attribute phrases must be unique")
        for c in self.classes:
            if len(c.vector) != self.dim:
                raise ConfigError(f"class {c.label} vector has wrong dimension")
        for a in self.attributes:
            if len(a.vector) != self.dim:
                raise ConfigError(f"attribute {a.name} vector has wrong dimension")
            for p in a.prior.values():
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"attribute {a.name} has prior outside [0,1]")

    @property
    def hierarchy(self) -> LabelHierarchy:
        records = [(c.label, c.label, c.parent) for c in self.classes]
        for parent in sorted({c.parent for c in self.classes}):
            records.append((parent, parent, None))
        return LabelHierarchy.from_records(records)

    def class_by_label(self, label: str) -> WorldClass:
        for c in self.classes:
            if c.label == label:
                return c
        raise ConfigError(f"unknown world class {label!r}")

    def attribute_by_phrase(self, phrase: str) -> Optional[WorldAttribute]:
        for a in self.attributes:
            if a.phrase == phrase:
                return a
        return None

    def attribute_by_name(self, name: str) -> WorldAttribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise ConfigError(f"unknown world attribute {name!r}")

    # -- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "noise_sigma": self.noise_sigma,
            "caption_drop_prob": self.caption_drop_prob,
            "generator_wrong_label_prob": self.generator_wrong_label_prob,
            "lenient_prompts": self.lenient_prompts,
            "classes": [
                {"label": c.label, "parent": c.parent, "vector": list(c.vector)} for c in self.classes
            ],
            "attributes": [
                {"name": a.name, "phrase": a.phrase, "vector": list(a.vector), "prior": a.prior}
                for a in self.attributes
            ],
            "bias_links": [
                {"attribute": b.attribute, "target": b.target, "weight": b.weight} for b in self.bias_links
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "WorldConfig":
        return cls(
            classes=tuple(
                WorldClass(c["label"], c["parent"], tuple(c["vector"])) for c in d["classes"]
            ),
            attributes=tuple(
                WorldAttribute(a["name"], a["phrase"], tuple(a["vector"]), dict(a["prior"]))
                for a in d["attributes"]
            ),
            bias_links=tuple(
                BiasLink(b["attribute"], b["target"], float(b["weight"])) for b in d["bias_links"]
            ),
            noise_sigma=float(d["noise_sigma"]),
            caption_drop_prob=float(d["caption_drop_prob"]),
            generator_wrong_label_prob=float(d["generator_wrong_label_prob"]),
            dim=int(d["dim"]),
            lenient_prompts=bool(d.get("lenient_prompts", True)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "WorldConfig":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def default_world() -> WorldConfig:
    return WorldConfig.load(Path(__file__).parent / "data" / "default_world.json")


# ---------------------------------------------------------------------------
# Latent image codec


@dataclass(frozen=True)
class Latent:
    label: str
    attributes: frozenset[str]
    noise_seed: int

    def to_json(self) -> dict:
        return {"label": self.label, "attrs": sorted(self.attributes), "noise_seed": self.noise_seed}

    @classmethod
    def from_json(cls, d: dict) -> "Latent":
        return cls(d["label"], frozenset(d["attrs"]), int(d["noise_seed"]))


class DecodeError(ValueError):
    pass


def render_latent(latent: Latent) -> bytes:
    """Encode a latent as a blocky RGB PNG; lossless and injective."""
    payload = canonical_json(latent.to_json())
    data = len(payload).to_bytes(4, "big") + payload
    npix = math.ceil(len(data) / 3)
    rows = math.ceil(npix / _WIDTH)
    arr = np.zeros(rows * _WIDTH * 3, dtype=np.uint8)
    arr[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    arr = arr.reshape(rows, _WIDTH, 3)
    big = np.kron(arr, np.ones((_BLOCK, _BLOCK, 1), dtype=np.uint8))
    buf = io.BytesIO()
    Image.fromarray(big, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_latent(png: bytes) -> Latent:
    try:
        arr = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
    except Exception as exc:
        raise DecodeError(f"not a PNG image: {exc}") from exc
    small = arr[::_BLOCK, ::_BLOCK, :]
    flat = small.reshape(-1).tobytes()
    if len(flat) < 4:
        raise DecodeError("image too small to carry a latent")
    length = int.from_bytes(flat[:4], "big")
    if length <= 0 or 4 + length > len(flat):
        raise DecodeError("corrupt latent length header")
    try:
        return Latent.from_json(json.loads(flat[4 : 4 + length].decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise DecodeError(f"corrupt latent payload: {exc}") from exc


# ---------------------------------------------------------------------------
# Prompt parsing


def parse_prompt(cfg: WorldConfig, prompt: str) -> tuple[str, frozenset[str], list[str]]:
    """Resolve a rendered caption to (class label, forced attributes, warnings)."""
    caption = Caption.parse(prompt)
    name, _parent = parse_base_prompt(caption.base)
    hierarchy = cfg.hierarchy
    label = hierarchy.label_for_name(name)
    if label is None or hierarchy.parent(label) is None:
        raise CaptionParseError(f"prompt names unknown class {name!r}")
    forced: set[str] = set()
    warnings: list[str] = []
    for sentence in caption.sentences:
        attr = cfg.attribute_by_phrase(sentence)
        if attr is None:
            if not cfg.lenient_prompts:
                raise CaptionParseError(f"unknown attribute phrase {sentence!r}")
            warnings.append(f"ignoring unknown attribute phrase {sentence!r}")
        else:
            forced.add(attr.name)
    return label, frozenset(forced), warnings


# ---------------------------------------------------------------------------
# Model endpoints (all pure functions of config + inputs)


def world_generate(cfg: WorldConfig, prompt: str, n: int, seed: int) -> list[bytes]:
    """Sample ``n`` PNG images for a prompt; deterministic in (prompt, seed, index)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    label, forced, _warnings = parse_prompt(cfg, prompt)
    labels = [c.label for c in cfg.classes]
    out = []
    for index in range(n):
        rng = np.random.default_rng(derive_seed("world-gen", prompt, seed, index))
        actual = label
        if cfg.generator_wrong_label_prob > 0 and rng.random() < cfg.generator_wrong_label_prob:
            actual = labels[rng.integers(len(labels))]
        present = set(forced)
        for attr in cfg.attributes:
            if attr.name in present:
                continue
            if rng.random() < attr.prior.get(actual, 0.0):
                present.add(attr.name)
        noise_seed = int(rng.integers(2**32))
        out.append(render_latent(Latent(actual, frozenset(present), noise_seed)))
    return out


def _class_scores(cfg: WorldConfig, png: bytes) -> list[tuple[str, float]]:
    latent = decode_latent(png)
    digest = sha256_hex(png)
    true_vec = np.array(cfg.class_by_label(latent.label).vector)
    feat = true_vec.copy()
    for name in latent.attributes:
        feat = feat + np.array(cfg.attribute_by_name(name).vector)
    scored = []
    for c in cfg.classes:
        s = float(np.dot(np.array(c.vector), feat))
        for link in cfg.bias_links:
            if link.target == c.label and link.attribute in latent.attributes:
                s += link.weight
        if cfg.noise_sigma > 0:
            noise_rng = np.random.default_rng(derive_seed("world-clsnoise", digest, c.label))
            s += cfg.noise_sigma * float(noise_rng.standard_normal())
        scored.append((c.label, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def world_classify(cfg: WorldConfig, png: bytes, k: int = 3) -> Prediction:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(cfg.classes):
        raise ValueError(f"k={k} exceeds label set size {len(cfg.classes)}")
    return Prediction(tuple(_class_scores(cfg, png)[:k]))


def world_caption(cfg: WorldConfig, png: bytes, prefix: str, max_sentences: int) -> Caption:
    """Describe an image: the prefix plus phrases of present, non-dropped attributes."""
    latent = decode_latent(png)
    digest = sha256_hex(png)
    rng = np.random.default_rng(derive_seed("world-caption", digest))
    sentences = []
    for attr in cfg.attributes:  # canonical attribute order
        if attr.name not in latent.attributes:
            continue
        if rng.random() < cfg.caption_drop_prob:
            continue
        sentences.append(attr.phrase)
    base = Caption.parse(prefix)
    return base.with_sentences(tuple(base.sentences) + tuple(sentences[: max(0, max_sentences)]))


def world_score(cfg: WorldConfig, png: bytes, caption_text: str) -> float:
    """Exact log-likelihood of a caption's sentence set under the drop model."""
    latent = decode_latent(png)
    claimed = set(Caption.parse(caption_text).sentences)
    p = cfg.caption_drop_prob
    log_drop = math.log(p) if p > 0 else SCORE_FLOOR
    log_keep = math.log(1 - p) if p < 1 else SCORE_FLOOR
    ll = 0.0
    for attr in cfg.attributes:
        if attr.name in latent.attributes:
            ll += log_keep if attr.phrase in claimed else log_drop
        elif attr.phrase in claimed:
            ll += SCORE_FLOOR
    return max(ll, SCORE_FLOOR)


def world_embed(cfg: WorldConfig, png: bytes, space: str) -> list[float]:
    if space not in EMBED_SPACES:
        raise ValueError(f"unknown embedding space {space!r}")
    latent = decode_latent(png)
    digest = sha256_hex(png)
    vec = np.zeros(cfg.dim)
    for name in latent.attributes:
        weight = 1.0
        if space == "cluster":
            # the cluster space mimics a feature space derived from the
            # classifier under test, which over-represents exactly the
            # attributes the classifier is sensitive to
            weight += sum(abs(b.weight) for b in cfg.bias_links if b.attribute == name)
        vec = vec + weight * np.array(cfg.attribute_by_name(name).vector)
    noise_scale = 0.01
    if space == "fid":
        vec = vec + np.array(cfg.class_by_label(latent.label).vector)
        noise_scale = 0.05
    rng = np.random.default_rng(derive_seed("world-embed", space, digest))
    vec = vec + noise_scale * rng.standard_normal(cfg.dim)
    return [float(v) for v in vec]


# ---------------------------------------------------------------------------
# HTTP service for the gateway wire protocol


def build_world_app(cfg: WorldConfig):
    """FastAPI app serving the gateway wire protocol for this world."""
    import base64

    from fastapi import FastAPI
    from fastapi.responses import JSONResponse

    app = FastAPI(title="spurfinder synthetic world")

    def err(status: int, message: str, retryable: bool = False):
        return JSONResponse({"error": message, "retryable": retryable}, status_code=status)

    @app.post("/v1/generate")
    async def generate(body: dict):
        try:
            images = world_generate(cfg, body["prompt"], int(body["n"]), int(body["seed"]))
        except (CaptionParseError, ValueError, ConfigError) as exc:
            return err(400, str(exc))
        return {
            "images": [
                {"index": i, "png_base64": base64.b64encode(png).decode("ascii")}
                for i, png in enumerate(images)
            ]
        }

    @app.post("/v1/classify")
    async def classify(body: dict):
        try:
            pred = world_classify(cfg, base64.b64decode(body["png_base64"]), int(body.get("k", 3)))
        except (DecodeError, ValueError, ConfigError) as exc:
            return err(400, str(exc))
        return {"topk": pred.to_json()}

    @app.post("/v1/caption")
    async def caption(body: dict):
        try:
            cap = world_caption(
                cfg,
                base64.b64decode(body["png_base64"]),
                body["prefix"],
                int(body.get("max_sentences", 4)),
            )
        except (DecodeError, CaptionParseError, ValueError) as exc:
            return err(400, str(exc))
        return {"caption": cap.render()}

    @app.post("/v1/score")
    async def score(body: dict):
        try:
            ll = world_score(cfg, base64.b64decode(body["png_base64"]), body["caption"])
        except (DecodeError, CaptionParseError, ValueError) as exc:
            return err(400, str(exc))
        return {"log_likelihood": ll}

    @app.post("/v1/embed")
    async def embed(body: dict):
        try:
            vec = world_embed(cfg, base64.b64decode(body["png_base64"]), body["space"])
        except (DecodeError, ValueError, ConfigError) as exc:
            return err(400, str(exc))
        return {"vector": vec, "dim": len(vec)}

    return app
