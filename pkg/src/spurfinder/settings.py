"""Runtime settings shared by the CLI and the API server.

Settings come from a key=value config file (``#`` comments allowed),
with the run directory defaulting to ``$SPURFINDER_RUN_ROOT``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .core import ConfigError, FailurePolicy, FailureRule, LabelHierarchy
from .discovery import StopRule
from .gateway import Gateway, HttpBackend, RetryPolicy, ServiceEndpoint, WorldBackend
from .pipeline import PipelineConfig
from .store import BlobStore
from .synthworld import WorldConfig, default_world

RUN_ROOT_ENV = "SPURFINDER_RUN_ROOT"


@dataclass(frozen=True)
class Settings:
    backend: str = "synth"  # synth | http
    world: str = "default"  # world config path, or "default"
    base_url: str = ""
    auth_token: Optional[str] = None
    hierarchy_path: Optional[str] = None
    seed: int = 0
    policy_variant: str = FailureRule.TOP1_WRONG_OUTSIDE_PARENT.value
    policy_k: int = 3
    parent_rule: str = "all"
    target_failures: int = 60
    max_samples: int = 4000
    batch_size: int = 64
    max_caption_sentences: int = 2
    captioner_max_sentences: int = 4
    tau: float = 0.3
    max_clusters: int = 16
    max_hypotheses: int = 3
    refine_budget: int = 8
    max_in_flight: int = 8
    fewshot_profile: str = "default"
    run_root: Optional[str] = None

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return d

    # -- derived objects -------------------------------------------------

    @property
    def policy(self) -> FailurePolicy:
        return FailurePolicy(
            variant=FailureRule(self.policy_variant), k=self.policy_k, parent_rule=self.parent_rule
        )

    @property
    def stop(self) -> StopRule:
        return StopRule(
            target_failures=self.target_failures,
            max_samples=self.max_samples,
            batch_size=self.batch_size,
        )

    @property
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            policy=self.policy,
            stop=self.stop,
            max_caption_sentences=self.max_caption_sentences,
            captioner_max_sentences=self.captioner_max_sentences,
            tau=self.tau,
            max_clusters=self.max_clusters,
            max_hypotheses=self.max_hypotheses,
            refine_budget=self.refine_budget,
            seed=self.seed,
        )

    def world_config(self) -> WorldConfig:
        if self.world == "default":
            return default_world()
        return WorldConfig.load(self.world)

    def load_hierarchy(self) -> LabelHierarchy:
        if self.hierarchy_path:
            return LabelHierarchy.load(self.hierarchy_path)
        if self.backend == "synth":
            return self.world_config().hierarchy
        raise ConfigError("http backend requires a hierarchy file (hierarchy_path=...)")

    def build_gateway(self, blobs: BlobStore, hierarchy: LabelHierarchy) -> Gateway:
        if self.backend == "synth":
            endpoint = ServiceEndpoint(base_url="inprocess://world", max_in_flight=self.max_in_flight)
            return Gateway(WorldBackend(self.world_config()), blobs, endpoint, hierarchy, jitter_seed=self.seed)
        if self.backend == "http":
            if not self.base_url:
                raise ConfigError("http backend requires base_url")
            endpoint = ServiceEndpoint(
                base_url=self.base_url,
                max_in_flight=self.max_in_flight,
                retry=RetryPolicy(),
                auth_token=self.auth_token,
            )
            return Gateway(HttpBackend(endpoint), blobs, endpoint, hierarchy, jitter_seed=self.seed)
        raise ConfigError(f"unknown backend {self.backend!r}")

    def resolve_run_root(self) -> Path:
        root = self.run_root or os.environ.get(RUN_ROOT_ENV)
        if not root:
            raise ConfigError(
                f"no run directory configured; set {RUN_ROOT_ENV} or pass --run-root"
            )
        return Path(root)


_FIELD_ALIASES = {
    "policy": "policy_variant",
    "k": "policy_k",
    "hierarchy": "hierarchy_path",
}

_INT_FIELDS = {
    "seed", "policy_k", "target_failures", "max_samples", "batch_size",
    "max_caption_sentences", "captioner_max_sentences", "max_clusters",
    "max_hypotheses", "refine_budget", "max_in_flight",
}
_FLOAT_FIELDS = {"tau"}


def parse_settings(text: str, base: Optional[Settings] = None) -> Settings:
    """Parse key=value lines into a Settings, starting from ``base``."""
    out = base or Settings()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _FIELD_ALIASES.get(key, key)
        if key not in Settings.__dataclass_fields__:
            raise ConfigError(f"config line {lineno}: unknown setting {key!r}")
        if key in _INT_FIELDS:
            try:
                parsed: object = int(value)
            except ValueError:
                raise ConfigError(f"config line {lineno}: {key} must be an integer")
        elif key in _FLOAT_FIELDS:
            try:
                parsed = float(value)
            except ValueError:
                raise ConfigError(f"config line {lineno}: {key} must be a number")
        elif value.lower() in ("none", ""):
            parsed = None
        else:
            parsed = value
        out = replace(out, **{key: parsed})
    return out


def load_settings(path: Optional[str | Path] = None, **overrides) -> Settings:
    s = Settings()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        s = parse_settings(p.read_text("utf-8"), s)
    cleaned = {k: v for k, v in overrides.items() if v is not None}
    if cleaned:
        s = replace(s, **cleaned)
    return s
