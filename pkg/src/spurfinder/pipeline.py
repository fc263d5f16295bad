"""End-to-end discovery runs: baseline, clustering, caption assembly,
measurement, and refinement, wired through the gateway and run store."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import FailurePolicy, FailureRule, LabelHierarchy, build_base_prompt
from .discovery import (
    AssemblyResult,
    BaselineResult,
    Cluster,
    Hypothesis,
    StopRule,
    assemble_caption,
    cluster_failures,
    measure_hypothesis,
    sample_baseline,
)
from .gateway import Gateway
from .refine import RefinementReport, refine
from .store import RunManifest
from .util import derive_seed


@dataclass(frozen=True)
class PipelineConfig:
    """Tunable knobs of one discovery run."""

    policy: FailurePolicy = field(
        default_factory=lambda: FailurePolicy(variant=FailureRule.TOP1_WRONG_OUTSIDE_PARENT, k=3)
    )
    stop: StopRule = field(default_factory=lambda: StopRule(target_failures=60, max_samples=4000, batch_size=64))
    max_caption_sentences: int = 2  # K: sentences added by greedy assembly
    captioner_max_sentences: int = 4  # per captioning request
    tau: float = 0.3
    # roomier than the clustering default: scattered noise-driven failures
    # otherwise get force-merged into the dominant cluster, poisoning the
    # summed-score assembly with members that lack the cluster's attribute
    max_clusters: int = 16
    max_hypotheses: int = 3  # clusters tried per run
    refine_budget: int = 8
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "policy": self.policy.to_json(),
            "stop": self.stop.to_json(),
            "max_caption_sentences": self.max_caption_sentences,
            "captioner_max_sentences": self.captioner_max_sentences,
            "tau": self.tau,
            "max_clusters": self.max_clusters,
            "max_hypotheses": self.max_hypotheses,
            "refine_budget": self.refine_budget,
            "seed": self.seed,
        }


@dataclass
class DiscoveryReport:
    label: str
    target: Optional[str]
    baseline: BaselineResult
    clusters: list[Cluster]
    assemblies: list[AssemblyResult]
    hypotheses: list[Hypothesis]
    refinement: Optional[RefinementReport]

    @property
    def best(self) -> Optional[Hypothesis]:
        if self.refinement is not None:
            return self.refinement.best_hypothesis
        confirmed = [h for h in self.hypotheses if h.confirmed]
        return confirmed[0] if confirmed else None


def _hyp_sort_key(h: Hypothesis):
    rate = h.target_rate.p if h.target_rate is not None else h.any_rate.p
    return (-int(h.confirmed), -rate, h.caption.render())


def discover(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    label: str,
    target: Optional[str] = None,
    config: PipelineConfig = PipelineConfig(),
    run: Optional[RunManifest] = None,
    progress=None,
) -> DiscoveryReport:
    """Run the full discovery loop for one label (optionally targeted)."""
    base = build_base_prompt(label, hierarchy)
    baseline_seed = derive_seed(config.seed, "baseline", label, base.render())
    baseline = sample_baseline(
        gateway, hierarchy, label, config.policy, config.stop, baseline_seed,
        target=target, run=run, progress=progress,
    )
    # attach clustering embeddings to the failures
    failures = [
        s.with_embedding("cluster", gateway.embed(s.image, "cluster")) for s in baseline.failures
    ]
    clusters = cluster_failures(failures, tau=config.tau, max_clusters=config.max_clusters)
    if run is not None:
        for c in clusters:
            if run.find("cluster", id=c.id) is None:
                run.append("cluster", c.to_json())
    if target is not None:
        candidates = [c for c in clusters if c.predicted_label == target]
    else:
        candidates = sorted(clusters, key=lambda c: -len(c.members))
    candidates = candidates[: config.max_hypotheses]

    assemblies: list[AssemblyResult] = []
    hypotheses: list[Hypothesis] = []
    for cluster in candidates:
        assembly = assemble_caption(
            gateway, cluster, base, config.max_caption_sentences,
            caption_max_sentences=config.captioner_max_sentences,
        )
        assemblies.append(assembly)
        if assembly.caption.render() == base.render():
            continue  # nothing beyond the base prompt: not a hypothesis
        seed = derive_seed(config.seed, "measure", label, assembly.caption.render())
        hypotheses.append(
            measure_hypothesis(
                gateway, hierarchy, assembly.caption, label, target, config.policy,
                config.stop, seed, baseline, run=run, progress=progress,
            )
        )
    refinement = None
    hypotheses.sort(key=_hyp_sort_key)
    best = next((h for h in hypotheses if h.confirmed), None)
    if best is not None and best.caption.sentences:
        refinement = refine(
            gateway, hierarchy, best, config.policy, config.stop, baseline,
            derive_seed(config.seed, "refine", label, best.caption.render()),
            budget=config.refine_budget, run=run,
        )
    return DiscoveryReport(
        label=label,
        target=target,
        baseline=baseline,
        clusters=clusters,
        assemblies=assemblies,
        hypotheses=hypotheses,
        refinement=refinement,
    )
