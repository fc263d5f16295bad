"""Failure discovery: baseline sampling, failure filtering, clustering,
greedy caption assembly, and hypothesis measurement.

Sampling is batched; stopping decisions happen only at batch boundaries
so results are independent of request completion order. When a run
store is supplied, every batch is recorded and replayed on resume,
which makes interrupted measurements complete byte-identically.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    Caption,
    FailurePolicy,
    LabelHierarchy,
    Sample,
    build_base_prompt,
    is_failure,
)
from .gateway import CaptionRequest, Gateway, GenerationRequest, ScoreRequest
from .stats import RateEstimate, wilson_ci
from .store import RunManifest
from .util import sha256_hex


@dataclass(frozen=True)
class StopRule:
    """When to stop a sampling loop: enough failures or the sample budget."""

    target_failures: int = 20
    max_samples: int = 20000
    batch_size: int = 64

    def __post_init__(self):
        if min(self.target_failures, self.max_samples, self.batch_size) < 1:
            raise ValueError("stop-rule fields must all be >= 1")
        if self.batch_size > self.max_samples:
            raise ValueError("batch size cannot exceed the sample budget")

    def to_json(self) -> dict:
        return {
            "target_failures": self.target_failures,
            "max_samples": self.max_samples,
            "batch_size": self.batch_size,
        }


def caption_hash(caption: Caption) -> str:
    return sha256_hex(caption.render().encode("utf-8"))[:16]


# ---------------------------------------------------------------------------
# Sampling loop (shared by baseline and hypothesis measurement)


@dataclass
class SamplingOutcome:
    n: int
    any_failures: int
    failures: list[Sample]
    top1_counts: dict[str, int]  # top-1 label counts over all samples
    failure_top1_counts: dict[str, int]  # top-1 label counts over failures only


ProgressFn = Callable[[int, int], None]


def run_sampling(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    caption: Caption,
    label: str,
    target: Optional[str],
    policy: FailurePolicy,
    stop: StopRule,
    seed: int,
    run: Optional[RunManifest] = None,
    stage: str = "baseline",
    progress: Optional[ProgressFn] = None,
) -> SamplingOutcome:
    """Generate-and-classify in batches until the stop rule fires.

    Batch ``b`` uses seed ``seed + b``. In targeted mode the loop stops
    once ``stop.target_failures`` samples have top-1 equal to the
    target; otherwise once that many policy failures are gathered.
    """
    stage_key = f"{stage}:{label}:{caption_hash(caption)}:{target or '-'}"
    prompt = caption.render()
    n_total = 0
    any_failures = 0
    failures: list[Sample] = []
    top1_counts: Counter = Counter()
    failure_top1_counts: Counter = Counter()
    b = 0
    while n_total < stop.max_samples:
        batch_n = min(stop.batch_size, stop.max_samples - n_total)
        record = run.find("batch", stage=stage_key, batch=b) if run is not None else None
        if record is None:
            samples = gateway.generate(GenerationRequest(prompt=prompt, n=batch_n, seed=seed + b))
            preds = gateway.classify_many([s.image for s in samples], policy.k)
            batch_failures = []
            batch_top1: Counter = Counter()
            batch_fail_top1: Counter = Counter()
            for sample, pred in zip(samples, preds):
                sample = sample.with_prediction(pred)
                batch_top1[pred.top1] += 1
                if is_failure(pred, label, policy, hierarchy):
                    batch_failures.append(sample)
                    batch_fail_top1[pred.top1] += 1
            record = {
                "stage": stage_key,
                "batch": b,
                "seed": seed + b,
                "n": batch_n,
                "any_failures": len(batch_failures),
                "top1_counts": dict(sorted(batch_top1.items())),
                "failure_top1_counts": dict(sorted(batch_fail_top1.items())),
                "failures": [s.to_json() for s in batch_failures],
            }
            if run is not None:
                run.append("batch", record)
        n_total += record["n"]
        any_failures += record["any_failures"]
        top1_counts.update(record["top1_counts"])
        failure_top1_counts.update(record["failure_top1_counts"])
        failures.extend(Sample.from_json(d) for d in record["failures"])
        if progress is not None:
            progress(n_total, any_failures)
        b += 1
        gathered = top1_counts.get(target, 0) if target is not None else any_failures
        if gathered >= stop.target_failures:
            break
    if n_total == 0:
        raise RuntimeError("sampling budget exhausted with zero samples classified")
    return SamplingOutcome(
        n=n_total,
        any_failures=any_failures,
        failures=failures,
        top1_counts=dict(top1_counts),
        failure_top1_counts=dict(failure_top1_counts),
    )


# ---------------------------------------------------------------------------
# Baseline


@dataclass
class BaselineResult:
    label: str
    caption: Caption
    n: int
    failures: list[Sample]
    any_rate: RateEstimate
    top1_counts: dict[str, int]
    failure_top1_counts: dict[str, int]
    id: str = ""

    @property
    def per_target_rates(self) -> dict[str, float]:
        """Failure top-1 distribution as rates; sums to at most the any-rate."""
        return {lbl: c / self.n for lbl, c in sorted(self.failure_top1_counts.items())}

    def target_rate(self, target: str, level: float = 0.95) -> RateEstimate:
        return wilson_ci(self.top1_counts.get(target, 0), self.n, level)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "caption": self.caption.render(),
            "n": self.n,
            "any_rate": self.any_rate.to_json(),
            "top1_counts": dict(sorted(self.top1_counts.items())),
            "failure_top1_counts": dict(sorted(self.failure_top1_counts.items())),
            "failures": [s.to_json() for s in self.failures],
        }

    @classmethod
    def from_json(cls, d: dict) -> "BaselineResult":
        return cls(
            label=d["label"],
            caption=Caption.parse(d["caption"]),
            n=int(d["n"]),
            failures=[Sample.from_json(s) for s in d["failures"]],
            any_rate=RateEstimate.from_json(d["any_rate"]),
            top1_counts={k: int(v) for k, v in d["top1_counts"].items()},
            failure_top1_counts={k: int(v) for k, v in d["failure_top1_counts"].items()},
            id=d["id"],
        )


def sample_baseline(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    label: str,
    policy: FailurePolicy,
    stop: StopRule,
    seed: int,
    target: Optional[str] = None,
    run: Optional[RunManifest] = None,
    progress: Optional[ProgressFn] = None,
) -> BaselineResult:
    caption = build_base_prompt(label, hierarchy)
    rid = f"baseline:{label}:{caption_hash(caption)}:{target or '-'}"
    if run is not None:
        stored = run.find("baseline", id=rid)
        if stored is not None:
            return BaselineResult.from_json(stored)
    outcome = run_sampling(
        gateway, hierarchy, caption, label, target, policy, stop, seed,
        run=run, stage="baseline", progress=progress,
    )
    result = BaselineResult(
        label=label,
        caption=caption,
        n=outcome.n,
        failures=outcome.failures,
        any_rate=wilson_ci(outcome.any_failures, outcome.n),
        top1_counts=outcome.top1_counts,
        failure_top1_counts=outcome.failure_top1_counts,
        id=rid,
    )
    if run is not None:
        run.append("baseline", result.to_json())
    return result


# ---------------------------------------------------------------------------
# Clustering


@dataclass
class Cluster:
    predicted_label: str
    members: list[Sample]
    centroid: tuple[float, ...]

    @property
    def id(self) -> str:
        # stable across reruns: keyed by label and the smallest member hash
        return f"cluster:{self.predicted_label}:{min(m.image for m in self.members)[:16]}"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "predicted_label": self.predicted_label,
            "members": [s.to_json() for s in self.members],
            "centroid": list(self.centroid),
        }


def _cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 1.0
    return float(1.0 - u @ v / (nu * nv))


def _average_linkage(groups: list[list[int]], dmat: np.ndarray, tau: float, max_clusters: int) -> list[list[int]]:
    """Merge clusters bottom-up; average linkage on the precomputed matrix.

    Merging continues while either the cluster count exceeds the hard
    cap or the closest pair is within tau.
    """
    clusters = [list(g) for g in groups]
    while len(clusters) > 1:
        best = None
        best_d = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                d = float(np.mean([dmat[a, b] for a in clusters[i] for b in clusters[j]]))
                if best_d is None or d < best_d - 1e-15:
                    best_d, best = d, (i, j)
        assert best is not None
        if len(clusters) <= max_clusters and best_d > tau:
            break
        i, j = best
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]
    return clusters


def cluster_failures(failures: Sequence[Sample], tau: float = 0.3, max_clusters: int = 8) -> list[Cluster]:
    """Partition failures by predicted label, then agglomerate by cosine distance."""
    if not 0.0 <= tau <= 2.0:
        raise ValueError("tau must lie in [0, 2]")
    by_label: dict[str, list[Sample]] = {}
    for s in failures:
        if s.prediction is None:
            raise ValueError(f"sample {s.image[:12]} has no prediction")
        if "cluster" not in s.embeddings:
            raise ValueError(f"sample {s.image[:12]} has no 'cluster' embedding")
        by_label.setdefault(s.prediction.top1, []).append(s)
    out: list[Cluster] = []
    for label in sorted(by_label):
        members = by_label[label]
        vecs = np.asarray([m.embeddings["cluster"] for m in members], float)
        n = len(members)
        dmat = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                dmat[i, j] = dmat[j, i] = _cosine_distance(vecs[i], vecs[j])
        merged = _average_linkage([[i] for i in range(n)], dmat, tau, max_clusters)
        clusters = []
        for idxs in merged:
            mem = [members[i] for i in idxs]
            centroid = tuple(float(v) for v in vecs[idxs].mean(axis=0))
            clusters.append(Cluster(predicted_label=label, members=mem, centroid=centroid))
        clusters.sort(key=lambda c: (-len(c.members), min(m.image for m in c.members)))
        out.extend(clusters)
    return out


# ---------------------------------------------------------------------------
# Greedy caption assembly


@dataclass
class AssemblyResult:
    caption: Caption
    pool: list[str]
    trace: list[dict] = field(default_factory=list)
    empty_pool: bool = False


def assemble_caption(
    gateway: Gateway,
    cluster: Cluster,
    base: Caption,
    K: int,
    caption_max_sentences: int = 4,
    fewshot_profile: str = "default",
) -> AssemblyResult:
    """Greedy sentence selection maximizing the summed caption score.

    The sentence pool is the union of sentences obtained by captioning
    every cluster member. At each step the sentence with the highest
    summed score across members is added; ties break lexicographically;
    selection stops after K sentences or when no candidate improves the
    summed score.
    """
    if not cluster.members:
        raise ValueError("cluster has no members")
    pool: set[str] = set()
    for member in cluster.members:
        cap = gateway.caption(
            CaptionRequest(
                image=member.image,
                prefix=base.render(),
                max_sentences=caption_max_sentences,
                fewshot_profile=fewshot_profile,
            )
        )
        pool.update(cap.sentences[len(base.sentences):])
    if not pool:
        return AssemblyResult(caption=base, pool=[], empty_pool=True)

    def summed_score(cap: Caption) -> float:
        texts = cap.render()
        return sum(
            gateway.score_caption(ScoreRequest(image=m.image, caption=texts)) for m in cluster.members
        )

    chosen: list[str] = []
    current = summed_score(base)
    trace: list[dict] = []
    for _step in range(K):
        best_sentence = None
        best_total = None
        for s in sorted(pool):
            if s in chosen:
                continue
            total = summed_score(base.with_sentences(tuple(base.sentences) + tuple(chosen) + (s,)))
            if best_total is None or total > best_total + 1e-12:
                best_total, best_sentence = total, s
        if best_sentence is None or best_total <= current + 1e-12:
            break
        chosen.append(best_sentence)
        trace.append({"sentence": best_sentence, "score": best_total})
        current = best_total
    return AssemblyResult(
        caption=base.with_sentences(tuple(base.sentences) + tuple(chosen)),
        pool=sorted(pool),
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Hypothesis measurement


@dataclass
class Hypothesis:
    label: str
    target: Optional[str]
    caption: Caption
    n: int
    any_rate: RateEstimate
    target_rate: Optional[RateEstimate]
    baseline_ref: str
    baseline_any: RateEstimate
    baseline_target: Optional[RateEstimate]
    ratio_any: Optional[float]
    ratio_target: Optional[float]
    confirmed: bool
    top1_counts: dict[str, int] = field(default_factory=dict)
    failure_top1_counts: dict[str, int] = field(default_factory=dict)
    origin: str = "auto"
    id: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "target": self.target,
            "caption": self.caption.render(),
            "n": self.n,
            "any_rate": self.any_rate.to_json(),
            "target_rate": self.target_rate.to_json() if self.target_rate else None,
            "baseline_ref": self.baseline_ref,
            "baseline_any": self.baseline_any.to_json(),
            "baseline_target": self.baseline_target.to_json() if self.baseline_target else None,
            "ratio_any": self.ratio_any,
            "ratio_target": self.ratio_target,
            "confirmed": self.confirmed,
            "top1_counts": dict(sorted(self.top1_counts.items())),
            "failure_top1_counts": dict(sorted(self.failure_top1_counts.items())),
            "origin": self.origin,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Hypothesis":
        return cls(
            label=d["label"],
            target=d.get("target"),
            caption=Caption.parse(d["caption"]),
            n=int(d["n"]),
            any_rate=RateEstimate.from_json(d["any_rate"]),
            target_rate=RateEstimate.from_json(d["target_rate"]) if d.get("target_rate") else None,
            baseline_ref=d["baseline_ref"],
            baseline_any=RateEstimate.from_json(d["baseline_any"]),
            baseline_target=RateEstimate.from_json(d["baseline_target"]) if d.get("baseline_target") else None,
            ratio_any=d.get("ratio_any"),
            ratio_target=d.get("ratio_target"),
            confirmed=bool(d["confirmed"]),
            top1_counts={k: int(v) for k, v in d.get("top1_counts", {}).items()},
            failure_top1_counts={k: int(v) for k, v in d.get("failure_top1_counts", {}).items()},
            origin=d.get("origin", "auto"),
            id=d["id"],
        )


def measure_hypothesis(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    caption: Caption,
    label: str,
    target: Optional[str],
    policy: FailurePolicy,
    stop: StopRule,
    seed: int,
    baseline: BaselineResult,
    run: Optional[RunManifest] = None,
    origin: str = "auto",
    progress: Optional[ProgressFn] = None,
) -> Hypothesis:
    """Measure a caption's failure rate and compare it against the baseline.

    Confirmation requires the hypothesis rate's lower confidence bound
    to clear the baseline rate's upper bound (target rates when a target
    is set, any-failure rates otherwise).
    """
    base_prompt = build_base_prompt(label, hierarchy)
    if caption.base != base_prompt.base:
        raise ValueError(
            f"caption base {caption.base!r} does not match the label's base prompt {base_prompt.base!r}"
        )
    rid = f"hypothesis:{label}:{caption_hash(caption)}:{target or '-'}"
    if run is not None:
        stored = run.find("hypothesis", id=rid)
        if stored is not None:
            return Hypothesis.from_json(stored)
    outcome = run_sampling(
        gateway, hierarchy, caption, label, target, policy, stop, seed,
        run=run, stage="measure", progress=progress,
    )
    any_rate = wilson_ci(outcome.any_failures, outcome.n)
    target_rate = None
    baseline_target = None
    ratio_target = None
    if target is not None:
        target_rate = wilson_ci(outcome.top1_counts.get(target, 0), outcome.n)
        baseline_target = baseline.target_rate(target)
        if baseline_target.p > 0:
            ratio_target = target_rate.p / baseline_target.p
    ratio_any = any_rate.p / baseline.any_rate.p if baseline.any_rate.p > 0 else None
    if target is not None:
        confirmed = target_rate.ci_lo > baseline_target.ci_hi
    else:
        confirmed = any_rate.ci_lo > baseline.any_rate.ci_hi
    hyp = Hypothesis(
        label=label,
        target=target,
        caption=caption,
        n=outcome.n,
        any_rate=any_rate,
        target_rate=target_rate,
        baseline_ref=baseline.id,
        baseline_any=baseline.any_rate,
        baseline_target=baseline_target,
        ratio_any=ratio_any,
        ratio_target=ratio_target,
        confirmed=confirmed,
        top1_counts=outcome.top1_counts,
        failure_top1_counts=outcome.failure_top1_counts,
        origin=origin,
        id=rid,
    )
    if run is not None:
        run.append("hypothesis", hyp.to_json())
    return hyp
