"""Independent Monte-Carlo oracle for synthetic-world failure rates.

Reimplements the world's generative and scoring process from scratch in
plain Python (no shared code with ``synthworld.world_classify``), so
pipeline measurements can be checked against ground truth.
"""

from __future__ import annotations

import random
from typing import Optional

from .core import FailurePolicy, is_failure, Prediction
from .synthworld import WorldConfig, parse_prompt


def _draw_prediction(cfg: WorldConfig, prompt_label: str, forced: frozenset[str], rng: random.Random) -> tuple[str, Prediction]:
    """One simulated generate+classify round; returns (actual label, prediction)."""
    labels = [c.label for c in cfg.classes]
    actual = prompt_label
    if rng.random() < cfg.generator_wrong_label_prob:
        actual = labels[rng.randrange(len(labels))]
    present = set(forced)
    for attr in cfg.attributes:
        if attr.name in present:
            continue
        if rng.random() < attr.prior.get(actual, 0.0):
            present.add(attr.name)
    # feature vector: true class vector plus attribute vectors, built by hand
    feat = [0.0] * cfg.dim
    for c in cfg.classes:
        if c.label == actual:
            for i in range(cfg.dim):
                feat[i] += c.vector[i]
    for a in cfg.attributes:
        if a.name in present:
            for i in range(cfg.dim):
                feat[i] += a.vector[i]
    scored = []
    for c in cfg.classes:
        s = 0.0
        for i in range(cfg.dim):
            s += c.vector[i] * feat[i]
        for link in cfg.bias_links:
            if link.target == c.label and link.attribute in present:
                s += link.weight
        if cfg.noise_sigma > 0:
            s += rng.gauss(0.0, cfg.noise_sigma)
        scored.append((c.label, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return actual, Prediction(tuple(scored))


def oracle_rate(
    cfg: WorldConfig,
    caption_text: str,
    label: str,
    target: Optional[str],
    policy: FailurePolicy,
    draws: int,
    seed: int,
) -> float:
    """Monte-Carlo failure rate for a caption.

    With ``target`` set, the rate of top-1 predictions equal to the
    target; otherwise the rate of failures under ``policy``. The truth
    label for the failure predicate is the prompt label, matching how the
    pipeline scores classifications against the requested class.
    """
    prompt_label, forced, _ = parse_prompt(cfg, caption_text)
    if prompt_label != label:
        raise ValueError(f"caption names class {prompt_label!r}, expected {label!r}")
    hierarchy = cfg.hierarchy
    rng = random.Random(seed)
    hits = 0
    for _ in range(draws):
        _actual, pred = _draw_prediction(cfg, prompt_label, forced, rng)
        if target is not None:
            if pred.top1 == target:
                hits += 1
        else:
            topk = Prediction(pred.topk[: policy.k])
            if is_failure(topk, label, policy, hierarchy):
                hits += 1
    return hits / draws
