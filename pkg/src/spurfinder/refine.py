"""Caption refinement: sentence ablation, adjective dropping, and
counterfactual measurement of user-edited captions.

Refinement is a flat two-rule procedure: measure each single-sentence
ablation of the discovered caption, then drop adjectives from the best
one and measure those variants too.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import Caption, CaptionParseError, FailurePolicy, LabelHierarchy, build_base_prompt
from .discovery import BaselineResult, Hypothesis, StopRule, measure_hypothesis
from .gateway import Gateway
from .store import RunManifest

# Colors, sizes and materials commonly emitted by captioners; dropping
# one of these words should leave a grammatical sentence.
ADJECTIVE_LEXICON = frozenset(
    """
    red orange yellow green blue purple pink brown black white grey gray
    golden silver beige tan turquoise teal maroon navy violet magenta cyan
    crimson scarlet olive ivory cream amber coral salmon khaki lavender
    lilac mint peach plum rust charcoal bronze copper pearl rosy ruby
    emerald sapphire jade indigo azure cobalt burgundy mustard lime aqua
    big small large little tiny huge giant enormous massive miniature
    tall short long wide narrow thick thin broad slim petite colossal
    gigantic immense vast compact oversized undersized medium jumbo
    wooden metal metallic plastic glass stone rubber leather paper cotton
    woolen silk steel iron brass ceramic marble concrete brick velvet
    denim fur furry fuzzy shiny glossy matte rough smooth soft hard
    transparent opaque clear dull bright dark light pale vivid colorful
    striped spotted checkered plain patterned
    """.split()
)


@dataclass
class RefinementCandidate:
    caption: Caption
    hypothesis: Optional[Hypothesis]  # None when unmeasured
    status: str = "measured"  # measured | unmeasured | failed
    error: Optional[str] = None

    def rate(self, targeted: bool) -> float:
        assert self.hypothesis is not None
        if targeted and self.hypothesis.target_rate is not None:
            return self.hypothesis.target_rate.p
        return self.hypothesis.any_rate.p

    def to_json(self) -> dict:
        return {
            "caption": self.caption.render(),
            "hypothesis": self.hypothesis.to_json() if self.hypothesis else None,
            "status": self.status,
            "error": self.error,
        }


@dataclass
class RefinementReport:
    origin: Hypothesis
    candidates: list[RefinementCandidate] = field(default_factory=list)
    best: Optional[int] = None  # index into candidates; None means the origin wins

    @property
    def best_hypothesis(self) -> Hypothesis:
        if self.best is None:
            return self.origin
        hyp = self.candidates[self.best].hypothesis
        assert hyp is not None
        return hyp

    def to_json(self) -> dict:
        return {
            "origin": self.origin.id,
            "candidates": [c.to_json() for c in self.candidates],
            "best": self.best,
        }


def ablate_sentences(caption: Caption) -> list[Caption]:
    """One candidate per sentence: the base plus that sentence alone."""
    if not caption.sentences:
        raise ValueError("caption has no sentences to ablate")
    return [Caption(caption.base, (s,)) for s in caption.sentences]


_WORD_RE = re.compile(r"[a-zA-Z]+")


def _drop_words(sentence: str, words: set[str]) -> str:
    tokens = sentence.split(" ")
    kept = [t for t in tokens if _WORD_RE.fullmatch(t.rstrip(".")) is None or t.rstrip(".").lower() not in words]
    # dropping the final token must not lose the terminator
    out = " ".join(kept).strip()
    if not out.endswith("."):
        out = (out + ".") if out else "."
    return re.sub(r"  +", " ", out)


def drop_adjectives(sentence: str, lexicon: frozenset[str] = ADJECTIVE_LEXICON) -> list[str]:
    """Variants of a sentence with lexicon adjectives removed.

    Emits one variant per single dropped word plus the all-dropped
    variant, ordered by number of dropped words ascending, then by the
    dropped word set; returns [] when no lexicon word is present.
    """
    if not sentence:
        raise ValueError("sentence is empty")
    hits = sorted(
        {t.rstrip(".").lower() for t in sentence.split(" ")} & set(lexicon)
    )
    if not hits:
        return []
    variants: list[str] = []
    seen = set()
    for word in hits:
        v = _drop_words(sentence, {word})
        if v != sentence and v not in seen:
            seen.add(v)
            variants.append(v)
    if len(hits) > 1:
        v = _drop_words(sentence, set(hits))
        if v != sentence and v not in seen:
            seen.add(v)
            variants.append(v)
    return variants


def _pick_best(candidates: Sequence[RefinementCandidate], targeted: bool) -> Optional[int]:
    best = None
    for i, cand in enumerate(candidates):
        if cand.status != "measured":
            continue
        key = (
            -cand.rate(targeted),
            len(cand.caption.sentences),
            cand.caption.render(),
        )
        if best is None or key < best[0]:
            best = (key, i)
    return None if best is None else best[1]


def refine(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    hyp: Hypothesis,
    policy: FailurePolicy,
    stop: StopRule,
    baseline: BaselineResult,
    seed: int,
    budget: int = 8,
    lexicon: frozenset[str] = ADJECTIVE_LEXICON,
    run: Optional[RunManifest] = None,
) -> RefinementReport:
    """Two-rule refinement: sentence ablations first, then adjective drops
    of the most promising ablation. Never exceeds ``budget`` candidate
    measurements; leftover candidates are kept but marked unmeasured."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    report = RefinementReport(origin=hyp)
    if not hyp.caption.sentences:
        if run is not None:
            run.append("refinement", report.to_json())
        return report
    targeted = hyp.target is not None
    measured = 0

    def measure(caption: Caption) -> RefinementCandidate:
        nonlocal measured
        if measured >= budget:
            return RefinementCandidate(caption=caption, hypothesis=None, status="unmeasured")
        measured += 1
        try:
            h = measure_hypothesis(
                gateway, hierarchy, caption, hyp.label, hyp.target, policy, stop, seed,
                baseline, run=run, origin="refine",
            )
            return RefinementCandidate(caption=caption, hypothesis=h)
        except Exception as exc:  # candidate failures do not abort refinement
            return RefinementCandidate(caption=caption, hypothesis=None, status="failed", error=str(exc))

    for cand_caption in ablate_sentences(hyp.caption):
        report.candidates.append(measure(cand_caption))
    best_idx = _pick_best(report.candidates, targeted)
    if best_idx is not None:
        best_caption = report.candidates[best_idx].caption
        for sentence in best_caption.sentences:
            for variant in drop_adjectives(sentence, lexicon):
                report.candidates.append(measure(Caption(best_caption.base, (variant,))))
    report.best = _pick_best(report.candidates, targeted)
    if run is not None:
        run.append("refinement", report.to_json())
    return report


def counterfactual(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    caption_text: str,
    label: str,
    target: Optional[str],
    policy: FailurePolicy,
    stop: StopRule,
    seed: int,
    baseline: BaselineResult,
    run: Optional[RunManifest] = None,
    progress=None,
) -> Hypothesis:
    """Measure a user-supplied caption; identical contract to hypothesis
    measurement, recorded with origin "manual"."""
    caption = Caption.parse(caption_text)
    expected = build_base_prompt(label, hierarchy)
    if caption.base != expected.base:
        raise CaptionParseError(
            f"caption must start with the base prompt {expected.base!r}", position=0
        )
    return measure_hypothesis(
        gateway, hierarchy, caption, label, target, policy, stop, seed, baseline,
        run=run, origin="manual", progress=progress,
    )
