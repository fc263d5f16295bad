"""Domain types shared by the whole engine.

Label hierarchy, the caption grammar, classifier predictions and the
failure predicates. Everything here is immutable after construction and
safe to share across threads; all operations are pure functions.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

VOWELS = frozenset("aeiou")


class ConfigError(ValueError):
    """Bad label, hierarchy, or policy configuration."""


class CaptionParseError(ValueError):
    """Text does not conform to the caption grammar."""

    def __init__(self, message: str, position: int = 0):
        super().__init__(message)
        self.position = position


# ---------------------------------------------------------------------------
# Label hierarchy


@dataclass(frozen=True)
class LabelHierarchy:
    """Rooted forest of class labels with a single hypernym parent each."""

    nodes: Mapping[str, tuple[str, Optional[str]]]  # label-id -> (name, parent-id)
    roots: frozenset[str]

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, Optional[str]]]) -> "LabelHierarchy":
        nodes: dict[str, tuple[str, Optional[str]]] = {}
        seen_names: set[str] = set()
        for label, name, parent in records:
            if label in nodes:
                raise ConfigError(f"duplicate label id {label!r}")
            key = name.strip().lower()
            if key in seen_names:
                raise ConfigError(f"duplicate label name {name!r}")
            seen_names.add(key)
            nodes[label] = (name, parent)
        roots = set()
        for label, (_, parent) in nodes.items():
            if parent is None:
                roots.add(label)
            elif parent not in nodes:
                raise ConfigError(f"label {label!r} has unknown parent {parent!r}")
        # cycle check: walk to a root from every node
        for label in nodes:
            slow = label
            hops = 0
            while nodes[slow][1] is not None:
                slow = nodes[slow][1]  # type: ignore[index]
                hops += 1
                if hops > len(nodes):
                    raise ConfigError(f"cycle in hierarchy reachable from {label!r}")
        return cls(nodes=dict(nodes), roots=frozenset(roots))

    @classmethod
    def load(cls, path: str | Path) -> "LabelHierarchy":
        """Read the tab-separated hierarchy file: ``id<TAB>name<TAB>parent-or--``."""
        records = []
        for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            label, name, parent = parts
            records.append((label, name, None if parent == "-" else parent))
        return cls.from_records(records)

    def name(self, label: str) -> str:
        self._require(label)
        return self.nodes[label][0]

    def parent(self, label: str) -> Optional[str]:
        self._require(label)
        return self.nodes[label][1]

    def label_for_name(self, name: str) -> Optional[str]:
        key = name.strip().lower()
        for label, (n, _) in self.nodes.items():
            if n.strip().lower() == key:
                return label
        return None

    def _require(self, label: str) -> None:
        if label not in self.nodes:
            raise ConfigError(f"unknown label {label!r}")

    def __contains__(self, label: str) -> bool:
        return label in self.nodes

    def labels(self) -> list[str]:
        return sorted(self.nodes)

    def leaf_labels(self) -> list[str]:
        return sorted(l for l in self.nodes if self.nodes[l][1] is not None)


def same_parent(a: str, b: str, hierarchy: LabelHierarchy) -> bool:
    """True iff the two labels share their immediate hypernym parent."""
    pa, pb = hierarchy.parent(a), hierarchy.parent(b)
    if pa is None:
        raise ConfigError(f"label {a!r} is a root and has no parent")
    if pb is None:
        raise ConfigError(f"label {b!r} is a root and has no parent")
    return pa == pb


# ---------------------------------------------------------------------------
# Caption grammar

_BASE_RE = re.compile(r"^a realistic photograph of (an?) (.+) \((.+)\)\.$")


@dataclass(frozen=True)
class Caption:
    """A class-bearing base prompt plus ordered descriptive sentences.

    The rendered form is the base followed by the sentences joined with
    single spaces; each sentence ends in "." and contains no internal ".".
    """

    base: str
    sentences: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.base.endswith("."):
            raise CaptionParseError("base prompt must end with '.'")
        for s in self.sentences:
            if not s.endswith("."):
                raise CaptionParseError(f"sentence {s!r} must end with '.'")
            if "." in s[:-1]:
                raise CaptionParseError(f"sentence {s!r} contains an internal '.'")

    def render(self) -> str:
        return " ".join((self.base,) + self.sentences)

    def with_sentences(self, sentences: Sequence[str]) -> "Caption":
        return Caption(self.base, tuple(sentences))

    @classmethod
    def parse(cls, text: str) -> "Caption":
        """Split rendered text into base + sentences on "." boundaries.

        Sentence text is lowercased; the base (including the label name)
        is preserved verbatim.
        """
        text = text.strip()
        if "." not in text:
            raise CaptionParseError("caption has no sentence terminator", position=len(text))
        head, _, rest = text.partition(".")
        base = head.strip() + "."
        sentences = []
        for frag in rest.split("."):
            frag = frag.strip().lower()
            if frag:
                sentences.append(frag + ".")
        return cls(base=base, sentences=tuple(sentences))


def article_for(name: str) -> str:
    return "an" if name[:1].lower() in VOWELS else "a"


def build_base_prompt(label: str, hierarchy: LabelHierarchy) -> Caption:
    """Base prompt of the form ``a realistic photograph of a {name} ({parent}).``"""
    name = hierarchy.name(label)
    parent = hierarchy.parent(label)
    if parent is None:
        raise ConfigError(f"label {label!r} is a root; base prompts need a parent name")
    parent_name = hierarchy.name(parent)
    return Caption(f"a realistic photograph of {article_for(name)} {name} ({parent_name}).")


def parse_base_prompt(base: str) -> tuple[str, str]:
    """Extract (name, parent-name) back out of a rendered base prompt."""
    m = _BASE_RE.match(base.strip())
    if not m:
        raise CaptionParseError(f"not a base prompt: {base!r}")
    return m.group(2), m.group(3)


# ---------------------------------------------------------------------------
# Predictions and failure policies


@dataclass(frozen=True)
class Prediction:
    """Top-k classifier output, scores non-increasing, labels distinct."""

    topk: tuple[tuple[str, float], ...]

    def __post_init__(self):
        labels = [l for l, _ in self.topk]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels in top-k")
        scores = [s for _, s in self.topk]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("top-k scores must be non-increasing")

    @property
    def k(self) -> int:
        return len(self.topk)

    @property
    def top1(self) -> str:
        return self.topk[0][0]

    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.topk)

    def to_json(self) -> list[dict]:
        return [{"label": l, "score": s} for l, s in self.topk]

    @classmethod
    def from_json(cls, items: list[dict]) -> "Prediction":
        return cls(tuple((d["label"], float(d["score"])) for d in items))


class FailureRule(str, enum.Enum):
    TOP3_OUTSIDE_PARENT = "top3_outside_parent"
    TOP1_WRONG_OUTSIDE_PARENT = "top1_wrong_outside_parent"
    TOP3_EXCLUDES_TRUE = "top3_excludes_true"


@dataclass(frozen=True)
class FailurePolicy:
    """Which misclassifications count as problematic failures.

    ``parent_rule`` selects between requiring all of the top-k to fall
    outside the true label's parent group ("all", the strict default) or
    just one of them ("any").
    """

    variant: FailureRule = FailureRule.TOP3_OUTSIDE_PARENT
    k: int = 3
    parent_rule: str = "all"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("policy k must be >= 1")
        if self.parent_rule not in ("all", "any"):
            raise ConfigError("parent_rule must be 'all' or 'any'")

    def to_json(self) -> dict:
        return {"variant": self.variant.value, "k": self.k, "parent_rule": self.parent_rule}

    @classmethod
    def from_json(cls, d: dict) -> "FailurePolicy":
        return cls(FailureRule(d["variant"]), int(d["k"]), d.get("parent_rule", "all"))


def is_failure(pred: Prediction, truth: str, policy: FailurePolicy, hierarchy: LabelHierarchy) -> bool:
    """Failure predicate for one prediction under the given policy."""
    if policy.variant is FailureRule.TOP1_WRONG_OUTSIDE_PARENT:
        if pred.k < 1:
            raise ValueError("prediction is empty")
        top1 = pred.top1
        return top1 != truth and not same_parent(top1, truth, hierarchy)
    if pred.k < policy.k:
        raise ValueError(f"prediction has {pred.k} entries, policy needs {policy.k}")
    topk = pred.labels()[: policy.k]
    if policy.variant is FailureRule.TOP3_EXCLUDES_TRUE:
        return truth not in topk
    # TOP3_OUTSIDE_PARENT
    if topk[0] == truth:
        return False
    outside = [not same_parent(l, truth, hierarchy) for l in topk]
    return all(outside) if policy.parent_rule == "all" else any(outside)


# ---------------------------------------------------------------------------
# Samples


@dataclass(frozen=True)
class Sample:
    """One generated image plus its provenance and (optional) prediction."""

    image: str  # content hash of the stored blob
    prompt: Caption
    seed: int
    index: int
    prediction: Optional[Prediction] = None
    embeddings: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def key(self) -> tuple[str, int, int]:
        return (self.prompt.render(), self.seed, self.index)

    def with_prediction(self, pred: Prediction) -> "Sample":
        return Sample(self.image, self.prompt, self.seed, self.index, pred, self.embeddings)

    def with_embedding(self, space: str, vec: Sequence[float]) -> "Sample":
        embs = dict(self.embeddings)
        embs[space] = tuple(float(v) for v in vec)
        return Sample(self.image, self.prompt, self.seed, self.index, self.prediction, embs)

    def to_json(self) -> dict:
        d = {
            "image": self.image,
            "prompt": self.prompt.render(),
            "seed": self.seed,
            "index": self.index,
        }
        if self.prediction is not None:
            d["topk"] = self.prediction.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        pred = Prediction.from_json(d["topk"]) if "topk" in d else None
        return cls(d["image"], Caption.parse(d["prompt"]), int(d["seed"]), int(d["index"]), pred)
