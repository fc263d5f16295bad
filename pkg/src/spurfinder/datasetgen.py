"""Adversarial dataset harvesting.

Seed images are captioned, each caption is mass-sampled against the
target classifier, and misclassified samples are kept under per-caption
and total caps. Datasets export to a directory with a JSONL manifest
plus content-addressed blobs and re-import losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .core import Caption, FailurePolicy, LabelHierarchy, Prediction, Sample, build_base_prompt, is_failure
from .gateway import CaptionRequest, Gateway, GatewayError, GenerationRequest
from .store import BlobStore, RunManifest
from .util import canonical_json, derive_seed, sha256_hex


@dataclass(frozen=True)
class HarvestConfig:
    per_caption_sample_cap: int = 1000
    per_caption_keep_cap: int = 5
    total_keep_cap: Optional[int] = None
    policy: FailurePolicy = field(default_factory=FailurePolicy)
    max_caption_sentences: int = 2
    batch_size: int = 50

    def __post_init__(self):
        if self.per_caption_keep_cap > self.per_caption_sample_cap:
            raise ValueError("keep cap cannot exceed the sample cap")

    def to_json(self) -> dict:
        return {
            "per_caption_sample_cap": self.per_caption_sample_cap,
            "per_caption_keep_cap": self.per_caption_keep_cap,
            "total_keep_cap": self.total_keep_cap,
            "policy": self.policy.to_json(),
            "max_caption_sentences": self.max_caption_sentences,
            "batch_size": self.batch_size,
        }


@dataclass
class DatasetEntry:
    sample: Sample
    truth: str
    source_caption: Caption

    def to_json(self) -> dict:
        assert self.sample.prediction is not None
        return {
            "image_sha256": self.sample.image,
            "label": self.truth,
            "topk": self.sample.prediction.to_json(),
            "caption": self.source_caption.render(),
            "seed": self.sample.seed,
            "index": self.sample.index,
        }


@dataclass
class AdversarialDataset:
    name: str
    entries: list[DatasetEntry]
    policy: FailurePolicy
    skipped_captions: list[str] = field(default_factory=list)

    @property
    def manifest_lines(self) -> list[str]:
        lines = []
        for e in self.entries:
            d = e.to_json()
            d["policy"] = self.policy.variant.value
            lines.append(json.dumps(d, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
        return lines

    @property
    def manifest_hash(self) -> str:
        return sha256_hex(("\n".join(self.manifest_lines) + "\n").encode("utf-8"))

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "size": len(self.entries),
            "manifest_hash": self.manifest_hash,
            "skipped": len(self.skipped_captions),
            "policy": self.policy.to_json(),
            "entries": [json.loads(line) for line in self.manifest_lines],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AdversarialDataset":
        policy = FailurePolicy.from_json(rec["policy"])
        entries = []
        for d in rec["entries"]:
            sample = Sample(
                image=d["image_sha256"],
                prompt=Caption.parse(d["caption"]),
                seed=int(d["seed"]),
                index=int(d["index"]),
                prediction=Prediction.from_json(d["topk"]),
            )
            entries.append(
                DatasetEntry(sample=sample, truth=d["label"], source_caption=Caption.parse(d["caption"]))
            )
        return cls(name=rec["name"], entries=entries, policy=policy)


def caption_seed_corpus(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    images: Sequence[tuple[bytes | str, str]],
    max_sentences: int = 2,
) -> tuple[list[tuple[Caption, str]], int]:
    """Caption each (image, truth) pair; returns captions plus a skip tally."""
    if not images:
        raise ValueError("seed corpus is empty")
    out: list[tuple[Caption, str]] = []
    skipped = 0
    for image, truth in images:
        base = build_base_prompt(truth, hierarchy)
        try:
            cap = gateway.caption(
                CaptionRequest(image=image, prefix=base.render(), max_sentences=max_sentences)
            )
        except GatewayError:
            skipped += 1
            continue
        out.append((cap, truth))
    if not out:
        raise RuntimeError("all seed captionings failed")
    return out, skipped


def harvest(
    gateway: Gateway,
    hierarchy: LabelHierarchy,
    captions: Sequence[tuple[Caption, str]],
    cfg: HarvestConfig,
    seed: int,
    name: str = "harvest",
    run: Optional[RunManifest] = None,
    progress=None,
) -> AdversarialDataset:
    """Sample each caption until its keep cap or sample cap is hit.

    A caption whose sampling errors out is skipped (and tallied); the
    harvest continues. The optional total cap is applied round-robin
    across captions so no single caption dominates the dataset.
    """
    if not captions:
        raise ValueError("caption list is empty")
    per_caption: list[list[DatasetEntry]] = []
    skipped: list[str] = []
    for ci, (caption, truth) in enumerate(captions):
        kept: list[DatasetEntry] = []
        seen_refs: set[str] = set()
        cap_seed = derive_seed("harvest", name, seed, ci, caption.render())
        sampled = 0
        batch = 0
        try:
            while sampled < cfg.per_caption_sample_cap and len(kept) < cfg.per_caption_keep_cap:
                n = min(cfg.batch_size, cfg.per_caption_sample_cap - sampled)
                key = f"harvest:{name}:{ci}:{batch}"
                record = run.find("batch", stage=key, batch=batch) if run is not None else None
                if record is None:
                    samples = gateway.generate(
                        GenerationRequest(prompt=caption.render(), n=n, seed=cap_seed + batch)
                    )
                    preds = gateway.classify_many([s.image for s in samples], cfg.policy.k)
                    fails = [
                        s.with_prediction(p).to_json()
                        for s, p in zip(samples, preds)
                        if is_failure(p, truth, cfg.policy, hierarchy)
                    ]
                    record = {"stage": key, "batch": batch, "n": n, "failures": fails}
                    if run is not None:
                        run.append("batch", record)
                for d in record["failures"]:
                    if len(kept) >= cfg.per_caption_keep_cap:
                        break
                    s = Sample.from_json(d)
                    if s.image in seen_refs:
                        continue
                    seen_refs.add(s.image)
                    kept.append(DatasetEntry(sample=s, truth=truth, source_caption=caption))
                sampled += record["n"]
                batch += 1
        except GatewayError as exc:
            skipped.append(f"{caption.render()}: {exc}")
            continue
        per_caption.append(kept)
        if progress is not None:
            progress(ci + 1, sum(len(k) for k in per_caption))
    entries: list[DatasetEntry] = []
    if cfg.total_keep_cap is None:
        for kept in per_caption:
            entries.extend(kept)
    else:
        # round-robin across captions preserves caption diversity
        depth = 0
        while len(entries) < cfg.total_keep_cap:
            took = False
            for kept in per_caption:
                if depth < len(kept) and len(entries) < cfg.total_keep_cap:
                    entries.append(kept[depth])
                    took = True
            if not took:
                break
            depth += 1
    seen: set[str] = set()
    unique = []
    for e in entries:
        if e.sample.image in seen:
            continue
        seen.add(e.sample.image)
        unique.append(e)
    dataset = AdversarialDataset(name=name, entries=unique, policy=cfg.policy, skipped_captions=skipped)
    if run is not None and run.find("harvest", name=name) is None:
        run.append("harvest", dataset.to_record())
    return dataset


def export_dataset(dataset: AdversarialDataset, blobs: BlobStore, out_dir: str | Path) -> Path:
    """Write manifest.jsonl and blobs/<hash>.png; byte-identical on re-export."""
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in dataset.manifest_lines), "utf-8")
    for e in dataset.entries:
        data = blobs.get(e.sample.image)  # verifies the stored hash
        (out / "blobs" / f"{e.sample.image}.png").write_bytes(data)
    return manifest


class DatasetImportError(RuntimeError):
    pass


def import_dataset(dir_path: str | Path, name: str = "imported") -> AdversarialDataset:
    """Load an exported dataset, verifying every blob against its hash."""
    root = Path(dir_path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetImportError(f"no manifest at {manifest}")
    entries: list[DatasetEntry] = []
    policy = None
    for lineno, line in enumerate(manifest.read_text("utf-8").splitlines(), 1):
        d = json.loads(line)
        digest = d["image_sha256"]
        blob_path = root / "blobs" / f"{digest}.png"
        if not blob_path.exists():
            raise DatasetImportError(f"entry {lineno}: missing blob {digest}")
        if sha256_hex(blob_path.read_bytes()) != digest:
            raise DatasetImportError(f"entry {lineno}: blob {digest} fails hash verification")
        sample = Sample(
            image=digest,
            prompt=Caption.parse(d["caption"]),
            seed=int(d["seed"]),
            index=int(d["index"]),
            prediction=Prediction.from_json(d["topk"]),
        )
        entries.append(
            DatasetEntry(sample=sample, truth=d["label"], source_caption=Caption.parse(d["caption"]))
        )
        if policy is None:
            from .core import FailureRule

            policy = FailurePolicy(variant=FailureRule(d["policy"]))
    return AdversarialDataset(name=name, entries=entries, policy=policy or FailurePolicy())
