"""End-to-end acceptance checks at fixed tolerances.

These are intentionally heavier than the unit suites: full discovery
runs against the shipped synthetic world, Monte-Carlo oracle
comparisons, large-sample statistics, and crash-injection sweeps.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from spurfinder.core import Caption, FailurePolicy, FailureRule, build_base_prompt, is_failure
from spurfinder.datasetgen import HarvestConfig, export_dataset, harvest, import_dataset
from spurfinder.discovery import Cluster, StopRule, assemble_caption, run_sampling
from spurfinder.gateway import Gateway, ServiceEndpoint, WorldBackend
from spurfinder.pipeline import PipelineConfig, discover
from spurfinder.stats import EmbeddingSetStats, embedding_stats, error_consistency, fid, kid, mann_whitney
from spurfinder.store import BlobStore, RunManifest
from spurfinder.synthworld import (
    BiasLink,
    Latent,
    WorldAttribute,
    WorldClass,
    WorldConfig,
    default_world,
    render_latent,
)
from spurfinder.worldoracle import oracle_rate
from tests.test_stats import _mw_exact_oracle

PLANTED_PHRASE = "it is on a flower."
POLICY = FailurePolicy(FailureRule.TOP1_WRONG_OUTSIDE_PARENT, k=3)


def make_gateway(cfg, blob_dir):
    return Gateway(
        WorldBackend(cfg),
        BlobStore(blob_dir),
        endpoint=ServiceEndpoint(base_url="inprocess://accept", max_in_flight=8),
        hierarchy=cfg.hierarchy,
    )


# ---------------------------------------------------------------------------
# planted-bias recovery (shared across two criteria)


@pytest.fixture(scope="module")
def planted_runs(tmp_path_factory):
    world = default_world()
    results = []
    for seed in range(10):
        blob_dir = tmp_path_factory.mktemp(f"blobs{seed}")
        gw = make_gateway(world, blob_dir)
        t0 = time.monotonic()
        try:
            report = discover(gw, world.hierarchy, "fly", target="bee", config=PipelineConfig(seed=seed))
        finally:
            gw.close()
        results.append((report, time.monotonic() - t0))
    return results


def test_planted_bias_recovery(planted_runs):
    recovered = 0
    for report, elapsed in planted_runs:
        assert elapsed < 120.0, f"run took {elapsed:.1f}s"
        best = report.best
        if best is None or not best.confirmed:
            continue
        if PLANTED_PHRASE not in best.caption.sentences:
            continue
        if not (10.0 <= best.ratio_target <= 40.0):
            continue
        recovered += 1
    assert recovered >= 9, f"recovered only {recovered}/10 seeded runs"


def test_planted_vs_baseline_rank_test(planted_runs):
    baseline_rates = [r.baseline.target_rate("bee").p for r, _ in planted_runs]
    planted_rates = [
        r.best.target_rate.p for r, _ in planted_runs if r.best is not None
    ]
    assert len(planted_rates) >= 9
    result = mann_whitney(baseline_rates, planted_rates, "greater")
    assert result.p < 0.005


# ---------------------------------------------------------------------------
# oracle equivalence


def _random_world(seed):
    rng = np.random.default_rng(seed)
    dim = 8

    def unit():
        v = rng.standard_normal(dim)
        return tuple(float(x) for x in v / np.linalg.norm(v))

    classes = tuple(
        WorldClass(label, parent, unit())
        for label, parent in (
            ("fly", "arthropod"), ("ant", "arthropod"), ("bee", "pollinator"), ("moth", "pollinator"),
        )
    )
    attr_names = ["flower", "net", "leaf", "rock"]
    attributes = tuple(
        WorldAttribute(
            name,
            f"it is near a {name}.",
            tuple(float(x) for x in 0.5 * rng.standard_normal(dim)),
            {c.label: float(rng.uniform(0.0, 0.25)) for c in classes},
        )
        for name in attr_names
    )
    link = BiasLink(
        attribute=str(rng.choice(attr_names)),
        target=str(rng.choice([c.label for c in classes])),
        weight=float(rng.uniform(0.8, 1.5)),
    )
    return WorldConfig(
        classes=classes,
        attributes=attributes,
        bias_links=(link,),
        noise_sigma=0.2,
        caption_drop_prob=0.2,
        generator_wrong_label_prob=0.02,
        dim=dim,
    )


def test_oracle_equivalence_20_of_20(tmp_path):
    rng = random.Random(2024)
    agreements = 0
    for trial in range(20):
        world = _random_world(1000 + trial)
        hierarchy = world.hierarchy
        label = rng.choice([c.label for c in world.classes])
        extra = rng.sample([a.phrase for a in world.attributes], rng.randint(0, 2))
        base = build_base_prompt(label, hierarchy)
        caption = base.with_sentences(tuple(sorted(extra)))
        if trial % 2 == 0:
            target = rng.choice([c.label for c in world.classes if c.label != label])
        else:
            target = None

        gw = make_gateway(world, tmp_path / f"b{trial}")
        try:
            out = run_sampling(
                gw, hierarchy, caption, label, target, POLICY,
                StopRule(target_failures=10**9, max_samples=768, batch_size=256), seed=trial,
            )
        finally:
            gw.close()
        if target is not None:
            p_pipe = out.top1_counts.get(target, 0) / out.n
        else:
            p_pipe = out.any_failures / out.n
        draws = 8000
        p_oracle = oracle_rate(world, caption.render(), label, target, POLICY, draws, seed=trial)
        se = math.sqrt(p_pipe * (1 - p_pipe) / out.n + p_oracle * (1 - p_oracle) / draws)
        if abs(p_pipe - p_oracle) <= 3 * se:
            agreements += 1
    assert agreements == 20, f"only {agreements}/20 within 3 combined SE"


# ---------------------------------------------------------------------------
# Mann-Whitney exactness


def test_mann_whitney_exact_500_instances():
    rng = random.Random(7)
    for trial in range(500):
        n = rng.randint(1, 9)
        m = rng.randint(1, 10 - n)
        vals = rng.sample(range(10**6), n + m)  # distinct values: tie-free
        xs = [float(v) for v in vals[:n]]
        ys = [float(v) for v in vals[n:]]
        alt = ("two-sided", "greater", "less")[trial % 3]
        got = mann_whitney(xs, ys, alt)
        assert got.method == "exact"
        want = _mw_exact_oracle(xs, ys, alt)
        assert abs(got.p - want) <= 1e-12, f"trial {trial}: {got.p} vs {want}"


# ---------------------------------------------------------------------------
# FID / KID


def test_fid_closed_form_and_self_distance():
    a = EmbeddingSetStats(n=2, mean=np.array([1.2]), covariance=np.array([[3.0]]))
    b = EmbeddingSetStats(n=2, mean=np.array([-0.3]), covariance=np.array([[0.7]]))
    closed = (1.2 + 0.3) ** 2 + 3.0 + 0.7 - 2.0 * math.sqrt(3.0 * 0.7)
    assert fid(a, b) == pytest.approx(closed, abs=1e-12)

    rng = np.random.default_rng(11)
    s = embedding_stats(rng.standard_normal((500, 6)))
    assert abs(fid(s, s)) < 1e-8


def test_fid_sampled_gaussians_within_2_percent():
    rng = np.random.default_rng(12)
    d, n = 8, 10_000
    mu_a, mu_b = np.zeros(d), np.full(d, 0.7)
    cov_a = np.diag(np.linspace(0.8, 1.6, d))
    cov_b = np.diag(np.linspace(0.5, 2.0, d))
    closed = fid(
        EmbeddingSetStats(n=2, mean=mu_a, covariance=cov_a),
        EmbeddingSetStats(n=2, mean=mu_b, covariance=cov_b),
    )
    sampled = fid(
        embedding_stats(rng.multivariate_normal(mu_a, cov_a, size=n)),
        embedding_stats(rng.multivariate_normal(mu_b, cov_b, size=n)),
    )
    assert sampled == pytest.approx(closed, rel=0.02)


def test_kid_null_within_three_stderr():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((1000, 8))
    b = rng.standard_normal((1000, 8))
    r = kid(a, b, block_size=100)
    assert abs(r.value) <= 3 * r.stderr


# ---------------------------------------------------------------------------
# greedy assembly vs exhaustive oracle, 200/200


class TableGateway:
    def __init__(self, member_sentences, values):
        self.member_sentences = member_sentences
        self.values = values

    def caption(self, req):
        base = Caption.parse(req.prefix)
        extra = self.member_sentences[req.image][: req.max_sentences]
        return base.with_sentences(tuple(base.sentences) + tuple(extra))

    def score_caption(self, req):
        cap = Caption.parse(req.caption)
        return sum(self.values.get((req.image, s), 0.0) for s in cap.sentences)


def exhaustive_greedy(images, pool, values, base, K):
    """Reference greedy written independently: full rescoring each step."""
    chosen = []
    current = 0.0
    for _ in range(K):
        scored = []
        for cand in pool:
            if cand in chosen:
                continue
            total = sum(
                values.get((im, s), 0.0) for im in images for s in chosen + [cand]
            )
            scored.append((total, cand))
        if not scored:
            break
        best_total = max(t for t, _ in scored)
        winner = min(c for t, c in scored if t > best_total - 1e-12)
        if best_total <= current + 1e-12:
            break
        chosen.append(winner)
        current = best_total
    return chosen


def test_greedy_assembly_200_of_200():
    rng = random.Random(99)
    base = Caption.parse("a realistic photograph of a fly (arthropod).")
    matches = 0
    for trial in range(200):
        n_members = rng.randint(1, 5)
        n_sent = rng.randint(0, 10)
        sentences = [f"it has trait {chr(97 + i)}." for i in range(n_sent)]
        images = [f"{i:02d}" * 32 for i in range(n_members)]
        with_ties = trial % 3 == 0
        tie_pool = [round(rng.uniform(-2, 2), 1) for _ in range(3)]
        values = {}
        member_sentences = {}
        for im in images:
            member_sentences[im] = tuple(rng.sample(sentences, rng.randint(0, n_sent)))
            for s in sentences:
                values[(im, s)] = rng.choice(tie_pool) if with_ties else rng.uniform(-2, 2)
        K = rng.randint(1, 3)

        from spurfinder.core import Prediction, Sample

        members = [
            Sample(image=im, prompt=base, seed=0, index=i, prediction=Prediction((("bee", 1.0),)))
            for i, im in enumerate(images)
        ]
        cluster = Cluster(predicted_label="bee", members=members, centroid=(1.0,))
        res = assemble_caption(
            TableGateway(member_sentences, values), cluster, base, K, caption_max_sentences=10
        )
        pool = sorted({s for sents in member_sentences.values() for s in sents})
        want = exhaustive_greedy(images, pool, values, base, K)
        if list(res.caption.sentences) == want:
            matches += 1
    assert matches == 200, f"greedy matched oracle in only {matches}/200 tables"


# ---------------------------------------------------------------------------
# error consistency


def test_error_consistency_reference_points():
    v = [True, False, True, True] * 25
    assert error_consistency(v, v) == pytest.approx(1.0)

    a = [True, False] * 5000
    b = [not x for x in a]  # both 50% accurate, never agree
    assert error_consistency(a, b) == pytest.approx(-1.0)

    rng = random.Random(21)
    x = [rng.random() < 0.8 for _ in range(10_000)]
    y = [rng.random() < 0.6 for _ in range(10_000)]
    assert abs(error_consistency(x, y)) < 0.05


# ---------------------------------------------------------------------------
# harvest soundness


def test_harvest_soundness_and_repeatability(tmp_path):
    world = default_world()
    hierarchy = world.hierarchy
    captions = [
        (Caption.parse(
            f"a realistic photograph of a fly (arthropod). {PLANTED_PHRASE}"), "fly"),
        (Caption.parse(
            f"a realistic photograph of a spider (arthropod). {PLANTED_PHRASE}"), "spider"),
    ]
    hcfg = HarvestConfig(
        per_caption_sample_cap=400, per_caption_keep_cap=5, policy=POLICY, batch_size=100
    )
    gw = make_gateway(world, tmp_path / "blobs")
    try:
        ds = harvest(gw, hierarchy, captions, hcfg, seed=17)
        assert ds.entries, "harvest found no adversarial samples"
        out = tmp_path / "export"
        export_dataset(ds, gw.blobs, out)
        loaded = import_dataset(out)
        for e in loaded.entries:
            png = (out / "blobs" / f"{e.sample.image}.png").read_bytes()
            pred = gw.classify(png, loaded.policy.k)
            assert is_failure(pred, e.truth, loaded.policy, hierarchy), (
                f"entry {e.sample.image} does not re-classify as a failure"
            )
        # fixed seed: the manifest hash is reproducible from scratch
        gw2 = make_gateway(world, tmp_path / "blobs2")
        try:
            again = harvest(gw2, hierarchy, captions, hcfg, seed=17)
        finally:
            gw2.close()
        assert again.manifest_hash == ds.manifest_hash
    finally:
        gw.close()


# ---------------------------------------------------------------------------
# durability: crash injection at 50 random write boundaries


N_RECORDS = 24
TYPES = ("baseline", "batch", "hypothesis")
CFG = {"acceptance": "crash", "seed": 0}


def _record_for(i):
    return TYPES[i % 3], {"id": f"r{i}", "value": i * 7, "blob": f"{i:04x}"}


def _run_to_completion(root):
    with RunManifest.open(root, CFG) as run:
        start = len(run.entries)
        for i in range(start, N_RECORDS):
            rtype, rec = _record_for(i)
            run.append(rtype, rec)


def _snapshot(root):
    files = {"chain.idx": (root / "chain.idx").read_bytes()}
    for t in TYPES:
        files[t] = (root / "records" / f"{t}.jsonl").read_bytes()
    return files


def test_crash_injection_50_of_50(tmp_path):
    clean = tmp_path / "clean"
    _run_to_completion(clean)
    want = _snapshot(clean)

    rng = random.Random(3)
    for case in range(50):
        root = tmp_path / f"crash{case}"
        stop_at = rng.randrange(N_RECORDS)
        orphan = rng.random() < 0.5
        with RunManifest.open(root, CFG) as run:
            for i in range(stop_at):
                rtype, rec = _record_for(i)
                run.append(rtype, rec)
        if orphan:
            # crash landed between the record write and the chain write
            rtype, rec = _record_for(stop_at)
            with open(root / "records" / f"{rtype}.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
        _run_to_completion(root)  # resume after the simulated crash
        assert _snapshot(root) == want, f"case {case} (stop_at={stop_at}, orphan={orphan})"


# ---------------------------------------------------------------------------
# primary stands alone


def test_primary_package_is_self_contained():
    """The Python package must not reach into any browser-side component."""
    from pathlib import Path

    import spurfinder

    pkg_root = Path(spurfinder.__file__).parent
    for py in pkg_root.rglob("*.py"):
        text = py.read_text("utf-8")
        assert "frontend" not in text, f"{py} references the browser component"
