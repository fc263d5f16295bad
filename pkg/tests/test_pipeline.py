import pytest

from spurfinder.core import FailurePolicy, FailureRule
from spurfinder.discovery import StopRule
from spurfinder.pipeline import DiscoveryReport, PipelineConfig, discover
from spurfinder.store import RunManifest
from tests.test_discovery import ExplodingGateway, tiny_gateway  # noqa: F401
from tests.test_synthworld import FLOWER


def tiny_config(seed=0, **kw):
    kw.setdefault("policy", FailurePolicy(FailureRule.TOP1_WRONG_OUTSIDE_PARENT, k=2))
    kw.setdefault("stop", StopRule(target_failures=20, max_samples=256, batch_size=64))
    kw.setdefault("seed", seed)
    return PipelineConfig(**kw)


def test_discover_recovers_planted_bias(tiny_gateway):
    cfg, gw = tiny_gateway
    report = discover(gw, cfg.hierarchy, "fly", target="bee", config=tiny_config())
    assert report.best is not None
    assert report.best.confirmed
    assert FLOWER in report.best.caption.sentences
    assert report.best.target == "bee"
    # discovered rate is far above baseline (prior 0.5 -> forced 1.0)
    assert report.best.target_rate.p > report.baseline.target_rate("bee").ci_hi


def test_discover_untargeted_still_finds_flower(tiny_gateway):
    cfg, gw = tiny_gateway
    report = discover(gw, cfg.hierarchy, "fly", config=tiny_config(seed=1))
    assert report.best is not None
    assert FLOWER in report.best.caption.sentences


def test_discover_no_bias_yields_no_hypothesis(tiny_gateway):
    cfg, gw = tiny_gateway
    from tests.test_synthworld import tiny_world

    gw.backend.cfg = tiny_world(bias_links=())
    report = discover(gw, cfg.hierarchy, "fly", config=tiny_config())
    assert report.best is None
    assert report.refinement is None


def test_discover_is_deterministic(tiny_gateway, tmp_path):
    cfg, gw = tiny_gateway
    r1 = discover(gw, cfg.hierarchy, "fly", target="bee", config=tiny_config(seed=3))
    r2 = discover(gw, cfg.hierarchy, "fly", target="bee", config=tiny_config(seed=3))
    assert r1.best.to_json() == r2.best.to_json()
    assert r1.baseline.to_json() == r2.baseline.to_json()


def test_discover_resumes_from_run_store(tiny_gateway, tmp_path):
    cfg, gw = tiny_gateway
    pconfig = tiny_config(seed=2)
    with RunManifest.open(tmp_path / "run", pconfig.to_json()) as run:
        r1 = discover(gw, cfg.hierarchy, "fly", target="bee", config=pconfig, run=run)
        counts = {t: len(run.of_type(t)) for t in ("batch", "baseline", "hypothesis", "cluster")}
    # a fresh process replays everything from records; the backend is never hit
    with RunManifest.open(tmp_path / "run", pconfig.to_json()) as run:
        r2 = discover(gw, cfg.hierarchy, "fly", target="bee", config=pconfig, run=run)
        counts2 = {t: len(run.of_type(t)) for t in ("batch", "baseline", "hypothesis", "cluster")}
    assert counts2 == counts
    assert r2.best.to_json() == r1.best.to_json()


def test_discover_reports_progress(tiny_gateway):
    cfg, gw = tiny_gateway
    seen = []
    discover(
        gw, cfg.hierarchy, "fly", target="bee", config=tiny_config(),
        progress=lambda n, f: seen.append((n, f)),
    )
    assert seen
    assert all(n >= 1 for n, _ in seen)


def test_pipeline_config_to_json_shape():
    d = tiny_config(seed=7).to_json()
    assert d["seed"] == 7
    assert d["policy"]["k"] == 2
    assert d["stop"]["batch_size"] == 64
    assert set(d) == {
        "policy", "stop", "max_caption_sentences", "captioner_max_sentences",
        "tau", "max_clusters", "max_hypotheses", "refine_budget", "seed",
    }
