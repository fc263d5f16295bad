"""Command-line entry points.

Exit codes: 0 success, 1 user error (bad flags, bad config, unknown
ids), 2 service failure (backend errors, exhausted retries).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import datasetgen, stats
from .core import Caption, CaptionParseError, ConfigError, build_base_prompt
from .discovery import BaselineResult, Hypothesis, sample_baseline
from .gateway import GatewayError
from .pipeline import discover as run_discover
from .refine import counterfactual, refine as run_refine
from .settings import Settings, load_settings
from .store import LockHeld, RunManifest, StoreError
from .util import derive_seed

USER_ERROR = 1
SERVICE_ERROR = 2


class _Ctx:
    def __init__(self, settings: Settings):
        self.settings = settings

    def open_run(self, name: str = "run") -> RunManifest:
        root = self.settings.resolve_run_root()
        return RunManifest.open(root / name, self.settings.to_json())

    def gateway(self, run: RunManifest):
        hierarchy = self.settings.load_hierarchy()
        return self.settings.build_gateway(run.blobs, hierarchy), hierarchy


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        return fn()
    except (ConfigError, CaptionParseError, ValueError, LockHeld, StoreError) as exc:
        _fail(str(exc), USER_ERROR)
    except GatewayError as exc:
        _fail(str(exc), SERVICE_ERROR)


_settings_options = [
    click.option("--config", "config_path", type=click.Path(), default=None, help="key=value config file"),
    click.option("--run-root", default=None, help="run directory root (default: $SPURFINDER_RUN_ROOT)"),
    click.option("--backend", type=click.Choice(["synth", "http"]), default=None),
    click.option("--base-url", default=None, help="model-service base URL (http backend)"),
    click.option("--seed", type=int, default=None),
    click.option("--run-name", default="run", help="run subdirectory name"),
]


def settings_options(fn):
    for opt in reversed(_settings_options):
        fn = opt(fn)
    return fn


def _build_ctx(config_path, run_root, backend, base_url, seed) -> _Ctx:
    settings = load_settings(
        config_path, run_root=run_root, backend=backend, base_url=base_url, seed=seed
    )
    return _Ctx(settings)


@click.group(name="spurfinder")
def cli():
    """Discover, refine, and validate failure modes of image classifiers."""


def main(argv: Optional[list[str]] = None) -> int:
    """Console entry point with the 0/1/2 exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:  # --help and friends
        sys.exit(exc.exit_code)
    except (click.UsageError, click.ClickException) as exc:
        exc.show()
        sys.exit(USER_ERROR)
    except click.exceptions.Abort:
        sys.exit(USER_ERROR)


def _print_hypothesis(hyp: Hypothesis):
    click.echo(json.dumps(hyp.to_json(), indent=2, sort_keys=True))


@cli.command()
@click.argument("label")
@click.option("--target", default=None, help="specific wrong label to chase")
@settings_options
def discover(label, target, config_path, run_root, backend, base_url, seed, run_name):
    """Full discovery pipeline for LABEL: baseline, cluster, assemble, measure, refine."""

    def work():
        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        with ctx.open_run(run_name) as run:
            gateway, hierarchy = ctx.gateway(run)
            if label not in hierarchy:
                raise ConfigError(f"unknown label {label!r}")
            if target is not None and target not in hierarchy:
                raise ConfigError(f"unknown target {target!r}")
            try:
                report = run_discover(
                    gateway, hierarchy, label, target=target, config=ctx.settings.pipeline, run=run
                )
            finally:
                gateway.close()
        best = report.best
        click.echo(f"baseline: n={report.baseline.n} any_rate={report.baseline.any_rate.p:.5f}")
        click.echo(f"clusters: {len(report.clusters)}  hypotheses measured: {len(report.hypotheses)}")
        if best is None:
            click.echo("no confirmed hypothesis")
        else:
            click.echo("best hypothesis:")
            _print_hypothesis(best)

    _guard(work)


@cli.command()
@click.option("--caption", "caption_text", required=True)
@click.option("--label", required=True)
@click.option("--target", default=None)
@settings_options
def measure(caption_text, label, target, config_path, run_root, backend, base_url, seed, run_name):
    """Measure one caption's failure rate against the label's baseline."""

    def work():
        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        s = ctx.settings
        with ctx.open_run(run_name) as run:
            gateway, hierarchy = ctx.gateway(run)
            if label not in hierarchy:
                raise ConfigError(f"unknown label {label!r}")
            try:
                base = build_base_prompt(label, hierarchy)
                baseline = sample_baseline(
                    gateway, hierarchy, label, s.policy, s.stop,
                    derive_seed(s.seed, "baseline", label, base.render()),
                    target=target, run=run,
                )
                hyp = counterfactual(
                    gateway, hierarchy, caption_text, label, target, s.policy, s.stop,
                    derive_seed(s.seed, "measure", label, Caption.parse(caption_text).render()),
                    baseline, run=run,
                )
            finally:
                gateway.close()
        _print_hypothesis(hyp)

    _guard(work)


@cli.command("refine")
@click.option("--hypothesis", "hyp_id", required=True, help="stored hypothesis record id")
@settings_options
def refine_cmd(hyp_id, config_path, run_root, backend, base_url, seed, run_name):
    """Refine a stored hypothesis by sentence ablation and adjective dropping."""

    def work():
        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        s = ctx.settings
        with ctx.open_run(run_name) as run:
            rec = run.find("hypothesis", id=hyp_id)
            if rec is None:
                raise ConfigError(f"unknown hypothesis {hyp_id!r}")
            hyp = Hypothesis.from_json(rec)
            base_rec = run.find("baseline", id=hyp.baseline_ref)
            if base_rec is None:
                raise ConfigError(f"hypothesis references missing baseline {hyp.baseline_ref!r}")
            baseline = BaselineResult.from_json(base_rec)
            gateway, hierarchy = ctx.gateway(run)
            try:
                report = run_refine(
                    gateway, hierarchy, hyp, s.policy, s.stop, baseline,
                    derive_seed(s.seed, "refine", hyp.label, hyp.caption.render()),
                    budget=s.refine_budget, run=run,
                )
            finally:
                gateway.close()
        click.echo(json.dumps(report.to_json(), indent=2, sort_keys=True))
        click.echo("best caption: " + report.best_hypothesis.caption.render())

    _guard(work)


@cli.command()
@click.option("--seeds", "seeds_dir", required=True, type=click.Path(exists=True),
              help="directory of seed images: <truth-label>/<name>.png")
@click.option("--name", default="harvest")
@click.option("--per-caption-sample-cap", type=int, default=1000)
@click.option("--per-caption-keep-cap", type=int, default=5)
@click.option("--total-keep-cap", type=int, default=None)
@settings_options
def harvest(seeds_dir, name, per_caption_sample_cap, per_caption_keep_cap, total_keep_cap,
            config_path, run_root, backend, base_url, seed, run_name):
    """Harvest an adversarial dataset from seed images."""

    def work():
        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        s = ctx.settings
        seeds = []
        for labeled_dir in sorted(Path(seeds_dir).iterdir()):
            if not labeled_dir.is_dir():
                continue
            for png in sorted(labeled_dir.glob("*.png")):
                seeds.append((png.read_bytes(), labeled_dir.name))
        if not seeds:
            raise ConfigError(f"no seed images under {seeds_dir} (expected <label>/<name>.png)")
        cfg = datasetgen.HarvestConfig(
            per_caption_sample_cap=per_caption_sample_cap,
            per_caption_keep_cap=per_caption_keep_cap,
            total_keep_cap=total_keep_cap,
            policy=s.policy,
            max_caption_sentences=s.max_caption_sentences,
        )
        with ctx.open_run(run_name) as run:
            gateway, hierarchy = ctx.gateway(run)
            try:
                captions, skipped = datasetgen.caption_seed_corpus(
                    gateway, hierarchy, seeds, cfg.max_caption_sentences
                )
                dataset = datasetgen.harvest(
                    gateway, hierarchy, captions, cfg, s.seed, name=name, run=run
                )
            finally:
                gateway.close()
        click.echo(f"harvested {len(dataset.entries)} entries "
                   f"({skipped} seed captionings skipped, {len(dataset.skipped_captions)} captions skipped)")
        click.echo(f"manifest hash: {dataset.manifest_hash}")

    _guard(work)


@cli.command("export")
@click.option("--dataset", "dataset_name", required=True, help="harvest name to export")
@click.option("--out", "out_dir", required=True, type=click.Path())
@settings_options
def export_cmd(dataset_name, out_dir, config_path, run_root, backend, base_url, seed, run_name):
    """Export a harvested dataset to a manifest + blob directory."""

    def work():
        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        with ctx.open_run(run_name) as run:
            rec = run.find("harvest", name=dataset_name)
            if rec is None:
                raise ConfigError(f"unknown dataset {dataset_name!r}")
            dataset = datasetgen.AdversarialDataset.from_record(rec)
            if dataset.manifest_hash != rec["manifest_hash"]:
                raise StoreError("stored dataset disagrees with its recorded manifest hash")
            datasetgen.export_dataset(dataset, run.blobs, out_dir)
        click.echo(f"exported {len(dataset.entries)} entries to {out_dir}")

    _guard(work)


@cli.group()
def metrics():
    """Distribution-shift and agreement metrics over embedding/label files."""


def _load_vectors(path: str) -> np.ndarray:
    data = json.loads(Path(path).read_text("utf-8"))
    return np.asarray(data, dtype=float)


@metrics.command()
@click.argument("a_path", type=click.Path(exists=True))
@click.argument("b_path", type=click.Path(exists=True))
def fid(a_path, b_path):
    """FID between two JSON arrays of embedding vectors."""

    def work():
        value = stats.fid(
            stats.embedding_stats(_load_vectors(a_path)),
            stats.embedding_stats(_load_vectors(b_path)),
        )
        click.echo(json.dumps({"fid": value}))

    _guard(work)


@metrics.command()
@click.argument("a_path", type=click.Path(exists=True))
@click.argument("b_path", type=click.Path(exists=True))
@click.option("--block-size", type=int, default=100)
def kid(a_path, b_path, block_size):
    """KID between two JSON arrays of embedding vectors."""

    def work():
        r = stats.kid(_load_vectors(a_path), _load_vectors(b_path), block_size=block_size)
        click.echo(json.dumps({"kid": r.value, "stderr": r.stderr, "blocks": r.blocks}))

    _guard(work)


@metrics.command()
@click.argument("a_path", type=click.Path(exists=True))
@click.argument("b_path", type=click.Path(exists=True))
def consistency(a_path, b_path):
    """Error-consistency kappa between two JSON arrays of 0/1 correctness."""

    def work():
        a = json.loads(Path(a_path).read_text("utf-8"))
        b = json.loads(Path(b_path).read_text("utf-8"))
        click.echo(json.dumps({"kappa": stats.error_consistency(a, b)}))

    _guard(work)


@metrics.command()
@click.argument("dataset_dir", type=click.Path(exists=True))
@settings_options
def transfer(dataset_dir, config_path, run_root, backend, base_url, seed, run_name):
    """Transfer matrix of a harvested dataset against the configured classifier."""

    def work():
        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        dataset = datasetgen.import_dataset(dataset_dir)
        with ctx.open_run(run_name) as run:
            gateway, hierarchy = ctx.gateway(run)
            try:
                blobs = datasetgen.Path(dataset_dir) / "blobs"
                images = [(blobs / f"{e.sample.image}.png").read_bytes() for e in dataset.entries]
                truths = [e.truth for e in dataset.entries]
                result = stats.transfer_matrix(
                    list(zip(images, truths)), [gateway], dataset.policy, hierarchy
                )
            finally:
                gateway.close()
            payload = {"rates": list(result.rates), "excluded": list(result.excluded)}
            run.append("metric", {"kind": "transfer", "dataset": dataset.name, "result": payload})
        click.echo(json.dumps(payload, indent=2, sort_keys=True))

    _guard(work)


@metrics.command()
@click.argument("query_path", type=click.Path(exists=True))
@click.argument("corpus_path", type=click.Path(exists=True))
@click.option("-k", type=int, default=5)
@click.option("--filter-label", default=None)
def nn(query_path, corpus_path, k, filter_label):
    """Nearest neighbors of a query vector in a JSON corpus [[id, vec, label?], ...]."""

    def work():
        query = np.asarray(json.loads(Path(query_path).read_text("utf-8")), dtype=float)
        raw = json.loads(Path(corpus_path).read_text("utf-8"))
        corpus = [tuple(item) for item in raw]
        hits = stats.nearest_neighbors(query, corpus, k, filter_label=filter_label)
        click.echo(json.dumps(hits))

    _guard(work)


@cli.group()
def synthworld():
    """Synthetic-world utilities."""


@synthworld.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8701)
@click.option("--world", default="default", help="world config path or 'default'")
def synthworld_serve(host, port, world):
    """Serve the synthetic world over the model-service wire protocol."""

    def work():
        import uvicorn

        from .settings import Settings
        from .synthworld import build_world_app

        cfg = Settings(world=world).world_config()
        uvicorn.run(build_world_app(cfg), host=host, port=port, log_level="warning")

    _guard(work)


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8700)
@settings_options
def serve(host, port, config_path, run_root, backend, base_url, seed, run_name):
    """Serve the HTTP API over the configured run root."""

    def work():
        import uvicorn

        from .api import build_app

        ctx = _build_ctx(config_path, run_root, backend, base_url, seed)
        app = build_app(ctx.settings)
        uvicorn.run(app, host=host, port=port, log_level="warning")

    _guard(work)


if __name__ == "__main__":
    main()
