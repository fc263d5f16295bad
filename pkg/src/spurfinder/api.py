"""HTTP API over run stores: browse runs, clusters and hypotheses, submit
counterfactual measurements as background jobs, and poll job status.

Mutations funnel through a single job queue; reads go straight to the
flushed record files and never take the writer lock.
"""

from __future__ import annotations

import json
import queue
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response

from .core import Caption, CaptionParseError, build_base_prompt
from .discovery import BaselineResult, sample_baseline
from .refine import counterfactual
from .settings import Settings
from .store import BlobStore, LockHeld, RunManifest, StoreError
from .util import derive_seed

JOB_STATES = ("queued", "running", "done", "failed")


@dataclass
class Job:
    job_id: str
    kind: str
    state: str = "queued"
    progress: dict = field(default_factory=lambda: {"sampled": 0, "failures": 0, "budget": 0})
    result_ref: Optional[str] = None
    result: Optional[dict] = None
    error: Optional[str] = None

    def advance(self, state: str) -> None:
        if JOB_STATES.index(state) < JOB_STATES.index(self.state):
            raise ValueError(f"job state cannot move backwards: {self.state} -> {state}")
        self.state = state

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "state": self.state,
            "progress": dict(self.progress),
            "result_ref": self.result_ref,
            "result": self.result,
            "error": self.error,
        }


class JobQueue:
    """One worker thread draining a FIFO of callables, one job each."""

    def __init__(self, workers: int = 1):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()
        self._q: queue.Queue = queue.Queue()
        self._threads = [
            threading.Thread(target=self._drain, daemon=True) for _ in range(workers)
        ]
        for t in self._threads:
            t.start()

    def submit(self, kind: str, fn) -> Job:
        job = Job(job_id=uuid.uuid4().hex[:16], kind=kind)
        with self._lock:
            self._jobs[job.job_id] = job
        self._q.put((job, fn))
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def _drain(self) -> None:
        while True:
            job, fn = self._q.get()
            job.advance("running")
            try:
                fn(job)
                job.advance("done")
            except Exception as exc:
                job.error = str(exc)
                job.advance("failed")


def _run_dirs(root: Path) -> list[Path]:
    if not root.exists():
        return []
    return sorted(p for p in root.iterdir() if (p / "run.json").exists())


def _run_meta(run_dir: Path) -> dict:
    return json.loads((run_dir / "run.json").read_text("utf-8"))


def _records(run_dir: Path, rtype: str) -> list[dict]:
    path = run_dir / "records" / f"{rtype}.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text("utf-8").splitlines()]


def build_app(settings: Settings, run_root: Optional[Path] = None) -> FastAPI:
    root = Path(run_root) if run_root is not None else settings.resolve_run_root()
    app = FastAPI(title="spurfinder")
    jobs = JobQueue(workers=1)
    app.state.jobs = jobs
    app.state.run_root = root

    def not_found(what: str):
        return JSONResponse({"error": f"unknown {what}"}, status_code=404)

    @app.get("/api/runs")
    def list_runs():
        out = []
        for d in _run_dirs(root):
            meta = _run_meta(d)
            out.append(
                {
                    "run_id": meta["run_id"],
                    "created": meta.get("created"),
                    "config_hash": meta["config_hash"],
                    "hypotheses": len(_records(d, "hypothesis")),
                    "baselines": len(_records(d, "baseline")),
                    "clusters": len(_records(d, "cluster")),
                }
            )
        return out

    def _find_run(run_id: str) -> Optional[Path]:
        for d in _run_dirs(root):
            if _run_meta(d)["run_id"] == run_id:
                return d
        return None

    @app.get("/api/runs/{run_id}/hypotheses")
    def run_hypotheses(run_id: str):
        d = _find_run(run_id)
        if d is None:
            return not_found("run")
        return _records(d, "hypothesis")

    @app.get("/api/hypotheses/{hyp_id:path}")
    def get_hypothesis(hyp_id: str):
        for d in _run_dirs(root):
            for rec in _records(d, "hypothesis"):
                if rec.get("id") == hyp_id:
                    return rec
        return not_found("hypothesis")

    @app.get("/api/clusters/{cluster_id:path}")
    def get_cluster(cluster_id: str):
        for d in _run_dirs(root):
            for rec in _records(d, "cluster"):
                if rec.get("id") == cluster_id:
                    members = rec["members"]
                    return {
                        "id": rec["id"],
                        "predicted_label": rec["predicted_label"],
                        "centroid": rec["centroid"],
                        "members": members,
                        "thumbnails": [f"/api/images/{m['image']}.png" for m in members],
                    }
        return not_found("cluster")

    @app.get("/api/images/{digest}.png")
    def get_image(digest: str):
        for d in _run_dirs(root):
            blobs = BlobStore(d / "blobs")
            if digest in blobs:
                return Response(content=blobs.get(digest), media_type="image/png")
        return not_found("image")

    @app.post("/api/counterfactual")
    def post_counterfactual(body: dict):
        caption_text = body.get("caption")
        label = body.get("label")
        target = body.get("target")
        run_id = body.get("run")
        if not caption_text or not label:
            return JSONResponse({"error": "caption and label are required"}, status_code=400)
        hierarchy = settings.load_hierarchy()
        if label not in hierarchy:
            return JSONResponse({"error": f"unknown label {label!r}"}, status_code=400)
        try:
            caption = Caption.parse(caption_text)
        except CaptionParseError as exc:
            return JSONResponse(
                {"error": str(exc), "position": exc.position}, status_code=400
            )
        expected = build_base_prompt(label, hierarchy)
        if caption.base != expected.base:
            return JSONResponse(
                {
                    "error": f"caption must start with the base prompt {expected.base!r}",
                    "position": 0,
                    "expected_prefix": expected.base,
                },
                status_code=400,
            )
        if run_id is not None:
            run_dir = _find_run(run_id)
            if run_dir is None:
                return not_found("run")
        else:
            run_dir = root / "api"
        # refuse up-front when a CLI writer holds the run lock
        try:
            probe = RunManifest.open(run_dir, settings.to_json())
            probe.close()
        except LockHeld:
            return JSONResponse(
                {"error": "run is locked by another writer"}, status_code=409
            )
        except StoreError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)

        def work(job: Job):
            job.progress["budget"] = settings.stop.max_samples
            with RunManifest.open(run_dir, settings.to_json()) as run:
                gateway = settings.build_gateway(run.blobs, hierarchy)
                try:
                    baseline = _baseline_for(run, gateway, hierarchy, label, target, job)
                    seed = derive_seed(settings.seed, "measure", label, caption.render())
                    hyp = counterfactual(
                        gateway, hierarchy, caption.render(), label, target,
                        settings.policy, settings.stop, seed, baseline, run=run,
                        progress=lambda n, f: job.progress.update(sampled=n, failures=f),
                    )
                finally:
                    gateway.close()
            job.result_ref = hyp.id
            job.result = hyp.to_json()

        def _baseline_for(run, gateway, hier, lbl, tgt, job) -> BaselineResult:
            stored = run.find("baseline", id=f"baseline:{lbl}:{_base_hash(hier, lbl)}:{tgt or '-'}")
            if stored is not None:
                return BaselineResult.from_json(stored)
            seed = derive_seed(settings.seed, "baseline", lbl, build_base_prompt(lbl, hier).render())
            return sample_baseline(
                gateway, hier, lbl, settings.policy, settings.stop, seed,
                target=tgt, run=run,
                progress=lambda n, f: job.progress.update(sampled=n, failures=f),
            )

        job = jobs.submit("measure", work)
        return {"job_id": job.job_id}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            return not_found("job")
        return job.to_json()

    return app


def _base_hash(hierarchy, label: str) -> str:
    from .discovery import caption_hash

    return caption_hash(build_base_prompt(label, hierarchy))
