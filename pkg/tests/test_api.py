import json
import time

import pytest
from fastapi.testclient import TestClient

from spurfinder.api import Job, build_app
from spurfinder.settings import Settings
from spurfinder.store import RunManifest

BASE = "a realistic photograph of a fly (arthropod)."
FLOWER = "it is on a flower."

TINY = dict(target_failures=8, max_samples=128, batch_size=32)


@pytest.fixture
def api(tmp_path):
    settings = Settings(**TINY)
    root = tmp_path / "runs"
    app = build_app(settings, run_root=root)
    return TestClient(app), settings, root


def _wait_job(client, job_id, timeout=60.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        body = client.get(f"/api/jobs/{job_id}").json()
        if body["state"] in ("done", "failed"):
            return body
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} did not finish")


# ---------------------------------------------------------------------------
# job state machine


def test_job_states_forward_only():
    job = Job(job_id="x", kind="measure")
    job.advance("running")
    job.advance("done")
    with pytest.raises(ValueError, match="backwards"):
        job.advance("queued")


def test_job_to_json_shape():
    d = Job(job_id="x", kind="measure").to_json()
    assert set(d) == {"job_id", "kind", "state", "progress", "result_ref", "result", "error"}
    assert d["progress"] == {"sampled": 0, "failures": 0, "budget": 0}


# ---------------------------------------------------------------------------
# reads


def test_runs_empty(api):
    client, _, _ = api
    assert client.get("/api/runs").json() == []


def test_unknown_lookups_are_404(api):
    client, _, _ = api
    assert client.get("/api/runs/nope/hypotheses").status_code == 404
    assert client.get("/api/hypotheses/hypothesis:x:y:-").status_code == 404
    assert client.get("/api/clusters/cluster:x:y").status_code == 404
    assert client.get("/api/images/" + "0" * 64 + ".png").status_code == 404
    assert client.get("/api/jobs/nojob").status_code == 404


# ---------------------------------------------------------------------------
# counterfactual validation


def test_counterfactual_requires_fields(api):
    client, _, _ = api
    assert client.post("/api/counterfactual", json={}).status_code == 400
    assert client.post("/api/counterfactual", json={"caption": BASE}).status_code == 400


def test_counterfactual_unknown_label(api):
    client, _, _ = api
    r = client.post("/api/counterfactual", json={"caption": BASE, "label": "dragon"})
    assert r.status_code == 400
    assert "unknown label" in r.json()["error"]


def test_counterfactual_parse_error_carries_position(api):
    client, _, _ = api
    r = client.post("/api/counterfactual", json={"caption": "no terminator", "label": "fly"})
    assert r.status_code == 400
    body = r.json()
    assert body["position"] == len("no terminator")


def test_counterfactual_base_mismatch_carries_expected_prefix(api):
    client, _, _ = api
    r = client.post(
        "/api/counterfactual",
        json={"caption": "a realistic photograph of a bee (pollinator).", "label": "fly"},
    )
    assert r.status_code == 400
    body = r.json()
    assert body["expected_prefix"] == BASE
    assert body["position"] == 0


def test_counterfactual_unknown_run_is_404(api):
    client, _, _ = api
    r = client.post(
        "/api/counterfactual", json={"caption": BASE, "label": "fly", "run": "missing"}
    )
    assert r.status_code == 404


def test_counterfactual_locked_run_is_409(api):
    client, settings, root = api
    with RunManifest.open(root / "api", settings.to_json()):
        r = client.post(
            "/api/counterfactual",
            json={"caption": f"{BASE} {FLOWER}", "label": "fly", "target": "bee"},
        )
    assert r.status_code == 409
    assert "locked" in r.json()["error"]


# ---------------------------------------------------------------------------
# end-to-end job + browsing


def test_counterfactual_job_round_trip(api):
    client, settings, root = api
    r = client.post(
        "/api/counterfactual",
        json={"caption": f"{BASE} {FLOWER}", "label": "fly", "target": "bee"},
    )
    assert r.status_code == 200
    job = _wait_job(client, r.json()["job_id"])
    assert job["state"] == "done", job["error"]
    hyp = job["result"]
    assert hyp["label"] == "fly" and hyp["target"] == "bee"
    assert hyp["origin"] == "manual"
    assert job["result_ref"] == hyp["id"]
    assert job["progress"]["sampled"] >= 32
    assert job["progress"]["budget"] == settings.stop.max_samples

    runs = client.get("/api/runs").json()
    assert len(runs) == 1
    assert runs[0]["hypotheses"] == 1 and runs[0]["baselines"] == 1
    assert runs[0]["created"]  # run.json carries the timestamp, records do not

    listed = client.get(f"/api/runs/{runs[0]['run_id']}/hypotheses").json()
    assert [h["id"] for h in listed] == [hyp["id"]]
    assert client.get(f"/api/hypotheses/{hyp['id']}").json() == hyp

    # a generated blob is servable as an image
    blob_dir = root / "api" / "blobs"
    digest = next(blob_dir.rglob("*.png")).stem
    img = client.get(f"/api/images/{digest}.png")
    assert img.status_code == 200
    assert img.headers["content-type"] == "image/png"
    assert img.content[:8] == b"\x89PNG\r\n\x1a\n"


def test_api_and_cli_produce_identical_records(api, tmp_path):
    client, settings, root = api
    caption = f"{BASE} {FLOWER}"
    r = client.post(
        "/api/counterfactual", json={"caption": caption, "label": "fly", "target": "bee"}
    )
    api_hyp = _wait_job(client, r.json()["job_id"])["result"]

    from spurfinder.cli import main

    conf = tmp_path / "conf"
    conf.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()), "utf-8")
    argv = [
        "measure", "--caption", caption, "--label", "fly", "--target", "bee",
        "--config", str(conf), "--run-root", str(tmp_path / "cli-runs"),
    ]
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert (code or 0) == 0
    cli_run = tmp_path / "cli-runs" / "run"
    cli_recs = [
        json.loads(line)
        for line in (cli_run / "records" / "hypothesis.jsonl").read_text().splitlines()
    ]
    assert len(cli_recs) == 1
    assert cli_recs[0] == api_hyp  # field-for-field identical
