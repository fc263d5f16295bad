// @vitest-environment happy-dom
//
// End-to-end round trip against the real backing server: the counterfactual
// editor submits the synthetic world's planted caption, and the resulting
// card must carry exactly the same Hypothesis record the CLI stores for the
// same input; an edit that deletes the base prompt must be rejected purely
// client-side, with no request on the wire.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api.js";
import { App } from "../src/app.js";
import { checkCaption } from "../src/caption.js";
import { buildCard } from "../src/cards.js";
import { JobPoller } from "../src/jobs.js";
import type { Hypothesis, Job } from "../src/types.js";

const BASE = "a realistic photograph of a fly (arthropod).";
const PLANTED = `${BASE} it is on a flower.`;
const CONF = "target_failures = 8\nmax_samples = 128\nbatch_size = 32\n";

// vitest runs with the package root as cwd; import.meta.url is http: under happy-dom
const helperDir = join(process.cwd(), "tests", "helpers");
const port = 8750 + Math.floor(Math.random() * 1000);
const baseUrl = `http://127.0.0.1:${port}`;

let server: ChildProcess;
let workDir: string;

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 60_000;
  while (Date.now() < deadline) {
    try {
      const r = await fetch(`${baseUrl}/api/runs`);
      if (r.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error("API server did not come up");
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "explorer-"));
  server = spawn(
    "python3",
    [join(helperDir, "serve_api.py"), String(port), join(workDir, "api-runs")],
    { stdio: ["ignore", "inherit", "inherit"] },
  );
  await waitForServer();
});

afterAll(() => {
  server?.kill();
  rmSync(workDir, { recursive: true, force: true });
});

function pollToCompletion(api: ApiClient, jobId: string): Promise<Job> {
  return new Promise((resolve, reject) => {
    const poller = new JobPoller<Job>((id) => api.job(id), 100);
    poller.watch("roundtrip", jobId, () => {}, (job) => {
      poller.dispose();
      job.state === "done" ? resolve(job) : reject(new Error(job.error ?? "job failed"));
    });
  });
}

describe("counterfactual editor round trip", () => {
  it("produces a card identical to the CLI's stored hypothesis", async () => {
    const api = new ApiClient(baseUrl);

    // the editor path: client-side grammar check, then submit
    const checked = checkCaption(PLANTED, BASE);
    expect(checked.ok).toBe(true);
    if (!checked.ok) return;
    const { job_id } = await api.submitCounterfactual({
      caption: checked.rendered,
      label: "fly",
      target: "bee",
    });
    const job = await pollToCompletion(api, job_id);
    const apiHyp = job.result as Hypothesis;
    expect(apiHyp).not.toBeNull();

    // same measurement through the CLI into its own run root
    const confPath = join(workDir, "conf");
    writeFileSync(confPath, CONF);
    const cliRoot = join(workDir, "cli-runs");
    const cli = spawnSync(
      "spurfinder",
      ["measure", "--caption", PLANTED, "--label", "fly", "--target", "bee",
       "--config", confPath, "--run-root", cliRoot],
      { encoding: "utf-8" },
    );
    expect(cli.status, cli.stderr).toBe(0);
    const lines = readFileSync(join(cliRoot, "run", "records", "hypothesis.jsonl"), "utf-8")
      .trim()
      .split("\n");
    expect(lines).toHaveLength(1);
    const cliHyp = JSON.parse(lines[0]) as Hypothesis;

    // field-for-field: rates, CIs, counts, ratios, confirmation — everything
    expect(apiHyp).toEqual(cliHyp);

    // and the card view built from it is internally consistent
    const card = buildCard(apiHyp);
    expect(card.confirmed).toBe(true);
    expect(card.ratioTarget.consistent).toBe(true);
    expect(card.ratioTarget.server).not.toBeNull();
    expect(card.ratioTarget.server!).toBeGreaterThan(5);
  });

  it("rejects an edit that deletes the base prompt with no network request", async () => {
    const fetchSpy = vi.fn(() => {
      throw new Error("the editor must not touch the network for invalid captions");
    });
    const api = new ApiClient(baseUrl, fetchSpy);
    const root = document.createElement("div");
    document.body.appendChild(root);
    const app = new App(api, root, 50);

    const origin = {
      id: "h", label: "fly", target: "bee", caption: PLANTED, n: 0,
      any_rate: { k: 0, n: 1, p: 0, ci_lo: 0, ci_hi: 0, level: 0.95 },
      target_rate: null, baseline_ref: "b",
      baseline_any: { k: 0, n: 1, p: 0, ci_lo: 0, ci_hi: 0, level: 0.95 },
      baseline_target: null, ratio_any: null, ratio_target: null,
      confirmed: false, top1_counts: {}, failure_top1_counts: {}, origin: "manual",
    } as Hypothesis;

    const errEl = document.createElement("p");
    // the edit removed the base prompt entirely
    await app.submitEdit("it is on a flower.", origin, root, errEl);

    expect(errEl.textContent).toContain("base prompt");
    expect(errEl.textContent).toContain("(at 0)");
    expect(fetchSpy).not.toHaveBeenCalled();
  });
});
