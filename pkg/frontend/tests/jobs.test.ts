import { describe, expect, it } from "vitest";

import { JobPoller, type JobLike } from "../src/jobs.js";

interface FakeJob extends JobLike {
  tick: number;
}

function deferred<T>(): { promise: Promise<T>; resolve: (v: T) => void } {
  let resolve!: (v: T) => void;
  const promise = new Promise<T>((r) => (resolve = r));
  return { promise, resolve };
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

describe("JobPoller", () => {
  it("polls until the job settles and fires the settle callback once", async () => {
    let calls = 0;
    const poller = new JobPoller<FakeJob>(async (id) => {
      calls += 1;
      return { job_id: id, state: calls < 3 ? "running" : "done", tick: calls };
    }, 5);
    const updates: FakeJob[] = [];
    const settled = deferred<FakeJob>();
    poller.watch("card", "j1", (j) => updates.push(j), settled.resolve);
    const final = await settled.promise;
    expect(final.state).toBe("done");
    expect(updates.map((u) => u.state)).toEqual(["running", "running", "done"]);
    expect(poller.watching("card")).toBeUndefined();
    await sleep(30);
    expect(calls).toBe(3); // no polling after settle
    poller.dispose();
  });

  it("discards stale responses when a card is superseded by a new job", async () => {
    const gates = new Map<string, { promise: Promise<void>; resolve: () => void }>();
    const poller = new JobPoller<FakeJob>(async (id) => {
      const gate = gates.get(id);
      if (gate) await gate.promise;
      return { job_id: id, state: "done", tick: 0 };
    }, 5);

    const slow = deferred<void>();
    gates.set("old", { promise: slow.promise, resolve: () => slow.resolve(undefined) });

    const seen: string[] = [];
    poller.watch("card", "old", (j) => seen.push(j.job_id));
    // supersede while the first poll is still in flight
    const settled = deferred<FakeJob>();
    poller.watch("card", "new", (j) => seen.push(j.job_id), settled.resolve);
    slow.resolve(undefined); // stale response lands now
    await settled.promise;
    await sleep(20);
    expect(seen).toEqual(["new"]); // the old job's response was dropped
    poller.dispose();
  });

  it("stop() halts polling for a card", async () => {
    let calls = 0;
    const poller = new JobPoller<FakeJob>(async (id) => {
      calls += 1;
      return { job_id: id, state: "running", tick: calls };
    }, 5);
    poller.watch("card", "j1", () => {});
    await sleep(15);
    poller.stop("card");
    const snapshot = calls;
    await sleep(30);
    expect(calls).toBe(snapshot);
    expect(poller.watching("card")).toBeUndefined();
  });

  it("retries after a transient fetch failure", async () => {
    let calls = 0;
    const poller = new JobPoller<FakeJob>(async (id) => {
      calls += 1;
      if (calls === 1) throw new Error("network blip");
      return { job_id: id, state: "done", tick: calls };
    }, 5);
    const settled = deferred<FakeJob>();
    poller.watch("card", "j1", () => {}, settled.resolve);
    const final = await settled.promise;
    expect(final.state).toBe("done");
    expect(calls).toBe(2);
    poller.dispose();
  });

  it("watches independent cards concurrently", async () => {
    const poller = new JobPoller<FakeJob>(
      async (id) => ({ job_id: id, state: "done", tick: 0 }),
      5,
    );
    const a = deferred<FakeJob>();
    const b = deferred<FakeJob>();
    poller.watch("card-a", "ja", () => {}, a.resolve);
    poller.watch("card-b", "jb", () => {}, b.resolve);
    expect((await a.promise).job_id).toBe("ja");
    expect((await b.promise).job_id).toBe("jb");
    poller.dispose();
  });
});
