/** Multiplexed job polling. Each card watches at most one job; re-watching a
 * card supersedes its previous job, and any in-flight response for the old
 * job is discarded by job-id when it lands. */

export interface JobLike {
  job_id: string;
  state: string;
}

export const SETTLED_STATES = new Set(["done", "failed"]);

export class JobPoller<J extends JobLike> {
  private readonly current = new Map<string, string>();
  private readonly timers = new Map<string, ReturnType<typeof setTimeout>>();

  constructor(
    private readonly fetchJob: (jobId: string) => Promise<J>,
    private readonly intervalMs: number = 1000,
  ) {}

  /** Poll `jobId` for `cardId` until it settles. Replaces any previous watch
   * on the same card. */
  watch(
    cardId: string,
    jobId: string,
    onUpdate: (job: J) => void,
    onSettled?: (job: J) => void,
  ): void {
    const stale = this.timers.get(cardId);
    if (stale !== undefined) {
      clearTimeout(stale);
      this.timers.delete(cardId);
    }
    this.current.set(cardId, jobId);

    const live = () => this.current.get(cardId) === jobId;
    const schedule = () => {
      if (!live()) return;
      this.timers.set(
        cardId,
        setTimeout(() => void tick(), this.intervalMs),
      );
    };
    const tick = async () => {
      let job: J;
      try {
        job = await this.fetchJob(jobId);
      } catch {
        schedule(); // transient poll failure: try again
        return;
      }
      if (!live() || job.job_id !== jobId) return; // superseded: drop stale response
      onUpdate(job);
      if (SETTLED_STATES.has(job.state)) {
        this.timers.delete(cardId);
        this.current.delete(cardId);
        onSettled?.(job);
        return;
      }
      schedule();
    };
    void tick();
  }

  watching(cardId: string): string | undefined {
    return this.current.get(cardId);
  }

  stop(cardId: string): void {
    this.current.delete(cardId);
    const t = this.timers.get(cardId);
    if (t !== undefined) clearTimeout(t);
    this.timers.delete(cardId);
  }

  dispose(): void {
    for (const cardId of [...this.current.keys()]) this.stop(cardId);
    for (const t of this.timers.values()) clearTimeout(t);
    this.timers.clear();
  }
}
