import type {
  Cluster,
  CounterfactualRequest,
  Hypothesis,
  Job,
  RunSummary,
} from "./types.js";

export interface ApiErrorBody {
  error: string;
  position?: number;
  expected_prefix?: string;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly body: ApiErrorBody | null,
  ) {
    super(body?.error ?? `request failed with status ${status}`);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the server's JSON routes. */
export class ApiClient {
  private readonly fetchFn: FetchLike;

  constructor(
    private readonly base: string = "",
    fetchFn?: FetchLike,
  ) {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + path, init);
    if (!resp.ok) {
      let body: ApiErrorBody | null = null;
      try {
        body = (await resp.json()) as ApiErrorBody;
      } catch {
        body = null;
      }
      throw new ApiError(resp.status, body);
    }
    return (await resp.json()) as T;
  }

  listRuns(): Promise<RunSummary[]> {
    return this.request("/api/runs");
  }

  runHypotheses(runId: string): Promise<Hypothesis[]> {
    return this.request(`/api/runs/${encodeURIComponent(runId)}/hypotheses`);
  }

  hypothesis(id: string): Promise<Hypothesis> {
    return this.request(`/api/hypotheses/${id}`);
  }

  cluster(id: string): Promise<Cluster> {
    return this.request(`/api/clusters/${id}`);
  }

  job(id: string): Promise<Job> {
    return this.request(`/api/jobs/${encodeURIComponent(id)}`);
  }

  imageUrl(digest: string): string {
    return `${this.base}/api/images/${digest}.png`;
  }

  submitCounterfactual(body: CounterfactualRequest): Promise<{ job_id: string }> {
    return this.request("/api/counterfactual", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }
}
