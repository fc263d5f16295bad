/** Wire types mirroring the server's JSON records. */

export interface RateEstimate {
  k: number;
  n: number;
  p: number;
  ci_lo: number;
  ci_hi: number;
  level: number;
}

export interface Hypothesis {
  id: string;
  label: string;
  target: string | null;
  caption: string;
  n: number;
  any_rate: RateEstimate;
  target_rate: RateEstimate | null;
  baseline_ref: string;
  baseline_any: RateEstimate;
  baseline_target: RateEstimate | null;
  ratio_any: number | null;
  ratio_target: number | null;
  confirmed: boolean;
  top1_counts: Record<string, number>;
  failure_top1_counts: Record<string, number>;
  origin: string;
}

export interface RunSummary {
  run_id: string;
  created: string | null;
  config_hash: string;
  hypotheses: number;
  baselines: number;
  clusters: number;
}

export interface ClusterMember {
  image: string;
  [key: string]: unknown;
}

export interface Cluster {
  id: string;
  predicted_label: string;
  centroid: number[];
  members: ClusterMember[];
  thumbnails: string[];
}

export interface JobProgress {
  sampled: number;
  failures: number;
  budget: number;
}

export type JobState = "queued" | "running" | "done" | "failed";

export interface Job {
  job_id: string;
  kind: string;
  state: JobState;
  progress: JobProgress;
  result_ref: string | null;
  result: Hypothesis | null;
  error: string | null;
}

export interface CounterfactualRequest {
  caption: string;
  label: string;
  target?: string;
  run?: string;
}
