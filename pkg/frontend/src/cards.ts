/** Hypothesis card view-model. The only arithmetic done client-side is
 * recomputing ratios from the raw counts as a consistency check against the
 * server-reported values; everything displayed comes from the server. */

import type { Hypothesis, RateEstimate } from "./types.js";

export const THUMBNAIL_CAP = 24;

/** Ratio from raw counts, mirroring the server: null when the baseline has
 * zero successes. */
export function ratioFromCounts(
  rate: RateEstimate | null,
  baseline: RateEstimate | null,
): number | null {
  if (rate === null || baseline === null) return null;
  if (baseline.k === 0) return null;
  return rate.k / rate.n / (baseline.k / baseline.n);
}

export interface RatioBadge {
  client: number | null;
  server: number | null;
  consistent: boolean;
}

function badge(client: number | null, server: number | null): RatioBadge {
  const consistent =
    client === null || server === null
      ? client === server
      : Math.abs(client - server) <= 1e-9 * Math.max(1, Math.abs(server));
  return { client, server, consistent };
}

export interface CardView {
  id: string;
  caption: string;
  label: string;
  target: string | null;
  confirmed: boolean;
  anyRate: RateEstimate;
  targetRate: RateEstimate | null;
  baselineAny: RateEstimate;
  baselineTarget: RateEstimate | null;
  ratioAny: RatioBadge;
  ratioTarget: RatioBadge;
}

/** Build the card view; throws if a recomputed ratio disagrees with the
 * server's — that would mean the displayed numbers are lying. */
export function buildCard(hyp: Hypothesis): CardView {
  const ratioAny = badge(
    ratioFromCounts(hyp.any_rate, hyp.baseline_any),
    hyp.ratio_any,
  );
  const ratioTarget = badge(
    ratioFromCounts(hyp.target_rate, hyp.baseline_target),
    hyp.ratio_target,
  );
  if (!ratioAny.consistent || !ratioTarget.consistent) {
    throw new Error(`ratio mismatch between client and server for ${hyp.id}`);
  }
  return {
    id: hyp.id,
    caption: hyp.caption,
    label: hyp.label,
    target: hyp.target,
    confirmed: hyp.confirmed,
    anyRate: hyp.any_rate,
    targetRate: hyp.target_rate,
    baselineAny: hyp.baseline_any,
    baselineTarget: hyp.baseline_target,
    ratioAny,
    ratioTarget,
  };
}

/** Cap a cluster's thumbnail list for responsiveness. */
export function cappedThumbnails(urls: string[], cap: number = THUMBNAIL_CAP): string[] {
  return urls.slice(0, cap);
}

export function formatRate(r: RateEstimate): string {
  return `${r.k}/${r.n} = ${(100 * r.p).toFixed(1)}% [${(100 * r.ci_lo).toFixed(1)}, ${(100 * r.ci_hi).toFixed(1)}]`;
}
