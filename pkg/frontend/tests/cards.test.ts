import { describe, expect, it } from "vitest";

import { buildCard, cappedThumbnails, formatRate, ratioFromCounts } from "../src/cards.js";
import type { Hypothesis, RateEstimate } from "../src/types.js";

function rate(k: number, n: number): RateEstimate {
  const p = k / n;
  return { k, n, p, ci_lo: Math.max(0, p - 0.1), ci_hi: Math.min(1, p + 0.1), level: 0.95 };
}

function hyp(overrides: Partial<Hypothesis> = {}): Hypothesis {
  const any = rate(30, 100);
  const base = rate(5, 100);
  return {
    id: "hypothesis:fly:abc:bee",
    label: "fly",
    target: "bee",
    caption: "a realistic photograph of a fly (arthropod). it is on a flower.",
    n: 100,
    any_rate: any,
    target_rate: rate(25, 100),
    baseline_ref: "baseline:fly:abc:bee",
    baseline_any: base,
    baseline_target: rate(2, 100),
    ratio_any: any.p / base.p,
    ratio_target: 25 / 100 / (2 / 100),
    confirmed: true,
    top1_counts: { bee: 25, fly: 70, wasp: 5 },
    failure_top1_counts: { bee: 25, wasp: 5 },
    origin: "auto",
    ...overrides,
  };
}

describe("ratioFromCounts", () => {
  it("matches the server's p-over-p definition exactly", () => {
    expect(ratioFromCounts(rate(25, 100), rate(2, 100))).toBe(25 / 100 / (2 / 100));
  });

  it("is null when the baseline saw zero events or a side is missing", () => {
    expect(ratioFromCounts(rate(25, 100), rate(0, 100))).toBeNull();
    expect(ratioFromCounts(null, rate(2, 100))).toBeNull();
    expect(ratioFromCounts(rate(25, 100), null)).toBeNull();
  });
});

describe("buildCard", () => {
  it("accepts a consistent hypothesis and carries its fields through", () => {
    const h = hyp();
    const card = buildCard(h);
    expect(card.ratioTarget.client).toBe(h.ratio_target);
    expect(card.ratioTarget.consistent).toBe(true);
    expect(card.confirmed).toBe(true);
    expect(card.caption).toBe(h.caption);
  });

  it("handles the untargeted case (null target fields)", () => {
    const card = buildCard(
      hyp({ target: null, target_rate: null, baseline_target: null, ratio_target: null }),
    );
    expect(card.ratioTarget).toEqual({ client: null, server: null, consistent: true });
    expect(card.ratioAny.consistent).toBe(true);
  });

  it("throws when the server-reported ratio disagrees with the raw counts", () => {
    expect(() => buildCard(hyp({ ratio_target: 99 }))).toThrow(/ratio mismatch/);
    expect(() => buildCard(hyp({ ratio_any: null }))).toThrow(/ratio mismatch/);
  });
});

describe("presentation helpers", () => {
  it("caps thumbnails at 24", () => {
    const urls = Array.from({ length: 40 }, (_, i) => `/api/images/${i}.png`);
    expect(cappedThumbnails(urls)).toHaveLength(24);
    expect(cappedThumbnails(urls.slice(0, 3))).toHaveLength(3);
  });

  it("formats rates with counts and the CI", () => {
    expect(formatRate(rate(25, 100))).toBe("25/100 = 25.0% [15.0, 35.0]");
  });
});
