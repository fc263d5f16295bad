/** Failure-distribution bar data and rendering: the top predicted labels
 * among failures, with the target label highlighted. Pure count arithmetic —
 * no statistics are computed client-side. */

export const TOP_N = 15;

export interface Bar {
  label: string;
  count: number;
  highlighted: boolean;
}

export interface BarChart {
  bars: Bar[];
  /** Sum over ALL labels, not just the displayed bars. */
  total: number;
  empty: boolean;
}

export function failureBars(
  counts: Record<string, number>,
  target: string | null,
  topN: number = TOP_N,
): BarChart {
  const entries = Object.entries(counts).filter(([, c]) => c > 0);
  entries.sort(([la, ca], [lb, cb]) => cb - ca || (la < lb ? -1 : la > lb ? 1 : 0));
  const total = entries.reduce((acc, [, c]) => acc + c, 0);
  return {
    bars: entries.slice(0, topN).map(([label, count]) => ({
      label,
      count,
      highlighted: label === target,
    })),
    total,
    empty: total === 0,
  };
}

export function renderBars(el: Element, chart: BarChart, title: string): void {
  const doc = el.ownerDocument;
  el.textContent = "";
  const heading = doc.createElement("h3");
  heading.textContent = title;
  el.appendChild(heading);

  if (chart.empty) {
    const msg = doc.createElement("p");
    msg.className = "empty-state";
    msg.textContent = "no failures recorded";
    el.appendChild(msg);
    return;
  }

  const max = Math.max(...chart.bars.map((b) => b.count));
  const list = doc.createElement("div");
  list.className = "bars";
  for (const bar of chart.bars) {
    const row = doc.createElement("div");
    row.className = bar.highlighted ? "bar target" : "bar";
    const label = doc.createElement("span");
    label.className = "bar-label";
    label.textContent = bar.label;
    const fill = doc.createElement("span");
    fill.className = "bar-fill";
    fill.style.width = `${(100 * bar.count) / max}%`;
    const count = doc.createElement("span");
    count.className = "bar-count";
    count.textContent = String(bar.count);
    row.append(label, fill, count);
    list.appendChild(row);
  }
  el.appendChild(list);
}
