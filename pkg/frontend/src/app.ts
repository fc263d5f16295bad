/** Page wiring: run browser, hypothesis cards, counterfactual editor. */

import { ApiClient, ApiError } from "./api.js";
import {
  addChip,
  checkCaption,
  removeChip,
  renderEditor,
  splitSentences,
  toEditorState,
  type EditorState,
} from "./caption.js";

/** First sentence of a stored caption — the immutable base prompt. */
export function basePrompt(caption: string): string {
  const parsed = splitSentences(caption);
  return parsed.ok ? parsed.sentences[0] : caption;
}
import { buildCard, formatRate, type CardView } from "./cards.js";
import { failureBars, renderBars } from "./chart.js";
import { JobPoller } from "./jobs.js";
import type { Hypothesis, Job } from "./types.js";

export class App {
  private readonly poller: JobPoller<Job>;
  private cardSeq = 0;

  constructor(
    private readonly api: ApiClient,
    private readonly root: HTMLElement,
    pollMs: number = 1000,
  ) {
    this.poller = new JobPoller((id) => this.api.job(id), pollMs);
  }

  async start(): Promise<void> {
    const doc = this.root.ownerDocument;
    this.root.textContent = "";
    const runsEl = doc.createElement("div");
    runsEl.className = "runs";
    const cardsEl = doc.createElement("div");
    cardsEl.className = "cards";
    this.root.append(runsEl, cardsEl);

    const runs = await this.api.listRuns();
    for (const run of runs) {
      const btn = doc.createElement("button");
      btn.textContent = `${run.run_id} (${run.hypotheses} hypotheses)`;
      btn.addEventListener("click", () => void this.showRun(run.run_id, cardsEl));
      runsEl.appendChild(btn);
    }
    if (runs.length === 0) {
      runsEl.textContent = "no runs yet — submit a counterfactual below";
    }
  }

  async showRun(runId: string, cardsEl: HTMLElement): Promise<void> {
    cardsEl.textContent = "";
    for (const hyp of await this.api.runHypotheses(runId)) {
      cardsEl.appendChild(this.renderCard(buildCard(hyp), hyp));
    }
  }

  renderCard(view: CardView, hyp: Hypothesis): HTMLElement {
    const doc = this.root.ownerDocument;
    const card = doc.createElement("article");
    card.className = view.confirmed ? "card confirmed" : "card";
    card.dataset.hypothesisId = view.id;

    const caption = doc.createElement("p");
    caption.className = "caption";
    caption.textContent = view.caption;
    card.appendChild(caption);

    if (view.confirmed) {
      const b = doc.createElement("span");
      b.className = "badge";
      b.textContent = "confirmed";
      card.appendChild(b);
    }

    const rates = doc.createElement("dl");
    const addRate = (name: string, text: string) => {
      const dt = doc.createElement("dt");
      dt.textContent = name;
      const dd = doc.createElement("dd");
      dd.textContent = text;
      rates.append(dt, dd);
    };
    addRate("failure rate", formatRate(view.anyRate));
    addRate("baseline", formatRate(view.baselineAny));
    if (view.targetRate && view.baselineTarget) {
      addRate(`rate → ${view.target}`, formatRate(view.targetRate));
      addRate("baseline → target", formatRate(view.baselineTarget));
    }
    const ratio = view.ratioTarget.server ?? view.ratioAny.server;
    if (ratio !== null) addRate("ratio", `${ratio.toFixed(1)}×`);
    card.appendChild(rates);

    const chartEl = doc.createElement("div");
    renderBars(
      chartEl,
      failureBars(hyp.failure_top1_counts, hyp.target),
      "top mistakes",
    );
    card.appendChild(chartEl);
    card.appendChild(this.renderEditorFor(hyp, card));
    return card;
  }

  /** Chip editor under a card: remove sentences, add free text, submit. */
  renderEditorFor(hyp: Hypothesis, card: HTMLElement): HTMLElement {
    const doc = this.root.ownerDocument;
    const wrap = doc.createElement("div");
    wrap.className = "editor";
    const parsed = toEditorState(hyp.caption, basePrompt(hyp.caption));
    let state: EditorState = "ok" in parsed ? { base: hyp.caption, chips: [] } : parsed;

    const chipsEl = doc.createElement("div");
    chipsEl.className = "chips";
    const input = doc.createElement("input");
    input.placeholder = "add a sentence…";
    const errEl = doc.createElement("p");
    errEl.className = "editor-error";
    const submit = doc.createElement("button");
    submit.textContent = "measure";

    const redraw = () => {
      chipsEl.textContent = "";
      state.chips.forEach((chip, i) => {
        const el = doc.createElement("span");
        el.className = "chip";
        el.textContent = chip + " ×";
        el.addEventListener("click", () => {
          state = removeChip(state, i);
          redraw();
        });
        chipsEl.appendChild(el);
      });
    };
    redraw();

    input.addEventListener("change", () => {
      const next = addChip(state, input.value);
      if ("ok" in next && !next.ok) {
        errEl.textContent = next.message;
        return;
      }
      state = next as EditorState;
      input.value = "";
      errEl.textContent = "";
      redraw();
    });

    submit.addEventListener("click", () => {
      void this.submitEdit(renderEditor(state), hyp, card, errEl);
    });

    wrap.append(chipsEl, input, submit, errEl);
    return wrap;
  }

  /** Validate client-side first: an invalid caption sends no request. */
  async submitEdit(
    text: string,
    origin: Hypothesis,
    beside: HTMLElement,
    errEl: HTMLElement,
  ): Promise<void> {
    const checked = checkCaption(text, basePrompt(origin.caption));
    if (!checked.ok) {
      errEl.textContent = `${checked.message} (at ${checked.position})`;
      return;
    }
    errEl.textContent = "";
    let jobId: string;
    try {
      const resp = await this.api.submitCounterfactual({
        caption: checked.rendered,
        label: origin.label,
        target: origin.target ?? undefined,
      });
      jobId = resp.job_id;
    } catch (exc) {
      if (exc instanceof ApiError && exc.body?.position !== undefined) {
        errEl.textContent = `${exc.body.error} (at ${exc.body.position})`;
        return;
      }
      throw exc;
    }

    const doc = this.root.ownerDocument;
    const pending = doc.createElement("article");
    pending.className = "card pending";
    pending.textContent = "measuring…";
    beside.after(pending);

    const cardId = `card-${this.cardSeq++}`;
    this.poller.watch(
      cardId,
      jobId,
      (job) => {
        if (job.state === "running") {
          pending.textContent = `measuring… ${job.progress.sampled}/${job.progress.budget}`;
        }
      },
      (job) => {
        if (job.state === "failed" || job.result === null) {
          pending.textContent = `measurement failed: ${job.error ?? "no result"}`;
          return;
        }
        const fresh = this.renderCard(buildCard(job.result), job.result);
        pending.replaceWith(fresh);
      },
    );
  }
}

export function boot(): void {
  const root = document.getElementById("app");
  if (root === null) throw new Error("missing #app element");
  const app = new App(new ApiClient(""), root);
  void app.start();
}
