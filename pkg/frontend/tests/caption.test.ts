import { describe, expect, it } from "vitest";

import {
  addChip,
  checkCaption,
  removeChip,
  renderEditor,
  splitSentences,
  toEditorState,
  type EditorState,
} from "../src/caption.js";

const BASE = "a realistic photograph of a fly (arthropod).";
const FLOWER = "it is on a flower.";

describe("splitSentences", () => {
  it("splits terminator-delimited sentences", () => {
    const r = splitSentences(`${BASE} ${FLOWER}`);
    expect(r.ok).toBe(true);
    if (r.ok) expect(r.sentences).toEqual([BASE, FLOWER]);
  });

  it("reports a missing terminator at the end of the text", () => {
    const r = splitSentences("no terminator");
    expect(r).toMatchObject({ ok: false, position: "no terminator".length });
  });

  it("reports a missing terminator on the trailing fragment", () => {
    const text = `${BASE} dangling words`;
    const r = splitSentences(text);
    expect(r).toMatchObject({ ok: false, position: text.length });
  });

  it("rejects empty and whitespace-only captions at position 0", () => {
    expect(splitSentences("")).toMatchObject({ ok: false, position: 0 });
    expect(splitSentences("   ")).toMatchObject({ ok: false, position: 0 });
  });
});

describe("checkCaption", () => {
  it("accepts the base prompt alone and with extras", () => {
    const alone = checkCaption(BASE, BASE);
    expect(alone).toMatchObject({ ok: true, extra: [] });
    const extra = checkCaption(`${BASE} ${FLOWER}`, BASE);
    expect(extra).toMatchObject({ ok: true, extra: [FLOWER] });
    if (extra.ok) expect(extra.rendered).toBe(`${BASE} ${FLOWER}`);
  });

  it("rejects a caption whose base prompt was deleted, at position 0", () => {
    const r = checkCaption(FLOWER, BASE);
    expect(r).toMatchObject({ ok: false, position: 0, expectedPrefix: BASE });
  });

  it("rejects a caption with a different base prompt", () => {
    const r = checkCaption("a realistic photograph of a bee (pollinator).", BASE);
    expect(r).toMatchObject({ ok: false, position: 0, expectedPrefix: BASE });
  });
});

describe("editor state", () => {
  const state = (): EditorState => {
    const s = toEditorState(`${BASE} ${FLOWER} it is in a net.`, BASE);
    if ("ok" in s) throw new Error("fixture caption must parse");
    return s;
  };

  it("round-trips through render", () => {
    expect(renderEditor(state())).toBe(`${BASE} ${FLOWER} it is in a net.`);
  });

  it("removes a chip without touching the base", () => {
    const next = removeChip(state(), 0);
    expect(renderEditor(next)).toBe(`${BASE} it is in a net.`);
    expect(() => removeChip(next, 5)).toThrow(RangeError);
  });

  it("adds a single-sentence chip, trimming whitespace", () => {
    const next = addChip(state(), "  it is wet.  ");
    expect("ok" in next).toBe(false);
    if (!("ok" in next)) {
      expect(next.chips.at(-1)).toBe("it is wet.");
    }
  });

  it("refuses multi-sentence and unterminated chips", () => {
    expect(addChip(state(), "two. sentences.")).toMatchObject({ ok: false });
    expect(addChip(state(), "unterminated")).toMatchObject({ ok: false });
  });
});
