/** Client-side caption grammar: sentence splitting, base-prefix validation,
 * and the chip-based editor state. Validation here only has to agree with the
 * server on what is obviously malformed — anything subtler still gets a 400
 * with a character position, which the editor shows inline. */

export interface CaptionError {
  ok: false;
  message: string;
  position: number;
  expectedPrefix?: string;
}

export interface ParsedCaption {
  ok: true;
  /** All sentences, each including its "." terminator. */
  sentences: string[];
}

export type CaptionCheck = ParsedCaption | CaptionError;

/** Split into "."-terminated sentences; error position points at the first
 * offending character (end of text for a missing terminator). */
export function splitSentences(text: string): CaptionCheck {
  const sentences: string[] = [];
  let i = 0;
  while (i < text.length) {
    while (i < text.length && text[i] === " ") i += 1;
    if (i >= text.length) break;
    const dot = text.indexOf(".", i);
    if (dot === -1) {
      return {
        ok: false,
        message: "sentence is missing its '.' terminator",
        position: text.length,
      };
    }
    sentences.push(text.slice(i, dot + 1));
    i = dot + 1;
  }
  if (sentences.length === 0) {
    return { ok: false, message: "caption is empty", position: 0 };
  }
  return { ok: true, sentences };
}

export interface CheckedCaption {
  ok: true;
  base: string;
  extra: string[];
  rendered: string;
}

/** Full pre-submit check: parses and requires the base prompt as the first
 * sentence. Editors must refuse to submit (and send nothing) on failure. */
export function checkCaption(
  text: string,
  expectedBase: string,
): CheckedCaption | CaptionError {
  const parsed = splitSentences(text);
  if (!parsed.ok) return parsed;
  if (parsed.sentences[0] !== expectedBase) {
    return {
      ok: false,
      message: `caption must start with the base prompt "${expectedBase}"`,
      position: 0,
      expectedPrefix: expectedBase,
    };
  }
  return {
    ok: true,
    base: expectedBase,
    extra: parsed.sentences.slice(1),
    rendered: parsed.sentences.join(" "),
  };
}

/** Editor model: the base prompt is fixed; each extra sentence is a chip. */
export interface EditorState {
  base: string;
  chips: string[];
}

export function toEditorState(
  text: string,
  expectedBase: string,
): EditorState | CaptionError {
  const checked = checkCaption(text, expectedBase);
  if (!checked.ok) return checked;
  return { base: checked.base, chips: checked.extra };
}

export function renderEditor(state: EditorState): string {
  return [state.base, ...state.chips].join(" ");
}

export function removeChip(state: EditorState, index: number): EditorState {
  if (index < 0 || index >= state.chips.length) {
    throw new RangeError(`no chip at index ${index}`);
  }
  return { base: state.base, chips: state.chips.filter((_, i) => i !== index) };
}

/** Add a free-text sentence as a new chip; it must be exactly one sentence. */
export function addChip(state: EditorState, text: string): EditorState | CaptionError {
  const parsed = splitSentences(text.trim());
  if (!parsed.ok) return parsed;
  if (parsed.sentences.length !== 1) {
    return {
      ok: false,
      message: "a chip holds exactly one sentence",
      position: parsed.sentences[0].length,
    };
  }
  return { base: state.base, chips: [...state.chips, parsed.sentences[0]] };
}
