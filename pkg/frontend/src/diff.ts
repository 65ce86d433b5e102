/**
 * Line-level diff between the parent prompt and a candidate.
 *
 * The span list is the single source of truth for both display panes, and it
 * must be lossless: applying the spans to the parent text reproduces the
 * candidate text byte for byte (the server's unified diff is shown only as a
 * secondary affordance).
 */

export type SpanKind = "equal" | "delete" | "insert";

export interface DiffSpan {
  kind: SpanKind;
  lines: string[];
}

/** Longest-common-subsequence table over lines. */
function lcsMatrix(a: string[], b: string[]): Int32Array {
  const cols = b.length + 1;
  const table = new Int32Array((a.length + 1) * cols);
  for (let i = a.length - 1; i >= 0; i--) {
    for (let j = b.length - 1; j >= 0; j--) {
      table[i * cols + j] =
        a[i] === b[j]
          ? table[(i + 1) * cols + j + 1] + 1
          : Math.max(table[(i + 1) * cols + j], table[i * cols + j + 1]);
    }
  }
  return table;
}

export function diffLines(parent: string, candidate: string): DiffSpan[] {
  const a = parent.split("\n");
  const b = candidate.split("\n");
  const cols = b.length + 1;
  const table = lcsMatrix(a, b);
  const spans: DiffSpan[] = [];
  const push = (kind: SpanKind, line: string) => {
    const last = spans[spans.length - 1];
    if (last && last.kind === kind) {
      last.lines.push(line);
    } else {
      spans.push({ kind, lines: [line] });
    }
  };
  let i = 0;
  let j = 0;
  while (i < a.length && j < b.length) {
    if (a[i] === b[j]) {
      push("equal", a[i]);
      i++;
      j++;
    } else if (table[(i + 1) * cols + j] >= table[i * cols + j + 1]) {
      push("delete", a[i]);
      i++;
    } else {
      push("insert", b[j]);
      j++;
    }
  }
  for (; i < a.length; i++) push("delete", a[i]);
  for (; j < b.length; j++) push("insert", b[j]);
  return spans;
}

/** Reconstruct the candidate text from parent-side spans. */
export function applyDiff(spans: DiffSpan[]): string {
  const lines: string[] = [];
  for (const span of spans) {
    if (span.kind === "equal" || span.kind === "insert") {
      lines.push(...span.lines);
    }
  }
  return lines.join("\n");
}

/** Reconstruct the parent text (sanity check for the pane rendering). */
export function revertDiff(spans: DiffSpan[]): string {
  const lines: string[] = [];
  for (const span of spans) {
    if (span.kind === "equal" || span.kind === "delete") {
      lines.push(...span.lines);
    }
  }
  return lines.join("\n");
}
