/**
 * HTML rendering, kept as pure string builders so the view logic is
 * testable without a DOM. Event wiring happens in main.ts via data-*
 * attributes.
 */

import { DiffSpan } from "./diff.js";
import type { CandidateDetail, PromptSummary, Snippet } from "./types.js";

export const SNIPPETS_PER_PAGE = 10;

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderBanner(message: string, kind: "error" | "info"): string {
  const retry =
    kind === "error"
      ? ' <button data-action="retry" class="retry">Retry</button>'
      : "";
  return `<div class="banner ${kind}">${escapeHtml(message)}${retry}</div>`;
}

export function renderPendingList(
  pending: PromptSummary[],
  activeSummary: string
): string {
  if (pending.length === 0) {
    return (
      `<div class="empty-state"><p>No candidates await review.</p>` +
      `<p class="active-summary">${escapeHtml(activeSummary)}</p>` +
      `<button data-action="finalize" class="finalize">` +
      `Finalize active prompt</button></div>`
    );
  }
  const rows = pending
    .map(
      (p) =>
        `<tr class="pending-row" data-candidate="${escapeHtml(p.prompt_id)}">` +
        `<td class="mono">${escapeHtml(p.prompt_id)}</td>` +
        `<td>iteration ${p.iteration_k}</td>` +
        `<td>${p.no_change ? "no change" : "changed"}</td>` +
        `<td><button data-action="open" data-candidate="${escapeHtml(
          p.prompt_id
        )}">Review</button></td></tr>`
    )
    .join("");
  return `<table class="pending"><thead><tr><th>candidate</th><th>iteration</th><th>delta</th><th></th></tr></thead><tbody>${rows}</tbody></table>`;
}

/** Two panes driven by one span list: parent = equal+delete, candidate = equal+insert. */
export function renderDiffPanes(spans: DiffSpan[]): string {
  const parent: string[] = [];
  const candidate: string[] = [];
  for (const span of spans) {
    for (const line of span.lines) {
      const safe = escapeHtml(line) || "&nbsp;";
      if (span.kind === "equal") {
        parent.push(`<div class="line equal">${safe}</div>`);
        candidate.push(`<div class="line equal">${safe}</div>`);
      } else if (span.kind === "delete") {
        parent.push(`<div class="line delete">${safe}</div>`);
      } else {
        candidate.push(`<div class="line insert">${safe}</div>`);
      }
    }
  }
  return (
    `<div class="diff-panes">` +
    `<div class="pane"><h3>Active prompt</h3>${parent.join("")}</div>` +
    `<div class="pane"><h3>Candidate</h3>${candidate.join("")}</div>` +
    `</div>`
  );
}

export function renderSnippetPage(
  snippets: Snippet[],
  page: number
): string {
  const pages = Math.max(1, Math.ceil(snippets.length / SNIPPETS_PER_PAGE));
  const clamped = Math.min(Math.max(page, 0), pages - 1);
  const slice = snippets.slice(
    clamped * SNIPPETS_PER_PAGE,
    (clamped + 1) * SNIPPETS_PER_PAGE
  );
  const cards = slice
    .map((s) => {
      const views = s.views
        .map(
          (url) =>
            `<img src="${escapeHtml(url)}" alt="view of ${escapeHtml(
              s.cloud_id
            )}" loading="lazy">`
        )
        .join("");
      return (
        `<div class="snippet ${s.parse_ok ? "ok" : "failed"}">` +
        `<div class="views">${views}</div>` +
        `<p class="q"><b>Q:</b> ${escapeHtml(s.instruction)}</p>` +
        `<p class="a"><b>A:</b> ${escapeHtml(s.answer)}</p>` +
        `<pre class="reasoning">${escapeHtml(s.reasoning)}</pre>` +
        (s.parse_ok ? "" : `<p class="parse-flag">did not parse</p>`) +
        `</div>`
      );
    })
    .join("");
  const nav =
    pages > 1
      ? `<div class="pager">` +
        `<button data-action="page" data-page="${clamped - 1}" ${
          clamped === 0 ? "disabled" : ""
        }>Prev</button>` +
        `<span>page ${clamped + 1} / ${pages}</span>` +
        `<button data-action="page" data-page="${clamped + 1}" ${
          clamped >= pages - 1 ? "disabled" : ""
        }>Next</button></div>`
      : "";
  return `<div class="snippets">${cards}</div>${nav}`;
}

export function renderCandidate(
  detail: CandidateDetail,
  spans: DiffSpan[],
  page: number,
  draftNote: string
): string {
  const stats = detail.parse_stats;
  return (
    `<div class="candidate" data-candidate="${escapeHtml(detail.prompt_id)}">` +
    `<button data-action="back">&larr; back to queue</button>` +
    `<h2>${escapeHtml(detail.prompt_id)} (iteration ${detail.iteration_k}` +
    `${detail.no_change ? ", no change" : ""})</h2>` +
    `<p class="stats">${stats.size} snippets, ${stats.parse_failures} parse failures</p>` +
    renderDiffPanes(spans) +
    `<div class="decision-box">` +
    `<textarea data-field="note" placeholder="review note">${escapeHtml(
      draftNote
    )}</textarea>` +
    `<button data-action="accept" class="accept">Accept</button>` +
    `<button data-action="reject" class="reject">Reject</button>` +
    `</div>` +
    `<h3>Sample batch</h3>` +
    renderSnippetPage(detail.snippets, page) +
    `</div>`
  );
}

export function renderReviewerGate(current: string): string {
  return (
    `<div class="reviewer-gate">` +
    `<label>Reviewer name <input data-field="reviewer" value="${escapeHtml(
      current
    )}"></label>` +
    `<button data-action="save-reviewer">Save</button>` +
    `<p class="hint">Decisions are recorded under this name.</p>` +
    `</div>`
  );
}
