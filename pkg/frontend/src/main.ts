/**
 * Review UI entry point: a single-page client over the review API. All
 * authoritative state lives on the server; optimistic updates are rolled
 * back by refetching whenever a request fails or conflicts.
 */

import { ApiError, ConflictError, ReviewApi } from "./api.js";
import { applyDiff, diffLines } from "./diff.js";
import {
  renderBanner,
  renderCandidate,
  renderPendingList,
  renderReviewerGate,
} from "./render.js";
import { SessionState } from "./state.js";
import type { CandidateDetail, PromptSummary } from "./types.js";

const api = new ReviewApi((input, init) => fetch(input, init));
const session = new SessionState(window.localStorage);

interface UiState {
  view: "queue" | "candidate";
  pending: PromptSummary[];
  activeSummary: string;
  detail: CandidateDetail | null;
  page: number;
  banner: string;
}

const state: UiState = {
  view: "queue",
  pending: [],
  activeSummary: "",
  detail: null,
  page: 0,
  banner: "",
};

function root(): HTMLElement {
  return document.getElementById("app") as HTMLElement;
}

function draw(): void {
  const parts: string[] = [];
  if (state.banner) {
    parts.push(renderBanner(state.banner, "error"));
  }
  parts.push(renderReviewerGate(session.reviewer()));
  if (state.view === "queue") {
    parts.push(renderPendingList(state.pending, state.activeSummary));
  } else if (state.detail) {
    const spans = diffLines(state.detail.parent_text, state.detail.candidate_text);
    if (applyDiff(spans) !== state.detail.candidate_text) {
      // Diff rendering must be lossless; refuse to show a wrong diff.
      parts.push(renderBanner("diff rendering failed; showing raw text", "error"));
    }
    const draft = session.draftFor(state.detail.prompt_id);
    parts.push(renderCandidate(state.detail, spans, state.page, draft?.note ?? ""));
  }
  root().innerHTML = parts.join("\n");
}

async function refreshQueue(): Promise<void> {
  try {
    const [pending, active] = await Promise.all([
      api.listPending(),
      api.activePrompt(),
    ]);
    state.pending = pending;
    state.activeSummary =
      `Active prompt ${active.prompt_id} at iteration ${active.iteration_k}` +
      (active.finalized ? " (finalized)" : "");
    state.banner = "";
  } catch (err) {
    // Keep the last good list; surface a retry banner.
    state.banner =
      err instanceof ApiError && err.status === 0
        ? "Review server unreachable."
        : `Failed to refresh: ${String(err)}`;
  }
  draw();
}

async function openCandidate(id: string): Promise<void> {
  try {
    state.detail = await api.candidateDetail(id);
    state.view = "candidate";
    state.page = 0;
    state.banner = "";
  } catch (err) {
    state.banner = `Could not load ${id}: ${String(err)}`;
  }
  draw();
}

async function decide(decision: "accept" | "reject"): Promise<void> {
  const detail = state.detail;
  if (!detail) return;
  const reviewer = session.reviewer();
  if (!reviewer) {
    state.banner = "Set your reviewer name before deciding.";
    draw();
    return;
  }
  const note =
    (root().querySelector("[data-field=note]") as HTMLTextAreaElement | null)
      ?.value ?? "";
  try {
    await api.submitDecision(detail.prompt_id, decision, reviewer, note);
    session.clearDraft(detail.prompt_id);
    state.view = "queue";
    state.detail = null;
    await refreshQueue();
  } catch (err) {
    if (err instanceof ConflictError) {
      // Someone else decided first: refresh, never resubmit.
      state.banner = "This candidate was already decided elsewhere.";
      state.view = "queue";
      state.detail = null;
      await refreshQueue();
    } else {
      // Network failure: retain the decision locally as an unsent draft.
      session.saveDraft({
        candidateId: detail.prompt_id,
        decision,
        note,
        savedAt: Date.now(),
      });
      state.banner =
        "Could not reach the server; your decision was saved as a local " +
        "draft and was NOT submitted.";
      draw();
    }
  }
}

async function finalize(): Promise<void> {
  try {
    const result = await api.finalize();
    state.banner = "";
    state.activeSummary = `Finalized ${result.finalized} at iteration ${result.iteration_k}`;
  } catch (err) {
    state.banner = `Finalize failed: ${String(err)}`;
  }
  await refreshQueue();
}

function onClick(event: Event): void {
  const target = (event.target as HTMLElement).closest("[data-action]");
  if (!target) return;
  const action = target.getAttribute("data-action");
  if (action === "open") {
    void openCandidate(target.getAttribute("data-candidate") as string);
  } else if (action === "back") {
    state.view = "queue";
    state.detail = null;
    void refreshQueue();
  } else if (action === "accept" || action === "reject") {
    void decide(action);
  } else if (action === "finalize") {
    void finalize();
  } else if (action === "retry") {
    void refreshQueue();
  } else if (action === "page") {
    state.page = Number(target.getAttribute("data-page"));
    draw();
  } else if (action === "save-reviewer") {
    const input = root().querySelector(
      "[data-field=reviewer]"
    ) as HTMLInputElement | null;
    if (input) session.setReviewer(input.value);
    draw();
  }
}

document.addEventListener("click", onClick);
void refreshQueue();
setInterval(() => {
  if (state.view === "queue") void refreshQueue();
}, 15_000);
