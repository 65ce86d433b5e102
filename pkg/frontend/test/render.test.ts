import { describe, expect, it } from "vitest";

import { diffLines } from "../src/diff.js";
import {
  SNIPPETS_PER_PAGE,
  escapeHtml,
  renderCandidate,
  renderDiffPanes,
  renderPendingList,
  renderSnippetPage,
} from "../src/render.js";
import { SessionState, memoryStorage } from "../src/state.js";
import { FixtureServer } from "./fixture_server.js";

describe("escapeHtml", () => {
  it("neutralizes markup in model text", () => {
    expect(escapeHtml('<img src=x onerror="pwn()">')).not.toContain("<img");
  });
});

describe("renderPendingList", () => {
  it("renders a row per candidate", () => {
    const server = new FixtureServer();
    server.addCandidate("pv0002", "a");
    server.addCandidate("pv0003", "b");
    const html = renderPendingList(
      [...server.prompts.values()].filter((p) => p.state === "candidate"),
      "Active prompt pv0001"
    );
    expect(html).toContain("pv0002");
    expect(html).toContain("pv0003");
  });

  it("empty queue shows the active-prompt summary", () => {
    const html = renderPendingList([], "Active prompt pv0001 at iteration 0");
    expect(html).toContain("No candidates await review");
    expect(html).toContain("Active prompt pv0001");
  });
});

describe("renderDiffPanes", () => {
  it("colors insertions and deletions per pane", () => {
    const spans = diffLines("keep\ndrop me", "keep\nadd me");
    const html = renderDiffPanes(spans);
    expect(html).toContain('class="line delete"');
    expect(html).toContain('class="line insert"');
    expect(html).toContain("drop me");
    expect(html).toContain("add me");
  });
});

describe("renderSnippetPage", () => {
  const server = new FixtureServer();
  server.addCandidate("pv0002", "text", 23);
  const detail = server.details.get("pv0002")!;

  it("paginates ten snippets per page", () => {
    const page0 = renderSnippetPage(detail.snippets, 0);
    expect(page0.match(/class="snippet /g)).toHaveLength(SNIPPETS_PER_PAGE);
    const page2 = renderSnippetPage(detail.snippets, 2);
    expect(page2.match(/class="snippet /g)).toHaveLength(3);
    expect(page2).toContain("page 3 / 3");
  });

  it("shows four view images per snippet", () => {
    const html = renderSnippetPage(detail.snippets.slice(0, 1), 0);
    expect(html.match(/<img /g)).toHaveLength(4);
  });

  it("flags snippets that failed to parse", () => {
    const html = renderSnippetPage(detail.snippets, 0);
    expect(html).toContain("did not parse");
  });
});

describe("renderCandidate", () => {
  it("includes both panes, stats, and the decision box", () => {
    const server = new FixtureServer();
    server.addCandidate("pv0002", "Base prompt.\nRule one.\nRule two.", 4);
    const detail = server.details.get("pv0002")!;
    const spans = diffLines(detail.parent_text, detail.candidate_text);
    const html = renderCandidate(detail, spans, 0, "draft note");
    expect(html).toContain("Active prompt");
    expect(html).toContain("Candidate");
    expect(html).toContain("4 snippets");
    expect(html).toContain('data-action="accept"');
    expect(html).toContain('data-action="reject"');
    expect(html).toContain("draft note");
  });
});

describe("SessionState", () => {
  it("stores the reviewer and unsent drafts", () => {
    const state = new SessionState(memoryStorage());
    expect(state.reviewer()).toBe("");
    state.setReviewer("  alex ");
    expect(state.reviewer()).toBe("alex");
    state.saveDraft({
      candidateId: "pv0002",
      decision: "accept",
      note: "lgtm",
      savedAt: 1,
    });
    expect(state.draftFor("pv0002")?.note).toBe("lgtm");
    state.clearDraft("pv0002");
    expect(state.draftFor("pv0002")).toBeUndefined();
  });
});
