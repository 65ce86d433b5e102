import { describe, expect, it } from "vitest";

import { ApiError, ConflictError, ReviewApi } from "../src/api.js";
import { FixtureServer } from "./fixture_server.js";

function setup() {
  const server = new FixtureServer();
  const api = new ReviewApi(server.fetch);
  return { server, api };
}

describe("pending-candidate listing", () => {
  it("lists two pending candidates newest-first", async () => {
    const { server, api } = setup();
    server.addCandidate("pv0002", "Base prompt.\nRule one.\nRule two.");
    server.addCandidate("pv0003", "Base prompt.\nRule one.\nRule three.");
    const pending = await api.listPending();
    expect(pending.map((p) => p.prompt_id)).toEqual(["pv0003", "pv0002"]);
  });

  it("empty queue still exposes the active prompt", async () => {
    const { api } = setup();
    expect(await api.listPending()).toEqual([]);
    const active = await api.activePrompt();
    expect(active.prompt_id).toBe("pv0001");
    expect(active.finalized).toBe(false);
  });

  it("server failure surfaces as ApiError with status 0", async () => {
    const { server, api } = setup();
    server.failNetwork = true;
    await expect(api.listPending()).rejects.toBeInstanceOf(ApiError);
    await expect(api.listPending()).rejects.toMatchObject({ status: 0 });
  });
});

describe("candidate detail", () => {
  it("carries parent text, candidate text, snippets, and stats", async () => {
    const { server, api } = setup();
    server.addCandidate("pv0002", "Base prompt.\nRule one.\nRule two.", 12);
    const detail = await api.candidateDetail("pv0002");
    expect(detail.parent_text).toBe("Base prompt.\nRule one.");
    expect(detail.candidate_text).toContain("Rule two.");
    expect(detail.snippets).toHaveLength(12);
    expect(detail.snippets[0].views).toHaveLength(4);
    expect(detail.parse_stats.size).toBe(12);
  });

  it("404s on unknown candidates", async () => {
    const { api } = setup();
    await expect(api.candidateDetail("pv9999")).rejects.toMatchObject({
      status: 404,
    });
  });
});

describe("decision round-trips", () => {
  it("accept promotes the candidate and retires the old active", async () => {
    const { server, api } = setup();
    server.addCandidate("pv0002", "Base prompt.\nRule one.\nRule two.");
    const result = await api.submitDecision("pv0002", "accept", "alex", "ok");
    expect(result.state).toBe("active");
    expect(result.active_prompt_id).toBe("pv0002");
    const active = await api.activePrompt();
    expect(active.prompt_id).toBe("pv0002");
    expect(active.iteration_k).toBe(1);
  });

  it("reject keeps the active prompt", async () => {
    const { server, api } = setup();
    server.addCandidate("pv0002", "different");
    const result = await api.submitDecision("pv0002", "reject", "alex", "no");
    expect(result.state).toBe("rejected");
    expect((await api.activePrompt()).prompt_id).toBe("pv0001");
  });

  it("double decision returns 409 as ConflictError", async () => {
    const { server, api } = setup();
    server.addCandidate("pv0002", "different");
    await api.submitDecision("pv0002", "reject", "alex", "");
    await expect(
      api.submitDecision("pv0002", "accept", "blake", "")
    ).rejects.toBeInstanceOf(ConflictError);
  });

  it("decision is the only mutation path used", async () => {
    const { server, api } = setup();
    server.addCandidate("pv0002", "different");
    await api.listPending();
    await api.candidateDetail("pv0002");
    await api.submitDecision("pv0002", "accept", "alex", "");
    const mutations = server.requests.filter((r) => r.startsWith("POST"));
    expect(mutations).toEqual(["POST /api/candidates/pv0002/decision"]);
  });
});

describe("finalize", () => {
  it("marks the active prompt finalized", async () => {
    const { server, api } = setup();
    const result = await api.finalize();
    expect(result.finalized).toBe("pv0001");
    expect((await api.activePrompt()).finalized).toBe(true);
  });
});
