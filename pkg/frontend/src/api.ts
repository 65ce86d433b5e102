/**
 * Typed client for the review API. All state lives on the server; the only
 * mutations this client ever performs are POST /decision and POST /finalize.
 *
 * The fetch function is injected so tests can run against a scripted fixture
 * server.
 */

import type {
  ActivePrompt,
  CandidateDetail,
  DecisionResult,
  PromptSummary,
} from "./types.js";

export type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string }
) => Promise<{ status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ConflictError extends ApiError {
  constructor(message: string) {
    super(409, message);
  }
}

export class ReviewApi {
  constructor(
    private fetchFn: FetchLike,
    private baseUrl = ""
  ) {}

  private async get<T>(path: string): Promise<T> {
    let response;
    try {
      response = await this.fetchFn(this.baseUrl + path);
    } catch (err) {
      throw new ApiError(0, `network failure: ${String(err)}`);
    }
    if (response.status !== 200) {
      throw new ApiError(response.status, `GET ${path} -> ${response.status}`);
    }
    return (await response.json()) as T;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    let response;
    try {
      response = await this.fetchFn(this.baseUrl + path, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    } catch (err) {
      throw new ApiError(0, `network failure: ${String(err)}`);
    }
    if (response.status === 409) {
      throw new ConflictError(`POST ${path} -> already decided`);
    }
    if (response.status !== 200) {
      throw new ApiError(response.status, `POST ${path} -> ${response.status}`);
    }
    return (await response.json()) as T;
  }

  listPrompts(): Promise<PromptSummary[]> {
    return this.get("/api/prompts");
  }

  activePrompt(): Promise<ActivePrompt> {
    return this.get("/api/prompts/active");
  }

  listPending(): Promise<PromptSummary[]> {
    return this.get("/api/candidates/pending");
  }

  candidateDetail(id: string): Promise<CandidateDetail> {
    return this.get(`/api/candidates/${id}`);
  }

  submitDecision(
    id: string,
    decision: "accept" | "reject",
    reviewer: string,
    note: string
  ): Promise<DecisionResult> {
    return this.post(`/api/candidates/${id}/decision`, {
      decision,
      reviewer,
      note,
    });
  }

  finalize(): Promise<{ finalized: string; iteration_k: number }> {
    return this.post("/api/finalize", {});
  }
}
