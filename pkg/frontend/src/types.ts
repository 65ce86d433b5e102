export interface PromptSummary {
  prompt_id: string;
  iteration_k: number;
  state: string;
  parent_id: string | null;
  batch_id: string | null;
  no_change: boolean;
  created_at: number;
  decision: {
    decision: string;
    reviewer: string;
    note: string;
    timestamp: number;
  } | null;
}

export interface ActivePrompt extends PromptSummary {
  text: string;
  finalized: boolean;
}

export interface Snippet {
  sample_id: string;
  cloud_id: string;
  instruction: string;
  answer: string;
  reasoning: string;
  parse_ok: boolean;
  views: string[];
}

export interface CandidateDetail extends PromptSummary {
  candidate_text: string;
  parent_text: string;
  diff: string;
  snippets: Snippet[];
  parse_stats: { size: number; parse_failures: number };
}

export interface DecisionResult {
  prompt_id: string;
  state: string;
  iteration_k: number;
  active_prompt_id: string;
}
