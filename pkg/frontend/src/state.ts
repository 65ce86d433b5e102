/**
 * Client-side session state: the reviewer's name (required before any
 * decision) and locally retained decision drafts that failed to send.
 * Drafts are never auto-submitted; the reviewer re-sends them explicitly.
 */

export interface DecisionDraft {
  candidateId: string;
  decision: "accept" | "reject";
  note: string;
  savedAt: number;
}

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

const REVIEWER_KEY = "review-ui.reviewer";
const DRAFTS_KEY = "review-ui.drafts";

export class SessionState {
  constructor(private storage: StorageLike) {}

  reviewer(): string {
    return this.storage.getItem(REVIEWER_KEY) ?? "";
  }

  setReviewer(name: string): void {
    this.storage.setItem(REVIEWER_KEY, name.trim());
  }

  drafts(): DecisionDraft[] {
    const raw = this.storage.getItem(DRAFTS_KEY);
    if (!raw) return [];
    try {
      return JSON.parse(raw) as DecisionDraft[];
    } catch {
      return [];
    }
  }

  saveDraft(draft: DecisionDraft): void {
    const rest = this.drafts().filter(
      (d) => d.candidateId !== draft.candidateId
    );
    this.storage.setItem(DRAFTS_KEY, JSON.stringify([...rest, draft]));
  }

  draftFor(candidateId: string): DecisionDraft | undefined {
    return this.drafts().find((d) => d.candidateId === candidateId);
  }

  clearDraft(candidateId: string): void {
    const rest = this.drafts().filter((d) => d.candidateId !== candidateId);
    this.storage.setItem(DRAFTS_KEY, JSON.stringify(rest));
  }
}

export function memoryStorage(): StorageLike {
  const map = new Map<string, string>();
  return {
    getItem: (k) => (map.has(k) ? (map.get(k) as string) : null),
    setItem: (k, v) => void map.set(k, v),
    removeItem: (k) => void map.delete(k),
  };
}
