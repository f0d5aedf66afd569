// Arena annotation state: one pair of finished self-chats side by side,
// one verdict per criterion. Submission stays disabled until every
// required criterion has a verdict.

import { ApiError, ArenaPair, ConversationRecord, DialogApi, Verdict } from "./api.js";

export const BASE_CRITERIA = [
  "overall",
  "coherence",
  "engagingness",
  "humanness",
] as const;

/** Image-discussion pairs are additionally judged on goal achievement. */
export function requiredCriteria(pair: ArenaPair | null): string[] {
  const base: string[] = [...BASE_CRITERIA];
  if (pair && isImageTask(pair.conversation_a)) {
    base.push("achievement");
  }
  return base;
}

export function isImageTask(record: ConversationRecord): boolean {
  return record.config.task === "int";
}

export interface BattleState {
  pair: ArenaPair | null;
  /** true once the service reported no unjudged pair for this annotator */
  empty: boolean;
  verdicts: Record<string, Verdict>;
  busy: boolean;
  error: string | null;
  submitted: number;
}

export type BattleListener = (state: BattleState) => void;

function errorText(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

export class BattleController {
  private state: BattleState = {
    pair: null,
    empty: false,
    verdicts: {},
    busy: false,
    error: null,
    submitted: 0,
  };
  private listeners: BattleListener[] = [];

  constructor(
    private readonly api: DialogApi,
    private annotatorId: string,
  ) {}

  getState(): BattleState {
    return this.state;
  }

  subscribe(listener: BattleListener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(patch: Partial<BattleState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  setAnnotator(annotatorId: string): void {
    this.annotatorId = annotatorId;
  }

  get annotator(): string {
    return this.annotatorId;
  }

  requiredCriteria(): string[] {
    return requiredCriteria(this.state.pair);
  }

  /** All required criteria have verdicts and a pair is on screen. */
  canSubmit(): boolean {
    if (!this.state.pair || this.state.busy) {
      return false;
    }
    return this.requiredCriteria().every((c) => this.state.verdicts[c] !== undefined);
  }

  setVerdict(criterion: string, verdict: Verdict): void {
    this.update({ verdicts: { ...this.state.verdicts, [criterion]: verdict } });
  }

  async fetchPair(): Promise<void> {
    this.update({ busy: true, error: null });
    try {
      const pair = await this.api.nextPair(this.annotatorId);
      this.update({ pair, empty: false, verdicts: {} });
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        // nothing left to judge: empty state, not an error
        this.update({ pair: null, empty: true, verdicts: {} });
      } else {
        this.update({ error: errorText(err) });
        throw err;
      }
    } finally {
      this.update({ busy: false });
    }
  }

  async submit(): Promise<void> {
    const pair = this.state.pair;
    if (!pair || !this.canSubmit()) {
      throw new Error("verdicts incomplete");
    }
    this.update({ busy: true, error: null });
    try {
      await this.api.submitBattle({
        conversation_a: pair.conversation_a.session_id,
        conversation_b: pair.conversation_b.session_id,
        verdicts: { ...this.state.verdicts },
        annotator_id: this.annotatorId,
      });
    } catch (err) {
      // verdicts stay selected so the annotator can retry the submission
      this.update({ error: errorText(err), busy: false });
      throw err;
    }
    this.update({ submitted: this.state.submitted + 1, busy: false });
    await this.fetchPair();
  }
}
