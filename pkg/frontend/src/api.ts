// Thin typed client over the dialog-service HTTP API. All state lives on the
// server; this module only shuttles JSON and surfaces errors verbatim.

export type TaskId = "persona" | "int" | "chat";
export type Verdict = "a_wins" | "b_wins" | "tie";

export interface DecodingParams {
  temperature: number;
  top_p: number;
  max_new_tokens: number;
}

export interface SessionConfigPayload {
  task: TaskId;
  variant: string;
  backend_id: string;
  decoding?: DecodingParams;
  persona?: string[] | null;
  image_description?: string | null;
  target_language?: string;
  setup_label?: string | null;
}

export interface FilterFlags {
  detected: string[];
  fixed: string[];
}

export interface TurnRecord {
  speaker: string;
  text: string;
  timestamp: number;
  filter?: FilterFlags & { attempts?: number };
}

export interface ConversationRecord {
  session_id: string;
  config: SessionConfigPayload & Record<string, unknown>;
  turns: TurnRecord[];
  annotations: Record<string, unknown>;
  state: Record<string, unknown>;
  valid: boolean;
  invalid_reason?: string | null;
}

export interface MessageResult {
  agent_reply: string;
  filter_flags: FilterFlags;
  attempts: number;
  finish_reason: string;
}

export interface ArenaPair {
  conversation_a: ConversationRecord;
  conversation_b: ConversationRecord;
}

export interface BattlePayload {
  conversation_a: string;
  conversation_b: string;
  verdicts: Record<string, Verdict>;
  annotator_id: string;
  timestamp?: number;
}

export interface EloReport {
  battles: number;
  criteria: string[];
  ratings: Record<string, Record<string, number>>;
  ranking: [string, number][];
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** HTTP failure carrying the service's own error detail, untouched. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
  ) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
    this.name = "ApiError";
  }
}

async function errorDetail(response: Response): Promise<unknown> {
  const text = await response.text();
  try {
    const body = JSON.parse(text) as Record<string, unknown>;
    return body && typeof body === "object" && "detail" in body ? body.detail : body;
  } catch {
    return text || response.statusText;
  }
}

export class DialogApi {
  private readonly fetchFn: FetchLike;

  constructor(
    private readonly baseUrl = "",
    fetchFn?: FetchLike,
  ) {
    // bind lazily so browser fetch keeps its window receiver
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  createSession(
    config: SessionConfigPayload,
    sessionId?: string,
  ): Promise<ConversationRecord> {
    const body: Record<string, unknown> = { ...config };
    if (sessionId) {
      body.session_id = sessionId;
    }
    return this.post("/sessions", body);
  }

  getSession(sessionId: string): Promise<ConversationRecord> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}`);
  }

  sendMessage(sessionId: string, text: string): Promise<MessageResult> {
    return this.post(`/sessions/${encodeURIComponent(sessionId)}/messages`, { text });
  }

  nextPair(annotatorId: string): Promise<ArenaPair> {
    return this.request(`/arena/next-pair?annotator=${encodeURIComponent(annotatorId)}`);
  }

  submitBattle(payload: BattlePayload): Promise<Record<string, unknown>> {
    return this.post("/arena/battles", payload);
  }

  eloReport(): Promise<EloReport> {
    return this.request("/reports/elo?format=json");
  }
}
