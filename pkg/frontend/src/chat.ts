// Chat view state. The server owns the conversation; after every exchange the
// message list is rebuilt from the fetched record, never patched locally.

import {
  ApiError,
  ConversationRecord,
  DialogApi,
  SessionConfigPayload,
  TurnRecord,
} from "./api.js";

export interface ChatMessage {
  speaker: string;
  text: string;
  /** filter rules that fired on this turn, empty for clean turns */
  detected: string[];
  fixed: string[];
}

export interface ChatState {
  sessionId: string | null;
  task: string | null;
  imageDescription: string | null;
  messages: ChatMessage[];
  busy: boolean;
  /** verbatim service error detail, null when the last call succeeded */
  error: string | null;
  /** user text whose delivery failed; resend with retry() */
  failedText: string | null;
}

export type ChatListener = (state: ChatState) => void;

function messageFromTurn(turn: TurnRecord): ChatMessage {
  return {
    speaker: turn.speaker,
    text: turn.text,
    detected: turn.filter?.detected ?? [],
    fixed: turn.filter?.fixed ?? [],
  };
}

function errorText(err: unknown): string {
  if (err instanceof ApiError) {
    return err.message;
  }
  return err instanceof Error ? err.message : String(err);
}

export class ChatController {
  private state: ChatState = {
    sessionId: null,
    task: null,
    imageDescription: null,
    messages: [],
    busy: false,
    error: null,
    failedText: null,
  };
  private listeners: ChatListener[] = [];

  constructor(private readonly api: DialogApi) {}

  getState(): ChatState {
    return this.state;
  }

  subscribe(listener: ChatListener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(patch: Partial<ChatState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  private adopt(record: ConversationRecord): void {
    this.update({
      sessionId: record.session_id,
      task: record.config.task,
      imageDescription: record.config.image_description ?? null,
      messages: record.turns.map(messageFromTurn),
      error: null,
    });
  }

  async start(config: SessionConfigPayload, sessionId?: string): Promise<void> {
    this.update({ busy: true, error: null, failedText: null });
    try {
      this.adopt(await this.api.createSession(config, sessionId));
    } catch (err) {
      this.update({ error: errorText(err) });
      throw err;
    } finally {
      this.update({ busy: false });
    }
  }

  async load(sessionId: string): Promise<void> {
    this.update({ busy: true, error: null, failedText: null });
    try {
      this.adopt(await this.api.getSession(sessionId));
    } catch (err) {
      this.update({ error: errorText(err) });
      throw err;
    } finally {
      this.update({ busy: false });
    }
  }

  async send(text: string): Promise<void> {
    const sessionId = this.state.sessionId;
    if (!sessionId) {
      throw new Error("no active session");
    }
    this.update({ busy: true, error: null, failedText: null });
    try {
      await this.api.sendMessage(sessionId, text);
      // re-fetch so the list mirrors the stored turns exactly
      this.adopt(await this.api.getSession(sessionId));
    } catch (err) {
      this.update({ error: errorText(err), failedText: text });
      throw err;
    } finally {
      this.update({ busy: false });
    }
  }

  /** Resend the last failed message, if any. */
  async retry(): Promise<void> {
    const text = this.state.failedText;
    if (text === null) {
      return;
    }
    await this.send(text);
  }
}
