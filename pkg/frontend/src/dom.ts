// DOM construction for both views. Pure functions over a Document so the
// pieces can be exercised without a browser.

import { ArenaPair, ConversationRecord, Verdict } from "./api.js";
import { ChatMessage } from "./chat.js";

const SPEAKER_LABELS: Record<string, string> = {
  user: "you",
  agent: "agent",
  agent_a: "agent A",
  agent_b: "agent B",
};

export function renderFilterBadge(doc: Document, msg: ChatMessage): HTMLElement | null {
  if (msg.detected.length === 0 && msg.fixed.length === 0) {
    return null;
  }
  const badge = doc.createElement("span");
  badge.className = "filter-badge";
  badge.title = "response filters fired on this turn";
  const parts = msg.detected.map((rule) =>
    msg.fixed.includes(rule) ? `${rule} (fixed)` : rule,
  );
  badge.textContent = `filters: ${parts.join(", ")}`;
  return badge;
}

export function renderMessage(doc: Document, msg: ChatMessage): HTMLElement {
  const item = doc.createElement("article");
  item.className = `message message-${msg.speaker}`;
  const speaker = doc.createElement("span");
  speaker.className = "speaker";
  speaker.textContent = SPEAKER_LABELS[msg.speaker] ?? msg.speaker;
  const bubble = doc.createElement("p");
  bubble.className = "bubble";
  bubble.textContent = msg.text;
  item.append(speaker, bubble);
  const badge = renderFilterBadge(doc, msg);
  if (badge) {
    item.append(badge);
  }
  return item;
}

export function renderMessageList(doc: Document, messages: ChatMessage[]): HTMLElement {
  const list = doc.createElement("div");
  list.className = "message-list";
  for (const msg of messages) {
    list.append(renderMessage(doc, msg));
  }
  return list;
}

/** Shown for image-discussion sessions only: the scene both speakers see. */
export function renderImagePanel(doc: Document, description: string): HTMLElement {
  const panel = doc.createElement("aside");
  panel.className = "image-panel";
  const heading = doc.createElement("h3");
  heading.textContent = "Image under discussion";
  const body = doc.createElement("p");
  body.textContent = description;
  panel.append(heading, body);
  return panel;
}

export function renderConversationPanel(
  doc: Document,
  record: ConversationRecord,
  title: string,
): HTMLElement {
  const panel = doc.createElement("section");
  panel.className = "conversation-panel";
  const heading = doc.createElement("h3");
  heading.textContent = title;
  panel.append(heading);
  if (record.config.task === "int" && record.config.image_description) {
    panel.append(renderImagePanel(doc, record.config.image_description));
  }
  const messages: ChatMessage[] = record.turns.map((turn) => ({
    speaker: turn.speaker,
    text: turn.text,
    detected: [],
    fixed: [],
  }));
  panel.append(renderMessageList(doc, messages));
  return panel;
}

const VERDICT_CHOICES: { verdict: Verdict; label: string }[] = [
  { verdict: "a_wins", label: "A" },
  { verdict: "tie", label: "Tie" },
  { verdict: "b_wins", label: "B" },
];

export function renderVerdictRow(
  doc: Document,
  criterion: string,
  current: Verdict | undefined,
  onPick: (criterion: string, verdict: Verdict) => void,
): HTMLElement {
  const row = doc.createElement("div");
  row.className = "verdict-row";
  row.dataset.criterion = criterion;
  const label = doc.createElement("span");
  label.className = "criterion";
  label.textContent = criterion;
  row.append(label);
  for (const choice of VERDICT_CHOICES) {
    const button = doc.createElement("button");
    button.type = "button";
    button.textContent = choice.label;
    button.dataset.verdict = choice.verdict;
    button.setAttribute("aria-pressed", String(current === choice.verdict));
    button.addEventListener("click", () => onPick(criterion, choice.verdict));
    row.append(button);
  }
  return row;
}

export function renderVerdictForm(
  doc: Document,
  pair: ArenaPair,
  criteria: string[],
  verdicts: Record<string, Verdict>,
  onPick: (criterion: string, verdict: Verdict) => void,
): HTMLElement {
  const form = doc.createElement("div");
  form.className = "verdict-form";
  for (const criterion of criteria) {
    form.append(renderVerdictRow(doc, criterion, verdicts[criterion], onPick));
  }
  return form;
}

export function renderBattlePair(doc: Document, pair: ArenaPair): HTMLElement {
  const wrap = doc.createElement("div");
  wrap.className = "battle-pair";
  wrap.append(
    renderConversationPanel(doc, pair.conversation_a, "Conversation A"),
    renderConversationPanel(doc, pair.conversation_b, "Conversation B"),
  );
  return wrap;
}

export function renderEmptyState(doc: Document): HTMLElement {
  const empty = doc.createElement("div");
  empty.className = "empty-state";
  const heading = doc.createElement("h3");
  heading.textContent = "Nothing left to judge";
  const body = doc.createElement("p");
  body.textContent =
    "Every available pair has your verdict already. Generate more self-chats, or come back later.";
  empty.append(heading, body);
  return empty;
}

export function renderErrorBanner(
  doc: Document,
  message: string,
  onRetry: () => void,
): HTMLElement {
  const banner = doc.createElement("div");
  banner.className = "error-banner";
  banner.setAttribute("role", "alert");
  const text = doc.createElement("span");
  text.className = "error-text";
  text.textContent = message;
  const retry = doc.createElement("button");
  retry.type = "button";
  retry.className = "retry";
  retry.textContent = "Retry";
  retry.addEventListener("click", onRetry);
  banner.append(text, retry);
  return banner;
}
