// Page wiring: binds the controllers to the static shell in index.html.
// Everything authoritative lives behind the HTTP API; a refresh rebuilds
// the whole view from what the service returns.

import { DialogApi, SessionConfigPayload, TaskId, Verdict } from "./api.js";
import { BattleController } from "./battle.js";
import { ChatController } from "./chat.js";
import {
  renderBattlePair,
  renderEmptyState,
  renderErrorBanner,
  renderImagePanel,
  renderMessageList,
  renderVerdictForm,
} from "./dom.js";
import { createSpeech, SpeechHost } from "./speech.js";

const TASK_VARIANTS: Record<TaskId, string[]> = {
  persona: ["shallow", "advanced", "fsb"],
  int: ["int"],
  chat: ["basis"],
};

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) {
    throw new Error(`missing element #${id}`);
  }
  return el as T;
}

function show(el: HTMLElement, visible: boolean): void {
  el.hidden = !visible;
}

export function boot(): void {
  const api = new DialogApi("");
  const chat = new ChatController(api);
  const speech = createSpeech(window as unknown as SpeechHost);

  // --- tabs ---
  const tabChat = byId<HTMLButtonElement>("tab-chat");
  const tabArena = byId<HTMLButtonElement>("tab-arena");
  const chatView = byId<HTMLElement>("chat-view");
  const arenaView = byId<HTMLElement>("arena-view");
  const selectTab = (name: "chat" | "arena") => {
    show(chatView, name === "chat");
    show(arenaView, name === "arena");
    tabChat.classList.toggle("active", name === "chat");
    tabArena.classList.toggle("active", name === "arena");
  };
  tabChat.addEventListener("click", () => selectTab("chat"));
  tabArena.addEventListener("click", () => selectTab("arena"));
  selectTab("chat");

  // --- chat: session form ---
  const taskSelect = byId<HTMLSelectElement>("task");
  const variantSelect = byId<HTMLSelectElement>("variant");
  const backendInput = byId<HTMLInputElement>("backend");
  const personaInput = byId<HTMLTextAreaElement>("persona");
  const personaField = byId<HTMLElement>("persona-field");
  const imageInput = byId<HTMLTextAreaElement>("image-description");
  const imageField = byId<HTMLElement>("image-field");
  const startButton = byId<HTMLButtonElement>("start-session");
  const sessionForm = byId<HTMLElement>("session-form");
  const sessionLabel = byId<HTMLElement>("session-label");

  const syncTaskFields = () => {
    const task = taskSelect.value as TaskId;
    variantSelect.replaceChildren(
      ...TASK_VARIANTS[task].map((variant) => {
        const option = document.createElement("option");
        option.value = variant;
        option.textContent = variant;
        return option;
      }),
    );
    show(personaField, task === "persona");
    show(imageField, task === "int");
  };
  taskSelect.addEventListener("change", syncTaskFields);
  syncTaskFields();

  // --- chat: transcript + composer ---
  const transcript = byId<HTMLElement>("transcript");
  const imagePanelSlot = byId<HTMLElement>("chat-image-panel");
  const chatErrors = byId<HTMLElement>("chat-errors");
  const composer = byId<HTMLElement>("composer");
  const messageInput = byId<HTMLInputElement>("message");
  const sendButton = byId<HTMLButtonElement>("send");
  const micButton = byId<HTMLButtonElement>("mic");
  const speakToggle = byId<HTMLInputElement>("speak-replies");
  const speakField = byId<HTMLElement>("speak-field");

  show(micButton, speech.canListen);
  show(speakField, speech.canSpeak);

  let spokenCount = 0;
  chat.subscribe((state) => {
    show(sessionForm, state.sessionId === null);
    show(composer, state.sessionId !== null);
    sessionLabel.textContent = state.sessionId ?? "";
    transcript.replaceChildren(renderMessageList(document, state.messages));
    imagePanelSlot.replaceChildren();
    if (state.task === "int" && state.imageDescription) {
      imagePanelSlot.replaceChildren(renderImagePanel(document, state.imageDescription));
    }
    sendButton.disabled = state.busy;
    startButton.disabled = state.busy;
    chatErrors.replaceChildren();
    if (state.error !== null) {
      chatErrors.append(
        renderErrorBanner(document, state.error, () => {
          void (state.failedText !== null ? chat.retry() : chat.load(state.sessionId ?? ""));
        }),
      );
    }
    if (speech.canSpeak && speakToggle.checked) {
      const agentTexts = state.messages
        .filter((m) => m.speaker === "agent")
        .map((m) => m.text);
      if (agentTexts.length > spokenCount) {
        for (const text of agentTexts.slice(spokenCount)) {
          speech.speak(text);
        }
      }
      spokenCount = agentTexts.length;
    }
    transcript.scrollTop = transcript.scrollHeight;
  });

  startButton.addEventListener("click", () => {
    const task = taskSelect.value as TaskId;
    const config: SessionConfigPayload = {
      task,
      variant: variantSelect.value,
      backend_id: backendInput.value.trim(),
      target_language: "fr",
    };
    if (task === "persona") {
      const traits = personaInput.value
        .split("\n")
        .map((line) => line.trim())
        .filter(Boolean);
      config.persona = traits;
    }
    if (task === "int") {
      config.image_description = imageInput.value.trim();
    }
    spokenCount = 0;
    void chat.start(config).catch(() => undefined);
  });

  const sendCurrent = () => {
    const text = messageInput.value.trim();
    if (!text) {
      return;
    }
    messageInput.value = "";
    void chat.send(text).catch(() => undefined);
  };
  sendButton.addEventListener("click", sendCurrent);
  messageInput.addEventListener("keydown", (event) => {
    if (event.key === "Enter") {
      sendCurrent();
    }
  });
  micButton.addEventListener("click", () => {
    micButton.disabled = true;
    speech.listen(
      (text) => {
        messageInput.value = text;
        sendCurrent();
      },
      () => {
        micButton.disabled = false;
      },
    );
  });

  // --- arena ---
  const annotatorInput = byId<HTMLInputElement>("annotator");
  const loadPairButton = byId<HTMLButtonElement>("load-pair");
  const pairSlot = byId<HTMLElement>("pair");
  const verdictSlot = byId<HTMLElement>("verdicts");
  const submitButton = byId<HTMLButtonElement>("submit-verdicts");
  const arenaErrors = byId<HTMLElement>("arena-errors");
  const judgedCounter = byId<HTMLElement>("judged-count");

  const battle = new BattleController(api, annotatorInput.value || "annotator");
  annotatorInput.addEventListener("change", () => {
    battle.setAnnotator(annotatorInput.value.trim() || "annotator");
  });

  const onPick = (criterion: string, verdict: Verdict) => {
    battle.setVerdict(criterion, verdict);
  };

  battle.subscribe((state) => {
    pairSlot.replaceChildren();
    verdictSlot.replaceChildren();
    if (state.pair) {
      pairSlot.append(renderBattlePair(document, state.pair));
      verdictSlot.append(
        renderVerdictForm(
          document,
          state.pair,
          battle.requiredCriteria(),
          state.verdicts,
          onPick,
        ),
      );
    } else if (state.empty) {
      pairSlot.append(renderEmptyState(document));
    }
    submitButton.disabled = !battle.canSubmit();
    judgedCounter.textContent = String(state.submitted);
    arenaErrors.replaceChildren();
    if (state.error !== null) {
      arenaErrors.append(
        renderErrorBanner(document, state.error, () => {
          void (battle.canSubmit() ? battle.submit() : battle.fetchPair()).catch(
            () => undefined,
          );
        }),
      );
    }
  });

  loadPairButton.addEventListener("click", () => {
    void battle.fetchPair().catch(() => undefined);
  });
  submitButton.addEventListener("click", () => {
    void battle.submit().catch(() => undefined);
  });
}

boot();
