"""Turn pipeline: budgeting, truncation, memory, generation, filtering.

One reply goes through a fixed sequence. The prompt is rendered from the
responder's perspective (the partner always reads as ``user``); when its size
estimate exceeds the budget, the oldest history pairs are dropped and, for
templates that carry a summary slot, compressed into the episode summary.
The completion then passes the task filter, whose regeneration callbacks hit
the same backend. Per-side bookkeeping (dropped turn count, summary, user
memory) lives in ``conversation.state`` so it survives a round trip to disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .filters import DEFAULT_FILTER_CONFIG, FilterConfig, FilterOutcome, filter_int, filter_persona
from .gateway import (
    FINISH_END,
    BackendRegistry,
    Completion,
    GenerationRequest,
    RetriesExhausted,
)
from .memory import EpisodeSummary, MemoryConfig, MemoryModules, UserMemory
from .prompting import (
    ConversationHistory,
    HistoryTurn,
    PromptInputs,
    RenderedPrompt,
    empty_history,
    get_template,
    format_history,
    render_prompt,
    task_stop_markers,
    truncate_history,
)
from .store import (
    SPEAKER_AGENT,
    SPEAKER_USER,
    Conversation,
    ConversationStore,
    SessionConfig,
    Turn,
    TurnOrderError,
)


@dataclass(frozen=True)
class BudgetConfig:
    context_window: int = 2048
    generation_reserve: int = 256
    min_keep_pairs: int = 2

    def __post_init__(self) -> None:
        if self.generation_reserve < 0:
            raise ValueError("generation_reserve must be >= 0")
        if self.context_window - self.generation_reserve < 1:
            raise ValueError("context_window must exceed generation_reserve")
        if self.min_keep_pairs < 1:
            raise ValueError("min_keep_pairs must be >= 1")

    @property
    def prompt_budget(self) -> int:
        return self.context_window - self.generation_reserve


@dataclass(frozen=True)
class EngineConfig:
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    filters: FilterConfig = DEFAULT_FILTER_CONFIG
    template_dir: str | None = None
    k_window: int | None = None
    max_retries: int = 1


@dataclass
class AgentReply:
    text: str
    outcome: FilterOutcome
    prompt: RenderedPrompt
    finish_reason: str
    generation_attempts: int


# per-side state keys inside conversation.state["sides"][speaker]
def _side_state(conv: Conversation, responder: str) -> dict:
    sides = conv.state.setdefault("sides", {})
    return sides.setdefault(responder, {})


def _summary_from(side: dict) -> EpisodeSummary | None:
    rec = side.get("summary")
    if not rec:
        return None
    return EpisodeSummary(text=rec["text"], covers_turn_range=tuple(rec["covers"]))


def _memory_from(side: dict) -> UserMemory | None:
    rec = side.get("user_memory")
    if not rec:
        return None
    return UserMemory(text=rec["text"], last_updated_turn=rec["turn"])


class ChatEngine:
    """Drives replies for live sessions and self-chat jobs."""

    def __init__(
        self,
        store: ConversationStore,
        registry: BackendRegistry,
        config: EngineConfig | None = None,
        memory_modules: MemoryModules | None = None,
    ):
        self.store = store
        self.registry = registry
        self.config = config or EngineConfig()
        self.memory = memory_modules or MemoryModules(
            registry, self.config.memory, self.config.template_dir
        )

    # --- live sessions -------------------------------------------------

    def respond(self, session_id: str, user_text: str) -> AgentReply:
        """Answer one user message; appends both turns on success."""
        conv = self.store.get(session_id)
        if not user_text.strip():
            raise TurnOrderError("user message must be non-empty")
        last = conv.last_speaker()
        if last is not None and last != SPEAKER_AGENT:
            raise TurnOrderError(f"expected an agent turn after {last!r}")
        reply = self.generate_reply(conv, SPEAKER_AGENT, user_text, conv.turns)
        self.store.append_turn(session_id, SPEAKER_USER, user_text)
        self.store.append_turn(session_id, SPEAKER_AGENT, reply.text, reply.outcome.record())
        self.refresh_user_memory(conv, SPEAKER_AGENT)
        self.store.save(conv)
        return reply

    # --- reply construction ----------------------------------------------

    def generate_reply(
        self,
        conv: Conversation,
        responder: str,
        latest_user_message: str,
        history_turns: list[Turn],
        session_config: SessionConfig | None = None,
    ) -> AgentReply:
        """Build, budget, generate, and filter one reply without storing it.

        ``history_turns`` is the stored prefix the responder can see; the
        latest user message is passed separately and must not be in it.
        ``session_config`` overrides the conversation config, which lets the
        two sides of a self-chat run different setups. Raises RetriesExhausted
        when the primary generation fails for good.
        """
        cfg = session_config or conv.config
        template_id = cfg.template_id
        side = _side_state(conv, responder)
        budget = self.config.budget.prompt_budget
        template = get_template(template_id, self.config.template_dir)

        removed_total = int(side.get("removed_count", 0))
        summary = _summary_from(side)
        memory = _memory_from(side)
        degraded = False

        def project(turns: list[Turn]) -> list[HistoryTurn]:
            return [
                HistoryTurn("agent" if t.speaker == responder else "user", t.text)
                for t in turns
            ]

        def build_inputs(hist: ConversationHistory, extra: str | None = None) -> PromptInputs:
            return PromptInputs(
                user_message=latest_user_message,
                history=hist,
                persona=cfg.persona,
                user_memory=(
                    memory.text if memory and "user_memory" in template.slots else None
                ),
                summary=(summary.text if summary and "summary" in template.slots else None),
                image_description=cfg.image_description,
                extra_instruction=extra,
            )

        def render(hist: ConversationHistory, extra: str | None = None) -> RenderedPrompt:
            return render_prompt(
                template_id,
                build_inputs(hist, extra),
                k_window=self.config.k_window,
                template_dir=self.config.template_dir,
            )

        hist = ConversationHistory(project(history_turns[removed_total:]))
        prompt = render(hist)
        for _ in range(3):
            if prompt.token_estimate <= budget:
                break
            base = render(empty_history()).token_estimate
            kept, removed_pairs = truncate_history(
                hist,
                max(budget - base, 1),
                min_keep=self.config.budget.min_keep_pairs,
                formatter=lambda h: format_history(template_id, h),
            )
            if not removed_pairs:
                break  # already at the floor
            flat = [t for pair in removed_pairs for t in pair]
            if self.config.memory.enabled and "summary" in template.slots:
                summary, was_degraded = self.memory.summarize_removed(
                    flat, summary, removed_total, cfg.backend_id
                )
                degraded = degraded or was_degraded
            removed_total += len(flat)
            hist = kept
            prompt = render(hist)

        side["removed_count"] = removed_total
        if summary is not None:
            side["summary"] = {"text": summary.text, "covers": list(summary.covers_turn_range)}
        if degraded:
            side["memory_degraded"] = True

        request = GenerationRequest(
            prompt=prompt.text,
            max_new_tokens=cfg.decoding.max_new_tokens,
            temperature=cfg.decoding.temperature,
            top_p=cfg.decoding.top_p,
            stop_markers=task_stop_markers(template_id),
            backend_id=cfg.backend_id,
        )
        completion = self.registry.complete_with_retry(request, self.config.max_retries)

        if cfg.task == "int":
            outcome = filter_int(
                completion.text,
                target_language=cfg.target_language,
                regenerate=lambda instruction: self._int_regen(render, hist, request, instruction),
                config=self.config.filters,
            )
        else:
            is_first = not any(t.speaker == responder for t in history_turns)
            outcome = filter_persona(
                completion.text,
                is_first_agent_message=is_first,
                target_language=cfg.target_language,
                finish_reason=completion.finish_reason,
                regenerate=lambda: self._persona_regen(request),
                config=self.config.filters,
            )
        return AgentReply(
            text=outcome.text,
            outcome=outcome,
            prompt=prompt,
            finish_reason=completion.finish_reason,
            generation_attempts=completion.attempts,
        )

    def _persona_regen(self, request: GenerationRequest) -> tuple[str, str]:
        try:
            c: Completion = self.registry.complete_with_retry(request, self.config.max_retries)
            return c.text, c.finish_reason
        except RetriesExhausted:
            return "", FINISH_END

    def _int_regen(self, render, hist, request: GenerationRequest, instruction: str) -> str | None:
        rp = render(hist, instruction)
        try:
            return self.registry.complete_with_retry(
                replace(request, prompt=rp.text), self.config.max_retries
            ).text
        except RetriesExhausted:
            return None

    # --- user memory cadence ----------------------------------------------

    def refresh_user_memory(
        self,
        conv: Conversation,
        responder: str,
        session_config: SessionConfig | None = None,
    ) -> bool:
        """Update the one-line user memory when enough new user turns piled up."""
        cfg = session_config or conv.config
        if not self.config.memory.enabled:
            return False
        template = get_template(cfg.template_id, self.config.template_dir)
        if "user_memory" not in template.slots:
            return False
        side = _side_state(conv, responder)
        partner_turns = [t for t in conv.turns if t.speaker != responder]
        anchor = int(side.get("memory_turns", 0))
        if len(partner_turns) - anchor < self.config.memory.cadence:
            return False
        prior = _memory_from(side)
        updated, was_degraded = self.memory.update_user_memory(
            [t.text for t in partner_turns[anchor:]],
            prior,
            turn_index=len(conv.turns) - 1,
            backend_id=cfg.backend_id,
        )
        if was_degraded:
            side["memory_degraded"] = True  # anchor stays put, retried next turn
            return False
        if updated is not None:
            side["user_memory"] = {"text": updated.text, "turn": updated.last_updated_turn}
        side["memory_turns"] = len(partner_turns)
        return True
