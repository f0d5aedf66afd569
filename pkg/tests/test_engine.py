"""Memory modules and the reply pipeline against deterministic mock backends."""

from __future__ import annotations

import pytest

from rolechat.engine import AgentReply, BudgetConfig, ChatEngine, EngineConfig
from rolechat.gateway import (
    BackendError,
    BackendRegistry,
    FunctionBackend,
    RetriesExhausted,
    ScriptBackend,
)
from rolechat.memory import EpisodeSummary, MemoryConfig, MemoryModules, UserMemory
from rolechat.prompting import (
    ConversationHistory,
    HistoryTurn,
    PromptInputs,
    estimate_tokens,
    format_history,
    render_prompt,
)
from rolechat.store import (
    ConversationStore,
    LogicalClock,
    SessionConfig,
    TurnOrderError,
)


def make_registry(backend, backend_id="mock") -> BackendRegistry:
    registry = BackendRegistry()
    registry.register(backend_id, backend)
    return registry


def fresh_store(tmp_path=None) -> ConversationStore:
    return ConversationStore(tmp_path, clock=LogicalClock())


PERSONA = ("Je suis infirmière de nuit.", "J'ai un chien qui s'appelle Biscuit.")


def persona_config(variant="shallow", backend_id="mock") -> SessionConfig:
    return SessionConfig(task="persona", variant=variant, backend_id=backend_id, persona=PERSONA)


def int_config(backend_id="mock") -> SessionConfig:
    return SessionConfig(
        task="int",
        variant="int",
        backend_id=backend_id,
        image_description="Un fruit pourri avec des yeux et des bras, dessiné en style cartoon.",
    )


SAMPLE_TURNS = [
    HistoryTurn("user", "Bonjour, je m'appelle Paul et j'ai un chien."),
    HistoryTurn("agent", "Enchanté Paul, comment s'appelle ton chien ?"),
    HistoryTurn("user", "Il s'appelle Max et il adore nager."),
    HistoryTurn("agent", "Un chien qui nage, c'est amusant !"),
]


class TestEpisodeSummary:
    def test_first_batch_covers_removed_range(self):
        registry = make_registry(ScriptBackend(["Paul a présenté son chien Max."]))
        modules = MemoryModules(registry)
        summary, degraded = modules.summarize_removed(SAMPLE_TURNS, None, 0, "mock")
        assert not degraded
        assert summary.text == "Paul a présenté son chien Max."
        assert summary.covers_turn_range == (0, 3)

    def test_prior_extends_coverage_from_its_start(self):
        registry = make_registry(ScriptBackend(["Paul a un chien qui nage."]))
        modules = MemoryModules(registry)
        prior = EpisodeSummary("Début de la discussion.", (0, 3))
        summary, degraded = modules.summarize_removed(SAMPLE_TURNS[:2], prior, 4, "mock")
        assert not degraded
        assert summary.covers_turn_range == (0, 5)

    def test_sentence_cap_applies(self):
        long = "Une. Deux. Trois. Quatre. Cinq."
        registry = make_registry(ScriptBackend([long]))
        modules = MemoryModules(registry)
        summary, _ = modules.summarize_removed(SAMPLE_TURNS, None, 0, "mock")
        assert summary.text == "Une. Deux. Trois."

    def test_backend_failure_keeps_prior_and_degrades(self):
        registry = make_registry(ScriptBackend([{"error": "down", "retryable": False}]))
        modules = MemoryModules(registry)
        prior = EpisodeSummary("Acquis.", (0, 1))
        summary, degraded = modules.summarize_removed(SAMPLE_TURNS, prior, 2, "mock")
        assert degraded
        assert summary is prior

    def test_empty_completion_degrades(self):
        registry = make_registry(ScriptBackend([{"text": "   "}]))
        modules = MemoryModules(registry)
        summary, degraded = modules.summarize_removed(SAMPLE_TURNS, None, 0, "mock")
        assert degraded
        assert summary is None

    def test_requires_removed_turns(self):
        modules = MemoryModules(make_registry(ScriptBackend([])))
        with pytest.raises(ValueError):
            modules.summarize_removed([], None, 0, "mock")

    def test_prompt_carries_prior_and_excerpt(self):
        prompts: list[str] = []

        def fn(request):
            prompts.append(request.prompt)
            return "Bref résumé."

        modules = MemoryModules(make_registry(FunctionBackend(fn)))
        prior = EpisodeSummary("Ils ont parlé du chien.", (0, 1))
        modules.summarize_removed(SAMPLE_TURNS[2:], prior, 2, "mock")
        prompt = prompts[0]
        assert "Summary of the earlier part of the conversation: Ils ont parlé du chien." in prompt
        assert "user: Il s'appelle Max et il adore nager." in prompt
        assert prompt.endswith("Summary:")


class TestUserMemory:
    def test_lines_collapse_without_trailing_period(self):
        registry = make_registry(ScriptBackend([{"text": "Paul a un chien.\nIl aime le cinéma."}]))
        modules = MemoryModules(registry)
        memory, degraded = modules.update_user_memory(["je m'appelle Paul"], None, 5, "mock")
        assert not degraded
        assert memory.text == "Paul a un chien; Il aime le cinéma"
        assert memory.last_updated_turn == 5

    def test_backend_failure_keeps_prior(self):
        registry = make_registry(ScriptBackend([{"error": "down", "retryable": False}]))
        modules = MemoryModules(registry)
        prior = UserMemory("Paul", 1)
        memory, degraded = modules.update_user_memory(["bonjour"], prior, 3, "mock")
        assert degraded
        assert memory is prior

    def test_requires_user_turns(self):
        modules = MemoryModules(make_registry(ScriptBackend([])))
        with pytest.raises(ValueError):
            modules.update_user_memory([], None, 0, "mock")

    def test_cadence_validation(self):
        with pytest.raises(ValueError):
            MemoryConfig(cadence=0)


class TestRespond:
    def test_appends_both_turns_with_filter_record(self, tmp_path):
        store = fresh_store(tmp_path)
        engine = ChatEngine(store, make_registry(ScriptBackend(["Bonjour, je vais très bien !"])))
        conv = store.create_session(persona_config())
        reply = engine.respond(conv.session_id, "Salut, comment ça va ?")
        assert isinstance(reply, AgentReply)
        assert reply.text == "Bonjour, je vais très bien !"
        assert reply.finish_reason == "stop_marker"
        assert [t.speaker for t in conv.turns] == ["user", "agent"]
        assert conv.turns[0].filter is None
        assert conv.turns[1].filter.attempts == 1
        assert conv.turns[1].filter.detected == ()

    def test_rejects_empty_message(self):
        store = fresh_store()
        engine = ChatEngine(store, make_registry(ScriptBackend([])))
        conv = store.create_session(persona_config())
        with pytest.raises(TurnOrderError):
            engine.respond(conv.session_id, "   ")
        assert conv.turns == []

    def test_chat_task_without_persona(self):
        store = fresh_store()
        engine = ChatEngine(store, make_registry(ScriptBackend(["Avec plaisir, on y va."])))
        conv = store.create_session(SessionConfig(task="chat", variant="basis", backend_id="mock"))
        reply = engine.respond(conv.session_id, "On commence ?")
        assert reply.text == "Avec plaisir, on y va."

    def test_generation_failure_leaves_session_clean(self):
        store = fresh_store()
        engine = ChatEngine(
            store, make_registry(ScriptBackend([{"error": "boom", "retryable": False}]))
        )
        conv = store.create_session(persona_config())
        with pytest.raises(RetriesExhausted):
            engine.respond(conv.session_id, "Bonjour !")
        assert conv.turns == []

    def test_empty_response_regenerated(self):
        store = fresh_store()
        engine = ChatEngine(store, make_registry(ScriptBackend(["", "Bonjour à toi !"])))
        conv = store.create_session(persona_config())
        reply = engine.respond(conv.session_id, "Salut !")
        assert reply.text == "Bonjour à toi !"
        assert reply.outcome.detected == frozenset({"empty_response"})
        assert reply.outcome.fixed == frozenset({"empty_response"})
        assert reply.outcome.attempts == 2

    def test_first_message_language_regen(self):
        script = ScriptBackend(
            [
                "Hello, how are you doing today my friend? The weather is nice and I am happy.",
                "Bonjour, comment vas-tu ce matin ?",
            ]
        )
        store = fresh_store()
        engine = ChatEngine(store, make_registry(script))
        conv = store.create_session(persona_config())
        reply = engine.respond(conv.session_id, "Salut !")
        assert reply.text == "Bonjour, comment vas-tu ce matin ?"
        assert reply.outcome.detected == frozenset({"wrong_language_first_msg"})
        assert reply.outcome.fixed == frozenset({"wrong_language_first_msg"})


class TestIntPipeline:
    def test_empty_reply_regenerates_with_instruction(self):
        prompts: list[str] = []

        def fn(request):
            prompts.append(request.prompt)
            if "Your response must be a sentence containing a few words." in request.prompt:
                return "C'est une pomme pourrie avec des yeux."
            return ""

        store = fresh_store()
        engine = ChatEngine(store, make_registry(FunctionBackend(fn)))
        conv = store.create_session(int_config())
        reply = engine.respond(conv.session_id, "Que vois-tu sur cette image ?")
        assert reply.text == "C'est une pomme pourrie avec des yeux."
        assert reply.outcome.detected == frozenset({"int_empty"})
        assert reply.outcome.fixed == frozenset({"int_empty"})
        assert reply.outcome.attempts == 2
        # the retry instruction is rendered after the latest user message
        retry = prompts[-1]
        user_at = retry.rfind("USER: Que vois-tu sur cette image ?")
        instr_at = retry.rfind("Your response must be a sentence containing a few words.")
        assert 0 <= user_at < instr_at

    def test_too_long_keeps_original_when_retry_is_invalid(self):
        wordy = "Une phrase. Deux phrases. Trois phrases. Quatre phrases."

        def fn(request):
            if "Your response must be one sentence." in request.prompt:
                return "Encore. Beaucoup. Trop. De. Phrases."
            return wordy

        store = fresh_store()
        engine = ChatEngine(store, make_registry(FunctionBackend(fn)))
        conv = store.create_session(int_config())
        reply = engine.respond(conv.session_id, "Décris l'image.")
        assert reply.text == wordy
        assert reply.outcome.detected == frozenset({"int_too_long"})
        assert reply.outcome.fixed == frozenset()
        assert reply.outcome.attempts == 2


MSG = "Parle-moi encore de ta journée de travail à l'hôpital s'il te plaît."
REPLY = "Ma journée était longue mais intéressante, merci de demander."
SUMMARY_LINE = "Ils ont parlé du travail de nuit et du chien Biscuit."
MEMORY_LINE = "L'utilisateur pose beaucoup de questions sur le travail."


def advanced_backend(summaries: list[str] | None = None):
    def fn(request):
        if request.prompt.endswith("Summary:"):
            if summaries is not None:
                summaries.append(request.prompt)
            return SUMMARY_LINE
        if request.prompt.endswith("Known about the user:"):
            return MEMORY_LINE
        return REPLY + (request.stop_markers[0] if request.stop_markers else "")

    return FunctionBackend(fn)


def tight_budget() -> BudgetConfig:
    base_inputs = PromptInputs(
        user_message=MSG,
        persona=PERSONA,
        user_memory=MEMORY_LINE[:-1],
        summary=SUMMARY_LINE,
    )
    base = render_prompt("persona_advanced", base_inputs).token_estimate
    floor = ConversationHistory(
        [HistoryTurn("user", MSG), HistoryTurn("agent", REPLY)] * 2
    )
    floor_cost = estimate_tokens(format_history("persona_advanced", floor))
    return BudgetConfig(
        context_window=base + floor_cost + 40 + 64,
        generation_reserve=64,
        min_keep_pairs=2,
    )


class TestBudgetAndMemory:
    def test_truncation_summarizes_exactly_the_removed_turns(self, tmp_path):
        summaries: list[str] = []
        budget = tight_budget()
        store = fresh_store(tmp_path)
        engine = ChatEngine(
            store,
            make_registry(advanced_backend(summaries)),
            EngineConfig(budget=budget),
        )
        conv = store.create_session(persona_config(variant="advanced"))
        replies = [engine.respond(conv.session_id, MSG) for _ in range(12)]

        for reply in replies:
            assert reply.prompt.token_estimate <= budget.prompt_budget

        side = conv.state["sides"]["agent"]
        removed = side["removed_count"]
        assert removed >= 2 and removed % 2 == 0
        assert side["summary"]["text"] == SUMMARY_LINE
        assert side["summary"]["covers"] == [0, removed - 1]
        assert "memory_degraded" not in side

        # every removed turn was handed to the summarizer once, oldest first
        excerpts = []
        for prompt in summaries:
            body = prompt.split("Excerpt:\n", 1)[1].rsplit("\n\nSummary:", 1)[0]
            excerpts.extend(body.splitlines())
        expected = [
            f"{'user' if i % 2 == 0 else 'agent'}: {conv.turns[i].text}"
            for i in range(removed)
        ]
        assert excerpts == expected

    def test_memory_cadence_updates_after_four_user_turns(self):
        store = fresh_store()
        engine = ChatEngine(store, make_registry(advanced_backend()))
        conv = store.create_session(persona_config(variant="advanced"))
        for i in range(3):
            engine.respond(conv.session_id, f"Question numéro {i} sur ta vie.")
        assert "user_memory" not in conv.state.get("sides", {}).get("agent", {})
        engine.respond(conv.session_id, "Question numéro 3 sur ta vie.")
        side = conv.state["sides"]["agent"]
        assert side["user_memory"]["text"] == MEMORY_LINE[:-1]
        assert side["user_memory"]["turn"] == 7
        assert side["memory_turns"] == 4

    def test_shallow_template_skips_memory_calls(self):
        calls: list[str] = []

        def fn(request):
            calls.append(request.prompt)
            return "Très bien merci !"

        store = fresh_store()
        engine = ChatEngine(store, make_registry(FunctionBackend(fn)))
        conv = store.create_session(persona_config(variant="shallow"))
        for i in range(5):
            engine.respond(conv.session_id, f"Message {i} pour la discussion.")
        assert all(not p.endswith("Known about the user:") for p in calls)
        assert all(not p.endswith("Summary:") for p in calls)

    def test_state_survives_disk_roundtrip(self, tmp_path):
        budget = tight_budget()
        store = fresh_store(tmp_path)
        engine = ChatEngine(store, make_registry(advanced_backend()), EngineConfig(budget=budget))
        conv = store.create_session(persona_config(variant="advanced"))
        for _ in range(10):
            engine.respond(conv.session_id, MSG)
        side = conv.state["sides"]["agent"]
        assert side["removed_count"] > 0

        reloaded = ConversationStore(tmp_path)
        assert reloaded.load_dir() == 1
        twin = reloaded.get(conv.session_id)
        assert twin.state["sides"]["agent"] == side
        assert len(twin.turns) == len(conv.turns)

    def test_degraded_memory_keeps_anchor_for_retry(self):
        failures = {"n": 0}

        def fn(request):
            if request.prompt.endswith("Known about the user:"):
                failures["n"] += 1
                raise BackendError("memory down", retryable=False)
            return "Réponse tout à fait normale ici."

        store = fresh_store()
        engine = ChatEngine(store, make_registry(FunctionBackend(fn)))
        conv = store.create_session(persona_config(variant="advanced"))
        for i in range(5):
            engine.respond(conv.session_id, f"Message {i} qui donne des détails.")
        side = conv.state["sides"]["agent"]
        assert side.get("memory_degraded") is True
        assert "user_memory" not in side
        assert side.get("memory_turns", 0) == 0
        assert failures["n"] == 2  # turns 4 and 5, anchor never advanced
