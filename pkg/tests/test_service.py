"""HTTP API behaviour: status codes, payload shapes, arena flow, reports."""

from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from rolechat.arena import BattleLedger, expected_score
from rolechat.config import AppConfig, ArenaSettings
from rolechat.engine import ChatEngine
from rolechat.gateway import BackendRegistry, FunctionBackend, ScriptBackend
from rolechat.selfchat import SelfChatJob, run_self_chats
from rolechat.service import create_app
from rolechat.store import ConversationStore, LogicalClock, SessionConfig


def looping_backend():
    lines = [
        "Bonjour, ravie de te parler aujourd'hui.",
        "Je vais très bien, merci de demander.",
        "J'adore discuter de tout et de rien.",
    ]
    state = {"n": 0}

    def fn(request):
        text = lines[state["n"] % len(lines)]
        state["n"] += 1
        return text + (request.stop_markers[0] if request.stop_markers else "")

    return FunctionBackend(fn)


def persona_payload(**overrides):
    payload = {
        "task": "persona",
        "variant": "shallow",
        "backend_id": "mock",
        "persona": ["Je suis boulangère.", "J'aime le vélo."],
    }
    payload.update(overrides)
    return payload


@pytest.fixture()
def client(tmp_path):
    store = ConversationStore(tmp_path / "corpus", clock=LogicalClock())
    registry = BackendRegistry()
    registry.register("mock", looping_backend())
    ledger = BattleLedger(tmp_path / "battles.jsonl")
    app = create_app(store, registry, ledger=ledger)
    with TestClient(app) as c:
        c.store = store
        c.ledger = ledger
        yield c


class TestSessions:
    def test_create_and_fetch(self, client):
        created = client.post("/sessions", json=persona_payload())
        assert created.status_code == 201
        sid = created.json()["session_id"]
        fetched = client.get(f"/sessions/{sid}")
        assert fetched.status_code == 200
        assert fetched.json()["config"]["variant"] == "shallow"
        assert fetched.json()["turns"] == []
        # create hands back the same record shape a fetch would
        assert created.json() == fetched.json()

    def test_invalid_config_gives_422_with_fields(self, client):
        response = client.post("/sessions", json=persona_payload(persona=[]))
        assert response.status_code == 422
        assert "persona" in response.json()["detail"]

    def test_unknown_backend_rejected(self, client):
        response = client.post("/sessions", json=persona_payload(backend_id="nope"))
        assert response.status_code == 422
        assert "backend_id" in response.json()["detail"]

    def test_malformed_json_gives_400(self, client):
        response = client.post(
            "/sessions", content=b"{not json", headers={"Content-Type": "application/json"}
        )
        assert response.status_code == 400

    def test_duplicate_session_id_gives_409(self, client):
        assert (
            client.post("/sessions", json=persona_payload(session_id="dup")).status_code == 201
        )
        assert (
            client.post("/sessions", json=persona_payload(session_id="dup")).status_code == 409
        )

    def test_missing_session_404(self, client):
        assert client.get("/sessions/ghost").status_code == 404


class TestMessages:
    def test_reply_carries_filter_flags(self, client):
        sid = client.post("/sessions", json=persona_payload()).json()["session_id"]
        response = client.post(f"/sessions/{sid}/messages", json={"text": "Salut !"})
        assert response.status_code == 200
        body = response.json()
        assert body["agent_reply"]
        assert body["filter_flags"] == {"detected": [], "fixed": []}
        assert body["attempts"] == 1
        assert body["finish_reason"] == "stop_marker"
        stored = client.get(f"/sessions/{sid}").json()
        assert [t["speaker"] for t in stored["turns"]] == ["user", "agent"]

    def test_unknown_session_404(self, client):
        assert (
            client.post("/sessions/ghost/messages", json={"text": "Hein ?"}).status_code == 404
        )

    def test_empty_text_422(self, client):
        sid = client.post("/sessions", json=persona_payload()).json()["session_id"]
        assert (
            client.post(f"/sessions/{sid}/messages", json={"text": "  "}).status_code == 422
        )
        assert client.post(f"/sessions/{sid}/messages", json={}).status_code == 422

    def test_backend_collapse_gives_502(self, tmp_path):
        store = ConversationStore(clock=LogicalClock())
        registry = BackendRegistry()
        registry.register("mock", ScriptBackend([{"error": "down", "retryable": False}]))
        app = create_app(store, registry, ledger=BattleLedger(tmp_path / "l.jsonl"))
        with TestClient(app) as client:
            sid = client.post("/sessions", json=persona_payload()).json()["session_id"]
            response = client.post(f"/sessions/{sid}/messages", json={"text": "Allo ?"})
            assert response.status_code == 502
            # the failed exchange must not leave a dangling user turn
            assert client.get(f"/sessions/{sid}").json()["turns"] == []


def seed_self_chats(store, registry, engine, setups=("alpha", "beta"), n=3, rounds=2):
    convs = []
    for label in setups:
        setup = SessionConfig(
            task="persona",
            variant="shallow",
            backend_id="mock",
            persona=("Je suis boulangère.",),
            setup_label=label,
        )
        job = SelfChatJob(setup, setup, n_rounds=rounds, n_conversations=n, seed=len(label))
        convs += run_self_chats(job, store, engine)
    return convs


@pytest.fixture()
def arena_client(tmp_path):
    store = ConversationStore(tmp_path / "corpus", clock=LogicalClock())
    registry = BackendRegistry()
    registry.register("mock", looping_backend())
    engine = ChatEngine(store, registry)
    seed_self_chats(store, registry, engine)
    ledger = BattleLedger(tmp_path / "battles.jsonl")
    settings = AppConfig(arena=ArenaSettings(battles_per_pair=5, seed=4))
    app = create_app(store, registry, engine=engine, ledger=ledger, settings=settings)
    with TestClient(app) as c:
        c.store = store
        c.ledger = ledger
        yield c


class TestArena:
    def test_next_pair_returns_two_conversations(self, arena_client):
        response = arena_client.get("/arena/next-pair", params={"annotator": "ann1"})
        assert response.status_code == 200
        assert response.headers["X-Annotator"] == "ann1"
        body = response.json()
        a, b = body["conversation_a"], body["conversation_b"]
        assert a["session_id"] != b["session_id"]
        assert a["state"]["setup_id"] != b["state"]["setup_id"]

    def test_annotator_param_required(self, arena_client):
        assert arena_client.get("/arena/next-pair").status_code == 422

    def test_empty_corpus_404(self, tmp_path):
        store = ConversationStore(clock=LogicalClock())
        registry = BackendRegistry()
        registry.register("mock", looping_backend())
        app = create_app(
            store, registry, ledger=BattleLedger(tmp_path / "battles.jsonl")
        )
        with TestClient(app) as client:
            assert (
                client.get("/arena/next-pair", params={"annotator": "x"}).status_code == 404
            )

    def test_battle_updates_rating_by_exactly_k_times_surprise(self, arena_client):
        pair = arena_client.get("/arena/next-pair", params={"annotator": "ann1"}).json()
        payload = {
            "conversation_a": pair["conversation_a"]["session_id"],
            "conversation_b": pair["conversation_b"]["session_id"],
            "verdicts": {"overall": "a_wins", "coherence": "tie"},
            "annotator_id": "ann1",
        }
        before = arena_client.get("/reports/elo", params={"format": "json"}).json()
        assert before["battles"] == 0
        created = arena_client.post("/arena/battles", json=payload)
        assert created.status_code == 201
        after = arena_client.get("/reports/elo", params={"format": "json"}).json()
        assert after["battles"] == 1
        setup_a = pair["conversation_a"]["state"]["setup_id"]
        setup_b = pair["conversation_b"]["state"]["setup_id"]
        swing = 32.0 * (1.0 - expected_score(1000.0, 1000.0))
        assert after["ratings"][setup_a]["overall"] == 1000.0 + swing
        assert after["ratings"][setup_b]["overall"] == 1000.0 - swing
        assert after["ratings"][setup_a]["coherence"] == 1000.0
        assert len(arena_client.ledger.load()) == 1

    def test_duplicate_battle_409(self, arena_client):
        pair = arena_client.get("/arena/next-pair", params={"annotator": "ann1"}).json()
        payload = {
            "conversation_a": pair["conversation_a"]["session_id"],
            "conversation_b": pair["conversation_b"]["session_id"],
            "verdicts": {"overall": "tie"},
            "annotator_id": "ann1",
        }
        assert arena_client.post("/arena/battles", json=payload).status_code == 201
        assert arena_client.post("/arena/battles", json=payload).status_code == 409
        flipped = dict(payload)
        flipped["conversation_a"] = payload["conversation_b"]
        flipped["conversation_b"] = payload["conversation_a"]
        assert arena_client.post("/arena/battles", json=flipped).status_code == 409

    def test_unknown_conversation_404(self, arena_client):
        payload = {
            "conversation_a": "ghost-1",
            "conversation_b": "ghost-2",
            "verdicts": {"overall": "tie"},
            "annotator_id": "ann1",
        }
        assert arena_client.post("/arena/battles", json=payload).status_code == 404

    def test_bad_verdict_422(self, arena_client):
        pair = arena_client.get("/arena/next-pair", params={"annotator": "ann1"}).json()
        payload = {
            "conversation_a": pair["conversation_a"]["session_id"],
            "conversation_b": pair["conversation_b"]["session_id"],
            "verdicts": {"overall": "smashing"},
            "annotator_id": "ann1",
        }
        assert arena_client.post("/arena/battles", json=payload).status_code == 422


class TestReports:
    def test_elo_text_and_json(self, arena_client):
        text = arena_client.get("/reports/elo")
        assert text.status_code == 200
        assert text.text.startswith("rank")
        body = arena_client.get("/reports/elo", params={"format": "json"}).json()
        assert body["criteria"][0] == "overall"

    def test_errors_report_covers_filtered_turns(self, arena_client):
        response = arena_client.get("/reports/errors")
        assert response.status_code == 200
        assert "Persona task" in response.text
        body = arena_client.get("/reports/errors", params={"format": "json"}).json()
        for row in body.values():
            assert row["task"] == "persona"
            assert set(row["detected"]) == {"regex", "language", "incomplete_empty"}

    def test_stats_report_shapes(self, arena_client):
        text = arena_client.get("/reports/stats")
        assert "Persona task vocabulary" in text.text
        rows = arena_client.get("/reports/stats", params={"format": "json"}).json()
        assert {r["setup_id"] for r in rows} == {"alpha", "beta"}
        for row in rows:
            assert row["vocabulary_gap"] == abs(
                row["agent_vocabulary"] - row["user_vocabulary"]
            )

    def test_scores_empty_then_populated(self, arena_client):
        empty = arena_client.get("/reports/scores", params={"format": "json"}).json()
        assert all(all(v is None for v in row["means"].values()) for row in empty)
        conv = arena_client.store.conversations()[0]
        from rolechat.arena import rate_conversation

        rate_conversation(conv, "coherence", [4, 4, 2])
        populated = arena_client.get("/reports/scores", params={"format": "json"}).json()
        target = [r for r in populated if r["setup_id"] == conv.setup_id][0]
        assert target["means"]["coherence"] == 4.0

    def test_errors_404_when_no_records(self, tmp_path):
        store = ConversationStore(clock=LogicalClock())
        registry = BackendRegistry()
        registry.register("mock", looping_backend())
        app = create_app(store, registry, ledger=BattleLedger(tmp_path / "l.jsonl"))
        with TestClient(app) as client:
            assert client.get("/reports/errors").status_code == 404

    def test_format_validation(self, arena_client):
        assert arena_client.get("/reports/elo", params={"format": "xml"}).status_code == 422
