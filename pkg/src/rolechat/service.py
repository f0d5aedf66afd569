"""HTTP API over sessions, arena battles and reports.

The service owns nothing: the store, backend registry, engine and battle
ledger are injected, so tests run the whole API against scripted backends in
memory. Error mapping is deliberate: malformed JSON bodies give 400, invalid
configs and inputs 422, unknown resources 404, duplicate battles 409 and a
backend that keeps failing turns into 502 for that message.
"""

from __future__ import annotations

import time
from pathlib import Path

from fastapi import Body, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse

from .arena import (
    BattleLedger,
    BattleResult,
    DuplicateBattleError,
    EloTable,
    aggregate_scores,
    render_leaderboard,
    render_score_table,
)
from .config import AppConfig
from .engine import ChatEngine
from .filters import FilterAccountingError, error_report, render_error_table
from .gateway import BackendRegistry, RetriesExhausted
from .selfchat import ArenaPairingError, build_arena_pairs
from .stats import render_length_table, render_vocabulary_table, stats_report
from .store import (
    ConversationStore,
    SessionConfig,
    SessionConfigError,
    SessionNotFound,
    CorpusFormatError,
    StoreError,
    TurnOrderError,
)


def elo_payload(table: EloTable) -> dict:
    """JSON shape shared by the HTTP report and the CLI report command."""
    return {
        "battles": table.battles,
        "criteria": list(table.criteria),
        "ratings": {
            setup: {c: table.rating(c, setup) for c in table.criteria}
            for setup in table.setups()
        },
        "ranking": [list(row) for row in table.rank()] if table.setups() else [],
    }


def score_payload(rows) -> list[dict]:
    return [
        {
            "setup_id": r.setup_id,
            "task": r.task,
            "conversations": r.conversations,
            "means": r.means,
            "rated": r.rated,
        }
        for r in rows
    ]


def stats_payload(rows) -> list[dict]:
    return [
        {
            "setup_id": r.setup_id,
            "task": r.task,
            "conversations": r.conversations,
            "agent_vocabulary": r.agent_vocabulary,
            "user_vocabulary": r.user_vocabulary,
            "vocabulary_gap": r.vocabulary_gap,
            "conversation_vocabulary": r.conversation_vocabulary,
            "agent_mean_words": r.agent_words.mean,
            "user_mean_words": r.user_words.mean,
        }
        for r in rows
    ]


def stats_text(rows) -> str:
    return render_vocabulary_table(rows) + "\n\n" + render_length_table(rows)


def create_app(
    store: ConversationStore,
    registry: BackendRegistry,
    *,
    engine: ChatEngine | None = None,
    ledger: BattleLedger | None = None,
    settings: AppConfig | None = None,
) -> FastAPI:
    settings = settings or AppConfig()
    engine = engine or ChatEngine(store, registry, settings.engine_config())
    if ledger is None:
        path = settings.resolved_ledger_path()
        if path is None and store.root is not None:
            path = store.root / "battles.jsonl"
        ledger = BattleLedger(path) if path is not None else None

    app = FastAPI(title="rolechat", version="0.1.0", docs_url=None, redoc_url=None)
    app.state.store = store
    app.state.registry = registry
    app.state.engine = engine
    app.state.ledger = ledger
    app.state.settings = settings
    app.state.pair_queue = []

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        # a body that is not even JSON is a malformed request, not a schema miss
        if any(e.get("type") == "json_invalid" for e in exc.errors()):
            return JSONResponse(status_code=400, content={"detail": "malformed JSON body"})
        return JSONResponse(status_code=422, content={"detail": exc.errors()})

    def fail(status: int, detail) -> JSONResponse:
        return JSONResponse(status_code=status, content={"detail": detail})

    # --- sessions --------------------------------------------------------

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict = Body(...)):
        session_id = payload.pop("session_id", None)
        if payload.get("backend_id") and payload["backend_id"] not in registry.backend_ids():
            return fail(422, {"backend_id": f"unknown backend {payload['backend_id']!r}"})
        try:
            config = SessionConfig.from_record(payload)
            conv = store.create_session(config, session_id)
        except SessionConfigError as exc:
            return fail(422, exc.fields)
        except CorpusFormatError as exc:
            return fail(422, str(exc))
        except StoreError as exc:
            return fail(409, str(exc))
        # full record, same shape as GET, so clients can adopt it directly
        return conv.to_record()

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            return store.get(session_id).to_record()
        except SessionNotFound:
            return fail(404, f"no session {session_id!r}")

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, payload: dict = Body(...)):
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            return fail(422, {"text": "a non-empty string is required"})
        try:
            reply = engine.respond(session_id, text)
        except SessionNotFound:
            return fail(404, f"no session {session_id!r}")
        except TurnOrderError as exc:
            return fail(422, str(exc))
        except RetriesExhausted as exc:
            return fail(502, str(exc))
        return {
            "agent_reply": reply.text,
            "filter_flags": {
                "detected": sorted(reply.outcome.detected),
                "fixed": sorted(reply.outcome.fixed),
            },
            "attempts": reply.outcome.attempts,
            "finish_reason": reply.finish_reason,
        }

    # --- arena -----------------------------------------------------------

    def next_unjudged_pair(annotator: str):
        judged = ledger.judged_pairs() if ledger is not None else set()

        def usable(pair) -> bool:
            key = (annotator, frozenset((pair[0].session_id, pair[1].session_id)))
            return key not in judged

        for attempt in range(2):
            while app.state.pair_queue:
                pair = app.state.pair_queue.pop(0)
                if usable(pair):
                    return pair
            if attempt == 0:
                arena = settings.arena
                app.state.pair_queue = build_arena_pairs(
                    store.conversations(),
                    arena.battles_per_pair,
                    min_battles=arena.min_battles,
                    max_battles=arena.max_battles,
                    seed=arena.seed,
                )
        return None

    @app.get("/arena/next-pair")
    def arena_next_pair(annotator: str = Query(min_length=1)):
        try:
            pair = next_unjudged_pair(annotator)
        except ArenaPairingError as exc:
            return fail(404, str(exc))
        if pair is None:
            return fail(404, "no unjudged pair available for this annotator")
        left, right = pair
        response = JSONResponse(
            {
                "conversation_a": left.to_record(),
                "conversation_b": right.to_record(),
            }
        )
        response.headers["X-Annotator"] = annotator
        return response

    @app.post("/arena/battles", status_code=201)
    def post_battle(payload: dict = Body(...)):
        if ledger is None:
            return fail(503, "no battle ledger configured")
        for key in ("conversation_a", "conversation_b", "verdicts", "annotator_id"):
            if not payload.get(key):
                return fail(422, {key: "required"})
        try:
            conv_a = store.get(payload["conversation_a"])
            conv_b = store.get(payload["conversation_b"])
        except SessionNotFound as exc:
            return fail(404, str(exc))
        try:
            battle = BattleResult(
                conversation_a=conv_a.session_id,
                conversation_b=conv_b.session_id,
                setup_a=conv_a.setup_id,
                setup_b=conv_b.setup_id,
                verdicts=dict(payload["verdicts"]),
                annotator_id=payload["annotator_id"],
                timestamp=float(payload.get("timestamp") or time.time()),
            )
        except ValueError as exc:
            return fail(422, str(exc))
        try:
            ledger.append(battle)
        except DuplicateBattleError as exc:
            return fail(409, str(exc))
        return {"recorded": battle.to_record()}

    # --- reports -----------------------------------------------------------

    def report_response(fmt: str, text_body: str, json_body):
        if fmt == "json":
            return JSONResponse(json_body)
        return PlainTextResponse(text_body)

    @app.get("/reports/elo")
    def report_elo(format: str = Query("text", pattern="^(text|json)$")):
        battles = ledger.load() if ledger is not None else []
        table = EloTable.replay(battles)
        return report_response(format, render_leaderboard(table), elo_payload(table))

    @app.get("/reports/scores")
    def report_scores(format: str = Query("text", pattern="^(text|json)$")):
        rows = aggregate_scores(store.conversations())
        return report_response(format, render_score_table(rows), score_payload(rows))

    @app.get("/reports/stats")
    def report_stats(format: str = Query("text", pattern="^(text|json)$")):
        rows = stats_report(store.conversations())
        return report_response(format, stats_text(rows), stats_payload(rows))

    @app.get("/reports/errors")
    def report_errors(format: str = Query("text", pattern="^(text|json)$")):
        try:
            report = error_report(store.conversations())
        except FilterAccountingError as exc:
            return fail(404, str(exc))
        return report_response(format, render_error_table(report), report.to_dict())

    # --- optional static UI ---------------------------------------------------

    if settings.ui_dir and Path(settings.ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=settings.ui_dir, html=True), name="ui")

    return app
