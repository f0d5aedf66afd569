"""Command line front end.

One binary drives the whole pipeline with nothing but config files and a
corpus directory: ``chat`` for a line-oriented terminal session, ``selfchat``
to build agent-vs-agent corpora, ``arena replay`` and ``report`` to render
the evaluation tables, ``stats`` and ``filter-audit`` for corpus analysis,
and ``serve`` for the HTTP API. Exit codes are stable: 0 on success, 1 for
configuration or data problems, 2 when a generation backend gave up.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from dataclasses import replace
from pathlib import Path

from .arena import ArenaError, BattleLedger, EloTable, aggregate_scores, render_leaderboard, render_score_table
from .config import AppConfig, ConfigError, build_registry, load_config
from .engine import ChatEngine
from .filters import FilterError, error_report, render_error_table
from .gateway import BackendError, BackendRegistry, RetriesExhausted
from .selfchat import (
    ArenaPairingError,
    SelfChatError,
    SelfChatJob,
    load_personas,
    run_self_chats,
)
from .service import elo_payload, score_payload, stats_payload, stats_text
from .stats import CommandNormalizer, StatsError, stats_report, write_plot_data
from .store import (
    ConversationStore,
    DecodingParams,
    LogicalClock,
    SessionConfig,
    StoreError,
    TASK_VARIANTS,
    load_corpus,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BACKEND = 2

_DEFAULT_VARIANTS = {"persona": "shallow", "int": "int", "chat": "basis"}


class UsageError(Exception):
    """Bad flags or unusable inputs; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags, which this tool reserves for
    # backend failures; surface usage problems as config errors instead.
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _app_config(args: argparse.Namespace) -> AppConfig:
    path = getattr(args, "config", None)
    return load_config(path) if path else AppConfig()


def _corpus_dir(args: argparse.Namespace, config: AppConfig, required: bool = True) -> Path | None:
    raw = getattr(args, "corpus", None) or config.corpus_dir
    if raw is None:
        if required:
            raise UsageError("a corpus directory is required (--corpus or corpus_dir in the config)")
        return None
    return Path(raw)


def _ledger_path(args: argparse.Namespace, config: AppConfig) -> Path:
    if getattr(args, "ledger", None):
        return Path(args.ledger)
    raw = getattr(args, "corpus", None)
    if raw:
        return Path(raw) / "battles.jsonl"
    resolved = config.resolved_ledger_path()
    if resolved is not None:
        return resolved
    raise UsageError("a battle ledger is required (--ledger, --corpus or the config)")


def _pick_backend(requested: str | None, registry: BackendRegistry) -> str:
    ids = registry.backend_ids()
    if not ids:
        raise UsageError("no backends configured; define at least one in the config file")
    if requested is None:
        if len(ids) == 1:
            return ids[0]
        raise UsageError(f"--backend required; configured: {', '.join(ids)}")
    if requested not in ids:
        raise UsageError(f"unknown backend {requested!r}; configured: {', '.join(ids)}")
    return requested


def _setup_from_file(path: str, registry: BackendRegistry) -> SessionConfig:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not isinstance(record, dict):
        raise UsageError(f"{path}: setup file must hold a JSON object")
    # deferred validation: the self-chat runner checks the effective configs,
    # which may gain personas from the sampling pool
    config = SessionConfig.from_record(record, validate=False)
    if config.backend_id not in registry.backend_ids():
        raise UsageError(
            f"{path}: unknown backend {config.backend_id!r}; "
            f"configured: {', '.join(registry.backend_ids()) or 'none'}"
        )
    return config


def _persona_traits(args: argparse.Namespace) -> tuple[str, ...] | None:
    if args.task != "persona":
        return None
    if args.persona_file:
        lines = Path(args.persona_file).read_text(encoding="utf-8").splitlines()
        traits = tuple(line.strip() for line in lines if line.strip())
        if not traits:
            raise UsageError(f"{args.persona_file}: no persona traits found")
        return traits
    import random

    pool = load_personas()
    return tuple(random.Random(args.seed).choice(pool))


def cmd_chat(args: argparse.Namespace) -> int:
    config = _app_config(args)
    registry = build_registry(config)
    backend_id = _pick_backend(args.backend, registry)
    store = ConversationStore(_corpus_dir(args, config, required=False))
    store.load_dir()
    variant = args.variant or _DEFAULT_VARIANTS[args.task]
    session_config = SessionConfig(
        task=args.task,
        variant=variant,
        backend_id=backend_id,
        persona=_persona_traits(args),
        image_description=args.image,
        target_language=args.language,
        decoding=DecodingParams(args.temperature, args.top_p, args.max_new_tokens),
        setup_label=args.label,
    )
    session_config.validate()
    conv = store.create_session(session_config, session_id=args.session_id)
    engine = ChatEngine(store, registry, config.engine_config())
    err = sys.stderr
    print(f"session {conv.session_id} ({session_config.setup_id})", file=err)
    interactive = sys.stdin.isatty()
    try:
        while True:
            if interactive:
                err.write("you> ")
                err.flush()
            line = sys.stdin.readline()
            if not line:
                break
            text = line.strip()
            if not text:
                continue
            if text in ("/quit", "/q"):
                break
            reply = engine.respond(conv.session_id, text)
            print(f"agent> {reply.text}", flush=True)
            if reply.outcome.detected:
                detected = ",".join(sorted(reply.outcome.detected))
                fixed = ",".join(sorted(reply.outcome.fixed)) or "-"
                print(f"[filter detected={detected} fixed={fixed}]", file=err)
    except KeyboardInterrupt:
        err.write("\n")
    print(f"session {conv.session_id}: {len(conv.turns)} turns", file=err)
    return EXIT_OK


def cmd_selfchat(args: argparse.Namespace) -> int:
    config = _app_config(args)
    registry = build_registry(config)
    corpus = _corpus_dir(args, config, required=True)
    # logical timestamps keep reruns of the same job byte-identical on disk
    store = ConversationStore(corpus, clock=LogicalClock())
    setup_a = _setup_from_file(args.setup_a, registry)
    setup_b = _setup_from_file(args.setup_b, registry)
    pool = load_personas(args.personas) if args.personas else None
    job = SelfChatJob(
        setup_a,
        setup_b,
        n_rounds=args.rounds,
        n_conversations=args.count,
        seed=args.seed,
        opener_policy=args.opener_policy,
        opener_cue=args.opener_cue,
        persona_pool=pool,
    )
    engine = ChatEngine(store, registry, config.engine_config())
    progress = None
    if not args.quiet:
        def progress(conv):
            state = "ok" if conv.valid else f"invalid: {conv.invalid_reason}"
            print(f"{conv.session_id} turns={len(conv.turns)} {state}")
    conversations = run_self_chats(job, store, engine, progress=progress)
    valid = sum(1 for c in conversations if c.valid)
    print(f"wrote {len(conversations)} conversations ({valid} valid) to {corpus}")
    return EXIT_OK if valid == len(conversations) else EXIT_BACKEND


def cmd_arena_replay(args: argparse.Namespace) -> int:
    config = _app_config(args)
    ledger = BattleLedger(_ledger_path(args, config))
    table = EloTable.replay(ledger.load())
    print(render_leaderboard(table))
    print(f"\nbattles: {table.battles}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    conversations = load_corpus(args.corpus)
    if args.group != "all":
        conversations = [c for c in conversations if c.config.task == args.group]
    if not conversations:
        raise UsageError(f"no {args.group} conversations under {args.corpus}")
    normalizer = None
    if args.normalizer == "plugin":
        if not args.plugin_command:
            raise UsageError("--plugin-command is required with --normalizer plugin")
        normalizer = CommandNormalizer(shlex.split(args.plugin_command))
    try:
        rows = stats_report(conversations, normalizer)
    finally:
        if normalizer is not None:
            normalizer.close()
    if args.format == "json":
        print(json.dumps(stats_payload(rows), indent=2, sort_keys=True))
    else:
        print(stats_text(rows))
    if args.plot_data:
        write_plot_data(conversations, args.plot_data)
        print(f"plot data written to {args.plot_data}", file=sys.stderr)
    return EXIT_OK


def cmd_filter_audit(args: argparse.Namespace) -> int:
    report = error_report(load_corpus(args.corpus))
    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(render_error_table(report))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = _app_config(args)
    as_json = args.format == "json"
    if args.kind == "elo":
        table = EloTable.replay(BattleLedger(_ledger_path(args, config)).load())
        body = elo_payload(table) if as_json else render_leaderboard(table)
    else:
        conversations = load_corpus(_corpus_dir(args, config, required=True))
        if args.kind == "scores":
            rows = aggregate_scores(conversations)
            body = score_payload(rows) if as_json else render_score_table(rows)
        elif args.kind == "stats":
            rows = stats_report(conversations)
            body = stats_payload(rows) if as_json else stats_text(rows)
        else:
            report = error_report(conversations)
            body = report.to_dict() if as_json else render_error_table(report)
    print(json.dumps(body, indent=2, sort_keys=True) if as_json else body)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    config = _app_config(args)
    if args.host:
        config = replace(config, host=args.host)
    if args.port:
        config = replace(config, port=args.port)
    registry = build_registry(config)
    if not registry.backend_ids():
        raise UsageError("no backends configured; define at least one in the config file")
    store = ConversationStore(config.corpus_dir)
    loaded = store.load_dir()
    from .service import create_app

    app = create_app(store, registry, settings=config)
    print(
        f"listening on http://{config.host}:{config.port} "
        f"({loaded} conversations loaded)",
        file=sys.stderr,
    )
    import uvicorn

    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="rolechat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def common(p: _Parser, corpus_help: str = "conversation corpus directory"):
        p.add_argument("--config", help="application config file (JSON)")
        p.add_argument("--corpus", help=corpus_help)

    chat = sub.add_parser("chat", help="line-oriented terminal chat")
    common(chat)
    chat.add_argument("--backend", help="backend id from the config (optional if only one)")
    chat.add_argument("--task", choices=sorted(TASK_VARIANTS), default="persona")
    chat.add_argument("--variant", help="prompt variant (default depends on task)")
    chat.add_argument("--persona-file", help="persona traits, one per line")
    chat.add_argument("--image", help="image description for the image discussion task")
    chat.add_argument("--language", default="fr", help="expected reply language (default fr)")
    chat.add_argument("--session-id", help="explicit session id")
    chat.add_argument("--label", help="setup label for reports")
    chat.add_argument("--seed", type=int, default=0, help="persona sampling seed")
    chat.add_argument("--temperature", type=float, default=0.7)
    chat.add_argument("--top-p", type=float, default=0.9)
    chat.add_argument("--max-new-tokens", type=int, default=256)
    chat.set_defaults(handler=cmd_chat)

    selfchat = sub.add_parser(
        "selfchat", help="run agent-vs-agent conversations"
    )
    common(selfchat)
    selfchat.add_argument("--setup-a", required=True, help="session config JSON for side A")
    selfchat.add_argument("--setup-b", required=True, help="session config JSON for side B")
    selfchat.add_argument("--rounds", type=int, default=10, help="rounds per conversation")
    selfchat.add_argument("--count", type=int, default=1, help="conversations to run")
    selfchat.add_argument("--seed", type=int, default=0)
    selfchat.add_argument("--personas", help="persona pool file (blank-line separated blocks)")
    selfchat.add_argument(
        "--opener-policy", choices=("generated", "fixed"), default="generated"
    )
    selfchat.add_argument("--opener-cue", default="Bonjour !")
    selfchat.add_argument("--quiet", action="store_true", help="suppress per-conversation lines")
    selfchat.set_defaults(handler=cmd_selfchat)

    arena = sub.add_parser("arena", help="battle ledger operations")
    arena_sub = arena.add_subparsers(dest="arena_command", metavar="subcommand", parser_class=_Parser)
    replay = arena_sub.add_parser(
        "replay", help="replay the ledger and print the leaderboard"
    )
    common(replay, corpus_help="corpus directory holding battles.jsonl")
    replay.add_argument("--ledger", help="battle ledger file (JSONL)")
    replay.set_defaults(handler=cmd_arena_replay)

    stats = sub.add_parser("stats", help="vocabulary and length tables")
    stats.add_argument("--corpus", required=True, help="conversation corpus directory")
    stats.add_argument("--group", choices=("persona", "int", "chat", "all"), default="all")
    stats.add_argument("--normalizer", choices=("surface", "plugin"), default="surface")
    stats.add_argument("--plugin-command", help="lemmatizer command line (plugin normalizer)")
    stats.add_argument("--plot-data", help="write per-message word counts to this JSON file")
    stats.add_argument("--format", choices=("text", "json"), default="text")
    stats.set_defaults(handler=cmd_stats)

    audit = sub.add_parser(
        "filter-audit", help="filter error rates over a corpus"
    )
    audit.add_argument("--corpus", required=True, help="conversation corpus directory")
    audit.add_argument("--format", choices=("text", "json"), default="text")
    audit.set_defaults(handler=cmd_filter_audit)

    report = sub.add_parser("report", help="render evaluation reports")
    report.add_argument("kind", choices=("elo", "scores", "stats", "errors"))
    common(report)
    report.add_argument("--ledger", help="battle ledger file (elo report)")
    report.add_argument("--format", choices=("text", "json"), default="text")
    report.set_defaults(handler=cmd_report)

    serve = sub.add_parser("serve", help="run the HTTP API")
    serve.add_argument("--config", help="application config file (JSON)")
    serve.add_argument("--host", help="listen address override")
    serve.add_argument("--port", type=int, help="listen port override")
    serve.set_defaults(handler=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    handler = getattr(args, "handler", None)
    if handler is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        return handler(args)
    except (RetriesExhausted, BackendError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (
        UsageError,
        ConfigError,
        StoreError,
        FilterError,
        ArenaError,
        SelfChatError,
        ArenaPairingError,
        StatsError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
