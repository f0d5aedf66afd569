"""Conversation sessions, turn records and corpus persistence.

A conversation is an alternating sequence of speaker turns plus the session
configuration that produced it. Sessions live in memory and, when the store
has a root directory, are mirrored to ``<root>/<task>/<session_id>.json``.
Corpora can be exported to and imported from JSONL, one conversation per line.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

SPEAKER_USER = "user"
SPEAKER_AGENT = "agent"
SPEAKER_AGENT_A = "agent_a"
SPEAKER_AGENT_B = "agent_b"
SPEAKERS = (SPEAKER_USER, SPEAKER_AGENT, SPEAKER_AGENT_A, SPEAKER_AGENT_B)

AGENT_SPEAKERS = (SPEAKER_AGENT, SPEAKER_AGENT_A, SPEAKER_AGENT_B)

# each speaker only ever alternates with its partner
_PARTNER = {
    SPEAKER_USER: SPEAKER_AGENT,
    SPEAKER_AGENT: SPEAKER_USER,
    SPEAKER_AGENT_A: SPEAKER_AGENT_B,
    SPEAKER_AGENT_B: SPEAKER_AGENT_A,
}

TASKS = ("persona", "int", "chat")
VARIANT_TEMPLATES = {
    "basis": "vicuna_basis",
    "fsb": "fsb",
    "shallow": "persona_shallow",
    "advanced": "persona_advanced",
    "int": "int",
}
TASK_VARIANTS = {
    "persona": ("shallow", "advanced", "fsb"),
    "int": ("int",),
    "chat": ("basis",),
}

_RECORD_FORMAT = 1


class StoreError(Exception):
    pass


class SessionNotFound(StoreError):
    def __init__(self, session_id: str):
        super().__init__(f"no session {session_id!r}")
        self.session_id = session_id


class TurnOrderError(StoreError):
    pass


class CorpusFormatError(StoreError):
    def __init__(self, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line


class SessionConfigError(StoreError):
    """Invalid session configuration; ``fields`` names the offending keys."""

    def __init__(self, problems: dict[str, str]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in sorted(problems.items())))
        self.fields = problems


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.7
    top_p: float = 0.9
    max_new_tokens: int = 256

    def problems(self) -> dict[str, str]:
        out: dict[str, str] = {}
        if not 0.0 <= self.temperature <= 2.0:
            out["temperature"] = "must be in [0, 2]"
        if not 0.0 < self.top_p <= 1.0:
            out["top_p"] = "must be in (0, 1]"
        if self.max_new_tokens < 1:
            out["max_new_tokens"] = "must be >= 1"
        return out


@dataclass(frozen=True)
class SessionConfig:
    task: str
    variant: str
    backend_id: str
    persona: tuple[str, ...] | None = None
    image_description: str | None = None
    target_language: str = "fr"
    decoding: DecodingParams = field(default_factory=DecodingParams)
    setup_label: str | None = None

    def validate(self) -> None:
        problems: dict[str, str] = {}
        if self.task not in TASKS:
            problems["task"] = f"must be one of {', '.join(TASKS)}"
        elif self.variant not in TASK_VARIANTS[self.task]:
            problems["variant"] = (
                f"task {self.task!r} allows: {', '.join(TASK_VARIANTS[self.task])}"
            )
        if not self.backend_id:
            problems["backend_id"] = "required"
        needs_persona = self.task == "persona"
        if needs_persona and not (self.persona and any(t.strip() for t in self.persona)):
            problems["persona"] = "persona traits required for the persona task"
        if self.task != "persona" and self.persona:
            problems["persona"] = "persona only applies to the persona task"
        if self.task == "int" and not (self.image_description or "").strip():
            problems["image_description"] = "required for the image discussion task"
        if self.task != "int" and self.image_description:
            problems["image_description"] = "only applies to the image discussion task"
        if not self.target_language:
            problems["target_language"] = "required"
        problems.update(self.decoding.problems())
        if problems:
            raise SessionConfigError(problems)

    @property
    def template_id(self) -> str:
        return VARIANT_TEMPLATES[self.variant]

    @property
    def setup_id(self) -> str:
        return self.setup_label or f"{self.backend_id}+{self.variant}"

    def to_record(self) -> dict:
        return {
            "task": self.task,
            "variant": self.variant,
            "backend_id": self.backend_id,
            "persona": list(self.persona) if self.persona else None,
            "image_description": self.image_description,
            "target_language": self.target_language,
            "decoding": {
                "temperature": self.decoding.temperature,
                "top_p": self.decoding.top_p,
                "max_new_tokens": self.decoding.max_new_tokens,
            },
            "setup_label": self.setup_label,
        }

    @classmethod
    def from_record(cls, rec: dict, validate: bool = True) -> "SessionConfig":
        try:
            decoding = DecodingParams(**rec.get("decoding") or {})
            persona = rec.get("persona")
            config = cls(
                task=rec["task"],
                variant=rec["variant"],
                backend_id=rec["backend_id"],
                persona=tuple(persona) if persona else None,
                image_description=rec.get("image_description"),
                target_language=rec.get("target_language", "fr"),
                decoding=decoding,
                setup_label=rec.get("setup_label"),
            )
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"bad session config: {exc}") from None
        # validate=False defers semantic checks for setups completed later
        # (e.g. personas drawn from a pool); shape errors still raise above
        if validate:
            config.validate()
        return config


@dataclass(frozen=True)
class FilterRecord:
    detected: tuple[str, ...] = ()
    fixed: tuple[str, ...] = ()
    attempts: int = 1

    def __post_init__(self) -> None:
        if not set(self.fixed) <= set(self.detected):
            raise ValueError("fixed rules must be a subset of detected rules")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")

    def to_record(self) -> dict:
        return {
            "detected": list(self.detected),
            "fixed": list(self.fixed),
            "attempts": self.attempts,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FilterRecord":
        return cls(
            detected=tuple(rec.get("detected", ())),
            fixed=tuple(rec.get("fixed", ())),
            attempts=int(rec.get("attempts", 1)),
        )


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    timestamp: float
    filter: FilterRecord | None = None

    def to_record(self) -> dict:
        rec = {"speaker": self.speaker, "text": self.text, "timestamp": self.timestamp}
        if self.filter is not None:
            rec["filter"] = self.filter.to_record()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Turn":
        return cls(
            speaker=rec["speaker"],
            text=rec["text"],
            timestamp=float(rec.get("timestamp", 0.0)),
            filter=FilterRecord.from_record(rec["filter"]) if rec.get("filter") else None,
        )


@dataclass
class Conversation:
    session_id: str
    config: SessionConfig
    turns: list[Turn] = field(default_factory=list)
    annotations: dict[str, dict] = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    valid: bool = True
    invalid_reason: str | None = None

    @property
    def setup_id(self) -> str:
        return self.state.get("setup_id") or self.config.setup_id

    def last_speaker(self) -> str | None:
        return self.turns[-1].speaker if self.turns else None

    def agent_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker in AGENT_SPEAKERS]

    def to_record(self) -> dict:
        return {
            "format": _RECORD_FORMAT,
            "session_id": self.session_id,
            "config": self.config.to_record(),
            "turns": [t.to_record() for t in self.turns],
            "annotations": self.annotations,
            "state": self.state,
            "valid": self.valid,
            "invalid_reason": self.invalid_reason,
        }

    @classmethod
    def from_record(cls, rec: dict, line: int | None = None) -> "Conversation":
        try:
            config = SessionConfig.from_record(rec["config"])
            conv = cls(
                session_id=rec["session_id"],
                config=config,
                annotations=dict(rec.get("annotations", {})),
                state=dict(rec.get("state", {})),
                valid=bool(rec.get("valid", True)),
                invalid_reason=rec.get("invalid_reason"),
            )
        except (KeyError, TypeError, SessionConfigError) as exc:
            raise CorpusFormatError(f"bad conversation record: {exc}", line) from None
        prev: str | None = None
        for i, turn_rec in enumerate(rec.get("turns", ())):
            try:
                turn = Turn.from_record(turn_rec)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"bad turn {i}: {exc}", line) from None
            _check_turn(prev, turn.speaker, turn.text, where=f"turn {i}", line=line)
            conv.turns.append(turn)
            prev = turn.speaker
        return conv


def _check_turn(
    prev: str | None, speaker: str, text: str, where: str = "turn", line: int | None = None
) -> None:
    if speaker not in SPEAKERS:
        raise CorpusFormatError(f"{where}: unknown speaker {speaker!r}", line)
    if not text.strip():
        raise CorpusFormatError(f"{where}: empty text", line)
    if prev is not None and speaker != _PARTNER[prev]:
        raise CorpusFormatError(
            f"{where}: speaker {speaker!r} breaks alternation after {prev!r}", line
        )


class LogicalClock:
    """Deterministic clock for reproducible corpora: 1.0, 2.0, 3.0, ..."""

    def __init__(self, start: float = 0.0, step: float = 1.0):
        self._now = start
        self._step = step

    def __call__(self) -> float:
        self._now += self._step
        return self._now


class ConversationStore:
    """In-memory session registry with optional directory persistence."""

    def __init__(self, root: Path | str | None = None, clock: Callable[[], float] | None = None):
        self.root = Path(root) if root is not None else None
        self._clock = clock or time.time
        self._sessions: dict[str, Conversation] = {}
        self._last_ts = 0.0
        self._lock = threading.Lock()

    def _next_timestamp(self) -> float:
        ts = self._clock()
        if ts <= self._last_ts:
            ts = self._last_ts + 1e-6
        self._last_ts = ts
        return ts

    def create_session(self, config: SessionConfig, session_id: str | None = None) -> Conversation:
        config.validate()
        with self._lock:
            sid = session_id or f"s{uuid.uuid4().hex[:12]}"
            if sid in self._sessions:
                raise StoreError(f"session {sid!r} already exists")
            conv = Conversation(session_id=sid, config=config)
            self._sessions[sid] = conv
        self.save(conv)
        return conv

    def adopt(self, conv: Conversation) -> None:
        """Register an externally built conversation (imports, self-chat jobs)."""
        with self._lock:
            if conv.session_id in self._sessions:
                raise StoreError(f"session {conv.session_id!r} already exists")
            self._sessions[conv.session_id] = conv
        self.save(conv)

    def get(self, session_id: str) -> Conversation:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise SessionNotFound(session_id) from None

    def conversations(self) -> list[Conversation]:
        return list(self._sessions.values())

    def append_turn(
        self,
        session_id: str,
        speaker: str,
        text: str,
        filter_record: FilterRecord | None = None,
    ) -> Turn:
        conv = self.get(session_id)
        with self._lock:
            if speaker not in SPEAKERS:
                raise TurnOrderError(f"unknown speaker {speaker!r}")
            if not text.strip():
                raise TurnOrderError("turn text must be non-empty")
            prev = conv.last_speaker()
            if prev is not None and speaker != _PARTNER[prev]:
                raise TurnOrderError(
                    f"speaker {speaker!r} breaks alternation after {prev!r}"
                )
            turn = Turn(speaker, text, self._next_timestamp(), filter_record)
            conv.turns.append(turn)
        self.save(conv)
        return turn

    def save(self, conv: Conversation) -> None:
        if self.root is None:
            return
        path = self.root / conv.config.task / f"{conv.session_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(conv.to_record(), ensure_ascii=False, indent=1), encoding="utf-8"
        )

    def load_dir(self, path: Path | str | None = None) -> int:
        """Load every ``*.json`` conversation under ``path`` (default: store root)."""
        base = Path(path) if path is not None else self.root
        if base is None or not base.exists():
            return 0
        loaded = 0
        for file in sorted(base.rglob("*.json")):
            rec = json.loads(file.read_text(encoding="utf-8"))
            conv = Conversation.from_record(rec)
            with self._lock:
                self._sessions[conv.session_id] = conv
            loaded += 1
        return loaded


def export_jsonl(conversations: Iterable[Conversation], path: Path | str) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for conv in conversations:
            fh.write(json.dumps(conv.to_record(), ensure_ascii=False) + "\n")
            n += 1
    return n


def import_jsonl(
    path: Path | str, strict: bool = False
) -> tuple[list[Conversation], list[tuple[int, str]]]:
    """Read a JSONL corpus. Lenient mode returns (conversations, per-line errors)."""
    conversations: list[Conversation] = []
    errors: list[tuple[int, str]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                if strict:
                    raise CorpusFormatError(f"invalid JSON: {exc}", line_no) from None
                errors.append((line_no, f"invalid JSON: {exc}"))
                continue
            try:
                conversations.append(Conversation.from_record(rec, line_no))
            except CorpusFormatError as exc:
                if strict:
                    raise
                errors.append((line_no, str(exc)))
    return conversations, errors


def load_corpus(path: Path | str) -> list[Conversation]:
    """Load a corpus from a JSONL file or a session directory."""
    p = Path(path)
    if p.is_dir():
        conversations = []
        for file in sorted(p.rglob("*.json")):
            rec = json.loads(file.read_text(encoding="utf-8"))
            conversations.append(Conversation.from_record(rec))
        return conversations
    conversations, errors = import_jsonl(p)
    if errors and not conversations:
        raise CorpusFormatError(f"no readable conversations in {p}: {errors[0][1]}", errors[0][0])
    return conversations
