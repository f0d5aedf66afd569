"""Corpus statistics: vocabulary sizes, message lengths, plot data.

Vocabulary is counted over normalized tokens. The default normalizer just
lowercases surface forms; a lemmatizer can be plugged in as an external
command speaking a line-in/line-out protocol (one message in, one line of
space-separated normalized tokens out). A broken plugin is an error, never a
silent fallback, since mixed normalizations would skew every comparison.
"""

from __future__ import annotations

import json
import re
import statistics
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .store import AGENT_SPEAKERS, SPEAKER_USER, SPEAKERS, Conversation

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class StatsError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    """Word tokens: letter/digit/underscore runs, elisions split off."""
    return _TOKEN_RE.findall(text)


class Normalizer(Protocol):
    name: str

    def tokens(self, text: str) -> list[str]:  # pragma: no cover
        ...


class SurfaceNormalizer:
    """Lowercased surface forms, no morphology."""

    name = "surface_lower"

    def tokens(self, text: str) -> list[str]:
        return [t.lower() for t in tokenize(text)]


class CommandNormalizer:
    """External lemmatizer plugin speaking line-in/line-out over stdio.

    The command is started once and kept alive; each call writes the message
    as a single line and reads back one line of space-separated tokens. Any
    protocol breach (process exit, empty stream) raises StatsError.
    """

    def __init__(self, command: Sequence[str], name: str | None = None):
        if not command:
            raise StatsError("lemmatizer command must be non-empty")
        self.command = tuple(command)
        self.name = name or Path(command[0]).name
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise StatsError(f"cannot start lemmatizer {self.command[0]!r}: {exc}") from exc
        return self._proc

    def tokens(self, text: str) -> list[str]:
        line = " ".join(text.split())
        with self._lock:
            proc = self._process()
            try:
                proc.stdin.write(line + "\n")
                proc.stdin.flush()
                reply = proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise StatsError(f"lemmatizer pipe broke: {exc}") from exc
            if reply == "":
                err = (proc.stderr.read() or "").strip() if proc.stderr else ""
                raise StatsError(
                    f"lemmatizer {self.command[0]!r} closed its output"
                    + (f": {err}" if err else "")
                )
        return reply.split()

    def close(self) -> None:
        with self._lock:
            if self._proc is not None and self._proc.poll() is None:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            self._proc = None

    def __enter__(self) -> "CommandNormalizer":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


DEFAULT_NORMALIZER = SurfaceNormalizer()


# --- selection ----------------------------------------------------------------


def resolve_speakers(selector) -> frozenset[str]:
    """Map a selector to concrete speaker names.

    ``None`` means every speaker; ``"agent"`` covers live and self-chat agent
    sides; ``"user"`` is the human side; an iterable is taken literally.
    """
    if selector is None:
        return frozenset(SPEAKERS)
    if selector == "agent":
        return frozenset(AGENT_SPEAKERS)
    if selector == "user":
        return frozenset({SPEAKER_USER})
    if isinstance(selector, str):
        if selector in SPEAKERS:
            return frozenset({selector})
        raise StatsError(f"unknown speaker selector {selector!r}")
    chosen = frozenset(selector)
    unknown = chosen - set(SPEAKERS)
    if unknown:
        raise StatsError(f"unknown speakers: {sorted(unknown)}")
    return chosen


def _iter_texts(conversations: Iterable[Conversation], speakers) -> Iterable[str]:
    chosen = resolve_speakers(speakers)
    for conv in conversations:
        if not conv.valid:
            continue
        for turn in conv.turns:
            if turn.speaker in chosen:
                yield turn.text


# --- vocabulary ----------------------------------------------------------------


def vocabulary(conversations, speakers=None, normalizer: Normalizer | None = None) -> frozenset[str]:
    norm = normalizer or DEFAULT_NORMALIZER
    seen: set[str] = set()
    for text in _iter_texts(conversations, speakers):
        seen.update(norm.tokens(text))
    return frozenset(seen)


def vocabulary_size(conversations, speakers=None, normalizer: Normalizer | None = None) -> int:
    return len(vocabulary(conversations, speakers, normalizer))


def vocabulary_gap(conversations, normalizer: Normalizer | None = None) -> int:
    """Absolute difference between agent-side and user-side vocabulary sizes."""
    agent = vocabulary_size(conversations, "agent", normalizer)
    user = vocabulary_size(conversations, "user", normalizer)
    return abs(agent - user)


# --- message lengths --------------------------------------------------------------


@dataclass(frozen=True)
class LengthStats:
    counts: tuple[int, ...]
    mean: float
    median: float
    q1: float
    q3: float

    @property
    def messages(self) -> int:
        return len(self.counts)


def words_per_message(conversations, speakers=None) -> LengthStats:
    counts = tuple(len(tokenize(t)) for t in _iter_texts(conversations, speakers))
    if not counts:
        return LengthStats((), 0.0, 0.0, 0.0, 0.0)
    if len(counts) == 1:
        v = float(counts[0])
        return LengthStats(counts, v, v, v, v)
    q1, median, q3 = statistics.quantiles(counts, n=4, method="inclusive")
    return LengthStats(counts, statistics.fmean(counts), median, q1, q3)


# --- per-setup report ---------------------------------------------------------------


@dataclass(frozen=True)
class StatsRow:
    setup_id: str
    task: str
    conversations: int
    agent_vocabulary: int
    user_vocabulary: int
    vocabulary_gap: int | None  # persona and chat setups
    conversation_vocabulary: int | None  # image discussion setups
    agent_words: LengthStats
    user_words: LengthStats


def stats_report(conversations, normalizer: Normalizer | None = None) -> list[StatsRow]:
    grouped: dict[str, list[Conversation]] = {}
    tasks: dict[str, str] = {}
    for conv in conversations:
        if not conv.valid:
            continue
        grouped.setdefault(conv.setup_id, []).append(conv)
        tasks[conv.setup_id] = conv.config.task
    rows: list[StatsRow] = []
    for setup_id in sorted(grouped):
        convs = grouped[setup_id]
        task = tasks[setup_id]
        agent_vocab = vocabulary_size(convs, "agent", normalizer)
        user_vocab = vocabulary_size(convs, "user", normalizer)
        rows.append(
            StatsRow(
                setup_id=setup_id,
                task=task,
                conversations=len(convs),
                agent_vocabulary=agent_vocab,
                user_vocabulary=user_vocab,
                vocabulary_gap=abs(agent_vocab - user_vocab) if task != "int" else None,
                conversation_vocabulary=(
                    vocabulary_size(convs, None, normalizer) if task == "int" else None
                ),
                agent_words=words_per_message(convs, "agent"),
                user_words=words_per_message(convs, "user"),
            )
        )
    return rows


def render_vocabulary_table(rows: Sequence[StatsRow]) -> str:
    """Vocabulary sizes per setup; the persona section reports the gap, the
    image discussion section the whole-conversation vocabulary."""
    lines: list[str] = []
    persona_rows = [r for r in rows if r.task != "int"]
    int_rows = [r for r in rows if r.task == "int"]
    if persona_rows:
        lines.append("Persona task vocabulary")
        lines.append(f"{'setup':<28}{'agent':>10}{'user':>10}{'gap':>10}")
        for r in persona_rows:
            lines.append(
                f"{r.setup_id:<28}{r.agent_vocabulary:>10}{r.user_vocabulary:>10}"
                f"{r.vocabulary_gap:>10}"
            )
    if int_rows:
        if lines:
            lines.append("")
        lines.append("Image discussion task vocabulary")
        lines.append(f"{'setup':<28}{'agent':>10}{'user':>10}{'conversation':>14}")
        for r in int_rows:
            lines.append(
                f"{r.setup_id:<28}{r.agent_vocabulary:>10}{r.user_vocabulary:>10}"
                f"{r.conversation_vocabulary:>14}"
            )
    return "\n".join(lines)


def render_length_table(rows: Sequence[StatsRow]) -> str:
    """Words-per-message spread (mean, median, quartiles) per setup and side."""
    lines = [
        f"{'setup':<28}{'side':<8}{'msgs':>7}{'mean':>9}{'median':>9}{'q1':>7}{'q3':>7}"
    ]
    for r in rows:
        for side, stats_ in (("agent", r.agent_words), ("user", r.user_words)):
            lines.append(
                f"{r.setup_id:<28}{side:<8}{stats_.messages:>7}"
                f"{stats_.mean:>9.1f}{stats_.median:>9.1f}{stats_.q1:>7.1f}{stats_.q3:>7.1f}"
            )
    return "\n".join(lines)


def write_plot_data(conversations, path: Path | str) -> dict:
    """Dump per-setup word-count distributions as JSON for external plotting."""
    grouped: dict[str, list[Conversation]] = {}
    for conv in conversations:
        if conv.valid:
            grouped.setdefault(conv.setup_id, []).append(conv)
    payload = {
        setup: {
            "agent_word_counts": list(words_per_message(convs, "agent").counts),
            "user_word_counts": list(words_per_message(convs, "user").counts),
        }
        for setup, convs in sorted(grouped.items())
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, ensure_ascii=False, indent=1), encoding="utf-8")
    return payload
