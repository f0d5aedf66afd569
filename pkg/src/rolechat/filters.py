"""Rule-based filtering of generated agent messages.

Two pipelines share the machinery: the persona pipeline repairs character
breaks (assistant self-claims, translated paratext, wrong language on the
first message, unfinished sentences), the image-discussion pipeline enforces
brevity (no empty replies, at most three sentences) through instruction-
augmented regeneration. Every outcome reports which rules fired and which
were repaired, so corpora keep an auditable error-rate trail.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable

from .store import FilterRecord

# rule identifiers (persona pipeline)
PERSONA_CLAIM = "persona_claim"
PARATEXT_TRANSLATION = "paratext_translation"
WRONG_LANGUAGE = "wrong_language_first_msg"
INCOMPLETE_SENTENCE = "incomplete_sentence"
EMPTY_RESPONSE = "empty_response"
# rule identifiers (image-discussion pipeline)
INT_EMPTY = "int_empty"
INT_TOO_LONG = "int_too_long"

PERSONA_RULES = (
    PERSONA_CLAIM,
    PARATEXT_TRANSLATION,
    WRONG_LANGUAGE,
    INCOMPLETE_SENTENCE,
    EMPTY_RESPONSE,
)
INT_RULES = (INT_EMPTY, INT_TOO_LONG)

# finish reasons, mirroring the gateway constants without importing it
_FINISH_STOP = "stop_marker"
_FINISH_LENGTH = "length_limit"

_TERMINALS = ".!?…"
_CLOSERS = "\"'»”)]"

DEFAULT_CLAIM_PATTERNS = (
    r"^en tant qu(?:e\s+|')\s*(?:assistante?|ia\b|intelligence artificielle|"
    r"personnage fictif|mod[eè]le de langage|chatbot|robot)[^,.:!?]*[,:]\s*",
    r"^je suis (?:une? )?(?:ia\b|intelligence artificielle|assistante? virtuel(?:le)?|"
    r"mod[eè]le de langage|chatbot|robot)[^,.:!?]*[,:]\s*",
)

DEFAULT_FALLBACK_LINES = {
    "fr": "Pardon, peux-tu reformuler ?",
    "en": "Sorry, could you say that again?",
}

EMPTY_RETRY_INSTRUCTION = "Your response must be a sentence containing a few words."
TOO_LONG_INSTRUCTION = "Your response must be one sentence."


class FilterError(Exception):
    pass


class FilterAccountingError(FilterError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    claim_patterns: tuple[str, ...] = DEFAULT_CLAIM_PATTERNS
    paratext_min_words: int = 4
    retry_limit: int = 2  # persona regeneration budget per message
    int_empty_retries: int = 2
    int_too_long_retries: int = 1
    max_sentences: int = 3
    empty_retry_instruction: str = EMPTY_RETRY_INSTRUCTION
    too_long_instruction: str = TOO_LONG_INSTRUCTION
    fallback_lines: tuple[tuple[str, str], ...] = tuple(DEFAULT_FALLBACK_LINES.items())
    languages: tuple[str, ...] = ("fr", "en")
    unknown_threshold: float = 0.05
    wordlist_dir: str | None = None

    def fallback_line(self, language: str) -> str:
        lines = dict(self.fallback_lines)
        return lines.get(language) or lines.get("fr") or "Pardon ?"

    def claim_regexes(self) -> tuple[re.Pattern, ...]:
        return _compile_claims(self.claim_patterns)

    @classmethod
    def from_file(cls, path: Path | str) -> "FilterConfig":
        """Load rule configuration (pattern lists, thresholds, retry limits) from JSON."""
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_mapping(cls, data: dict) -> "FilterConfig":
        known = {
            "claim_patterns",
            "paratext_min_words",
            "retry_limit",
            "int_empty_retries",
            "int_too_long_retries",
            "max_sentences",
            "empty_retry_instruction",
            "too_long_instruction",
            "fallback_lines",
            "languages",
            "unknown_threshold",
            "wordlist_dir",
        }
        unknown = set(data) - known
        if unknown:
            raise FilterError(f"unknown filter config keys: {', '.join(sorted(unknown))}")
        kwargs: dict = dict(data)
        for key in ("claim_patterns", "languages"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "fallback_lines" in kwargs:
            kwargs["fallback_lines"] = tuple(kwargs["fallback_lines"].items())
        return cls(**kwargs)


DEFAULT_FILTER_CONFIG = FilterConfig()


@lru_cache(maxsize=16)
def _compile_claims(patterns: tuple[str, ...]) -> tuple[re.Pattern, ...]:
    return tuple(re.compile(p, re.IGNORECASE) for p in patterns)


@dataclass(frozen=True)
class FilterOutcome:
    text: str
    detected: frozenset[str]
    fixed: frozenset[str]
    attempts: int = 1

    def __post_init__(self) -> None:
        if not self.fixed <= self.detected:
            raise ValueError("fixed rules must be a subset of detected rules")

    def record(self) -> FilterRecord:
        return FilterRecord(
            detected=tuple(sorted(self.detected)),
            fixed=tuple(sorted(self.fixed)),
            attempts=self.attempts,
        )


# --- language detection -----------------------------------------------------

_WORD_RE = re.compile(r"[^\W\d_]+(?:['’][^\W\d_]+)*")


def _language_tokens(text: str) -> list[str]:
    return [t.lower() for t in _WORD_RE.findall(text)]


@lru_cache(maxsize=8)
def _wordlists(wordlist_dir: str | None, languages: tuple[str, ...]) -> dict[str, frozenset]:
    lists: dict[str, frozenset] = {}
    for lang in languages:
        text = None
        if wordlist_dir is not None:
            path = Path(wordlist_dir) / f"stopwords_{lang}.txt"
            if path.exists():
                text = path.read_text(encoding="utf-8")
        if text is None:
            try:
                text = (
                    resources.files("rolechat") / "data" / f"stopwords_{lang}.txt"
                ).read_text(encoding="utf-8")
            except FileNotFoundError:
                raise FilterError(f"no stopword list for language {lang!r}") from None
        lists[lang] = frozenset(w.strip().lower() for w in text.splitlines() if w.strip())
    return lists


def detect_language(text: str, config: FilterConfig | None = None) -> str:
    """Stopword-ratio language id over configured languages; 'unknown' below threshold."""
    cfg = config or DEFAULT_FILTER_CONFIG
    tokens = _language_tokens(text)
    if not tokens:
        return "unknown"
    lists = _wordlists(cfg.wordlist_dir, cfg.languages)
    best_lang, best_ratio = "unknown", 0.0
    for lang in cfg.languages:
        words = lists[lang]
        hits = 0
        for token in tokens:
            head = re.split(r"['’]", token, maxsplit=1)[0]
            if token in words or head in words:
                hits += 1
        ratio = hits / len(tokens)
        if ratio > best_ratio:
            best_lang, best_ratio = lang, ratio
    return best_lang if best_ratio >= cfg.unknown_threshold else "unknown"


# --- sentence segmentation ----------------------------------------------------

_ABBREVIATIONS = frozenset(
    {"m.", "mm.", "mme.", "mlle.", "dr.", "st.", "etc.", "ex.", "p.", "cf."}
)
_BOUNDARY_RE = re.compile(r"[.!?…]+(?=\s|$)")


def split_sentences(text: str) -> list[str]:
    """Split on terminal punctuation followed by whitespace; keeps the trailing fragment."""
    sentences: list[str] = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        chunk = text[start : m.end()]
        words = chunk.split()
        if words and words[-1].lower() in _ABBREVIATIONS:
            continue
        chunk = chunk.strip()
        if chunk:
            sentences.append(chunk)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def ends_complete(text: str) -> bool:
    """True when the text closes on terminal punctuation (ignoring quotes/brackets)."""
    t = text.rstrip()
    while t and t[-1] in _CLOSERS:
        t = t[:-1].rstrip()
    return bool(t) and t[-1] in _TERMINALS


# --- persona pipeline ----------------------------------------------------------


def _strip_claim_prefix(text: str, cfg: FilterConfig) -> tuple[str, bool]:
    for pattern in cfg.claim_regexes():
        m = pattern.match(text)
        if m:
            rest = text[m.end() :]
            if rest:
                rest = rest[0].upper() + rest[1:]
            return rest, True
    return text, False


def _find_translation_paratext(text: str, target_language: str, cfg: FilterConfig) -> int | None:
    """Offset of the first parenthetical that reads as another language, else None."""
    for m in re.finditer(r"\(([^)]*)\)?", text):
        content = m.group(1)
        if len(_language_tokens(content)) < cfg.paratext_min_words:
            continue
        lang = detect_language(content, cfg)
        if lang not in ("unknown", target_language):
            return m.start()
    return None


def _persona_pass(
    text: str,
    finish_reason: str,
    is_first: bool,
    target_language: str,
    cfg: FilterConfig,
) -> tuple[str, set[str], set[str], str | None]:
    """One filtering pass. Returns (clean_text, detected, fixed, regen_trigger)."""
    detected: set[str] = set()
    fixed: set[str] = set()
    t = text.strip()
    if not t:
        detected.add(EMPTY_RESPONSE)
        return "", detected, fixed, EMPTY_RESPONSE
    stripped, hit = _strip_claim_prefix(t, cfg)
    if hit:
        detected.add(PERSONA_CLAIM)
        if stripped.strip():
            fixed.add(PERSONA_CLAIM)
            t = stripped.strip()
        else:
            detected.add(EMPTY_RESPONSE)
            return "", detected, fixed, EMPTY_RESPONSE
    cut = _find_translation_paratext(t, target_language, cfg)
    if cut is not None:
        detected.add(PARATEXT_TRANSLATION)
        trimmed = t[:cut].rstrip()
        if trimmed:
            fixed.add(PARATEXT_TRANSLATION)
            t = trimmed
        else:
            detected.add(EMPTY_RESPONSE)
            return "", detected, fixed, EMPTY_RESPONSE
    if is_first:
        lang = detect_language(t, cfg)
        if lang not in ("unknown", target_language):
            detected.add(WRONG_LANGUAGE)
            return t, detected, fixed, WRONG_LANGUAGE
    if finish_reason == _FINISH_LENGTH and not ends_complete(t):
        detected.add(INCOMPLETE_SENTENCE)
        sentences = split_sentences(t)
        if len(sentences) <= 1:
            return t, detected, fixed, INCOMPLETE_SENTENCE
        tail = sentences[-1]
        t = t[: t.rfind(tail)].rstrip()
        fixed.add(INCOMPLETE_SENTENCE)
    return t, detected, fixed, None


Regenerate = Callable[[], tuple[str, str]]


def filter_persona(
    text: str,
    *,
    is_first_agent_message: bool = False,
    target_language: str = "fr",
    finish_reason: str = _FINISH_STOP,
    regenerate: Regenerate | None = None,
    config: FilterConfig | None = None,
) -> FilterOutcome:
    """Persona-task filter: strip claims and paratext, police language, trim cuts.

    ``regenerate`` produces a fresh ``(text, finish_reason)`` candidate; it is
    consulted at most ``retry_limit`` times per message. When the budget runs
    out the best effort is delivered (a fallback line for empty messages) and
    the triggering rule stays unfixed.
    """
    cfg = config or DEFAULT_FILTER_CONFIG
    detected: set[str] = set()
    fixed: set[str] = set()
    attempts = 1
    regens_left = cfg.retry_limit
    current, finish = text, finish_reason
    while True:
        clean, det, fix, trigger = _persona_pass(
            current, finish, is_first_agent_message, target_language, cfg
        )
        detected |= det
        fixed |= fix
        if trigger is None:
            return FilterOutcome(clean, frozenset(detected), frozenset(fixed), attempts)
        if regenerate is not None and regens_left > 0:
            regens_left -= 1
            attempts += 1
            current, finish = regenerate()
            probe = _persona_pass(
                current, finish, is_first_agent_message, target_language, cfg
            )
            if trigger not in probe[1]:
                fixed.add(trigger)
            continue
        if trigger == EMPTY_RESPONSE:
            return FilterOutcome(
                cfg.fallback_line(target_language), frozenset(detected), frozenset(fixed), attempts
            )
        return FilterOutcome(clean, frozenset(detected), frozenset(fixed), attempts)


# --- image-discussion pipeline ---------------------------------------------------

RegenerateWith = Callable[[str], "str | None"]


def filter_int(
    text: str,
    *,
    target_language: str = "fr",
    regenerate: RegenerateWith | None = None,
    config: FilterConfig | None = None,
) -> FilterOutcome:
    """Image-discussion filter: reject empty replies and replies over the sentence cap.

    ``regenerate`` receives an extra instruction to append after the latest
    user message and returns the new candidate text. A regenerated candidate
    is kept only if it satisfies the rules; otherwise the original stands.
    """
    cfg = config or DEFAULT_FILTER_CONFIG
    detected: set[str] = set()
    fixed: set[str] = set()
    attempts = 1
    current = text.strip()
    if not current:
        detected.add(INT_EMPTY)
        if regenerate is not None:
            for _ in range(cfg.int_empty_retries):
                attempts += 1
                candidate = (regenerate(cfg.empty_retry_instruction) or "").strip()
                if candidate and len(split_sentences(candidate)) <= cfg.max_sentences:
                    current = candidate
                    fixed.add(INT_EMPTY)
                    break
        if not current:
            return FilterOutcome(
                cfg.fallback_line(target_language), frozenset(detected), frozenset(fixed), attempts
            )
    if len(split_sentences(current)) > cfg.max_sentences:
        detected.add(INT_TOO_LONG)
        if regenerate is not None:
            for _ in range(cfg.int_too_long_retries):
                attempts += 1
                candidate = (regenerate(cfg.too_long_instruction) or "").strip()
                if candidate and len(split_sentences(candidate)) <= cfg.max_sentences:
                    current = candidate
                    fixed.add(INT_TOO_LONG)
                    break
    return FilterOutcome(current, frozenset(detected), frozenset(fixed), attempts)


# --- error-rate accounting ---------------------------------------------------------

PERSONA_COLUMNS = ("regex", "language", "incomplete_empty")
INT_COLUMNS = ("empty", "too_long", "total")

_PERSONA_GROUPS = {
    "regex": frozenset({PERSONA_CLAIM, PARATEXT_TRANSLATION}),
    "language": frozenset({WRONG_LANGUAGE}),
    "incomplete_empty": frozenset({INCOMPLETE_SENTENCE, EMPTY_RESPONSE}),
}
_INT_GROUPS = {
    "empty": frozenset({INT_EMPTY}),
    "too_long": frozenset({INT_TOO_LONG}),
    "total": frozenset(INT_RULES),
}


@dataclass(frozen=True)
class SetupErrorRates:
    setup_id: str
    task: str
    turns: int
    detected: dict[str, float]
    fixed: dict[str, float]


@dataclass(frozen=True)
class ErrorReport:
    rows: tuple[SetupErrorRates, ...]

    def row(self, setup_id: str) -> SetupErrorRates:
        for r in self.rows:
            if r.setup_id == setup_id:
                return r
        raise KeyError(setup_id)

    def to_dict(self) -> dict:
        return {
            r.setup_id: {
                "task": r.task,
                "turns": r.turns,
                "detected": dict(r.detected),
                "fixed": dict(r.fixed),
            }
            for r in self.rows
        }


def error_report(conversations) -> ErrorReport:
    """Per-setup filter error rates over filtered agent turns.

    Persona setups report regex / language / incomplete-empty rates and no
    total; image-discussion setups report empty / too-long / total for both
    detected and fixed rules.
    """
    grouped: dict[str, list] = {}
    tasks: dict[str, str] = {}
    for conv in conversations:
        for turn in conv.turns:
            if turn.filter is None:
                continue
            grouped.setdefault(conv.setup_id, []).append(turn.filter)
            tasks[conv.setup_id] = conv.config.task
    if not grouped:
        raise FilterAccountingError("corpus carries no filter records")
    rows = []
    for setup_id in sorted(grouped):
        records = grouped[setup_id]
        task = tasks[setup_id]
        groups = _INT_GROUPS if task == "int" else _PERSONA_GROUPS
        n = len(records)
        detected = {
            col: sum(1 for rec in records if set(rec.detected) & rules) / n
            for col, rules in groups.items()
        }
        fixed = {
            col: sum(1 for rec in records if set(rec.fixed) & rules) / n
            for col, rules in groups.items()
        }
        rows.append(SetupErrorRates(setup_id, task, n, detected, fixed))
    return ErrorReport(tuple(rows))


def render_error_table(report: ErrorReport) -> str:
    """Text layout of the per-setup error rates (persona rows carry no total)."""
    lines: list[str] = []
    persona_rows = [r for r in report.rows if r.task != "int"]
    int_rows = [r for r in report.rows if r.task == "int"]
    if persona_rows:
        lines.append("Persona task (rates over filtered turns)")
        header = f"{'setup':<28}{'kind':<10}" + "".join(
            f"{c.replace('_', '/'):>18}" for c in PERSONA_COLUMNS
        )
        lines.append(header)
        for r in persona_rows:
            for kind in ("detected", "fixed"):
                vals = getattr(r, kind)
                lines.append(
                    f"{r.setup_id:<28}{kind:<10}"
                    + "".join(f"{vals[c]:>18.3f}" for c in PERSONA_COLUMNS)
                )
    if int_rows:
        if lines:
            lines.append("")
        lines.append("Image discussion task (rates over filtered turns)")
        header = f"{'setup':<28}{'kind':<10}" + "".join(f"{c:>18}" for c in INT_COLUMNS)
        lines.append(header)
        for r in int_rows:
            for kind in ("detected", "fixed"):
                vals = getattr(r, kind)
                lines.append(
                    f"{r.setup_id:<28}{kind:<10}"
                    + "".join(f"{vals[c]:>18.3f}" for c in INT_COLUMNS)
                )
    return "\n".join(lines)
