"""Prompt assembly for role-play conversational agents.

A prompt is built from four sections: system instructions (I_s), situational
context (C), response instructions (I_a) and conversation history (X). Each
task ships a text template with {slot} markers; a task permutation sigma fixes
the order in which the sections appear in the rendered string. Templates are
plain text assets under ``rolechat/templates`` and can be edited without code
changes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

SECTION_NAMES = ("system_instructions", "context", "response_instructions", "history")
_SECTION_INDEX = {name: i for i, name in enumerate(SECTION_NAMES)}

TASK_IDS = ("vicuna_basis", "fsb", "persona_shallow", "persona_advanced", "int")

SPEAKER_USER = "user"
SPEAKER_AGENT = "agent"

# End-of-turn marker emitted after agent turns in the rendered history and used
# as the primary generation stop marker.
TURN_END_MARKER = "</s>"

LANGUAGE_NAMES = {
    "fr": ("french", "français", "francais"),
    "en": ("english", "anglais"),
}


class PromptError(Exception):
    """Base class for prompt assembly failures."""


class UnknownTaskError(PromptError):
    def __init__(self, task_id: str):
        super().__init__(f"unknown task {task_id!r}; known tasks: {', '.join(TASK_IDS)}")
        self.task_id = task_id


class TemplateError(PromptError):
    pass


class MissingSlotError(PromptError):
    def __init__(self, slot: str, task_id: str):
        super().__init__(f"task {task_id!r} requires slot {slot!r}")
        self.slot = slot
        self.task_id = task_id


TokenEstimator = Callable[[str], int]


def estimate_tokens(text: str) -> int:
    """Token budget heuristic: ceil(word count x 1.35), whitespace words.

    1.35 == 27/20 exactly, so integer arithmetic avoids float rounding.
    """
    words = len(text.split())
    return (words * 27 + 19) // 20


@dataclass(frozen=True)
class SigmaPermutation:
    """Section permutation; output position i shows section ``order[i]``.

    Section indices follow SECTION_NAMES: 0=I_s, 1=C, 2=I_a, 3=X.
    """

    order: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        if sorted(self.order) != [0, 1, 2, 3]:
            raise ValueError(f"not a permutation of 0..3: {self.order!r}")

    @classmethod
    def from_matrix(cls, rows: Sequence[Sequence[int]]) -> "SigmaPermutation":
        """Build from a 4x4 permutation matrix (row i selects the section shown at position i)."""
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise ValueError("matrix must be 4x4")
        order = []
        for r in rows:
            if sorted(r) != [0, 0, 0, 1]:
                raise ValueError(f"row is not a unit vector: {r!r}")
            order.append(list(r).index(1))
        return cls(tuple(order))

    def apply(self, sections: Sequence) -> list:
        if len(sections) != 4:
            raise ValueError("expected exactly 4 sections")
        return [sections[i] for i in self.order]

    def inverse(self) -> "SigmaPermutation":
        inv = [0, 0, 0, 0]
        for pos, idx in enumerate(self.order):
            inv[idx] = pos
        return SigmaPermutation(tuple(inv))

    def section_order(self) -> tuple[str, ...]:
        return tuple(SECTION_NAMES[i] for i in self.order)


IDENTITY_SIGMA = SigmaPermutation((0, 1, 2, 3))
# Image-discussion task: history is promoted right after the system block and
# the instruction sections follow it.
INT_SIGMA = SigmaPermutation.from_matrix(
    [(1, 0, 0, 0), (0, 0, 0, 1), (0, 1, 0, 0), (0, 0, 1, 0)]
)


@dataclass(frozen=True)
class HistoryTurn:
    speaker: str
    text: str

    def __post_init__(self) -> None:
        if self.speaker not in (SPEAKER_USER, SPEAKER_AGENT):
            raise ValueError(f"prompt history speaker must be user/agent, got {self.speaker!r}")


class ConversationHistory:
    """Ordered turns, oldest first. ``k_window`` keeps only the last k pairs when rendering."""

    def __init__(self, turns: Iterable[HistoryTurn] = (), k_window: int | None = None):
        self.turns: tuple[HistoryTurn, ...] = tuple(turns)
        if k_window is not None and k_window < 1:
            raise ValueError("k_window must be >= 1")
        self.k_window = k_window

    def __len__(self) -> int:
        return len(self.turns)

    def __iter__(self):
        return iter(self.turns)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConversationHistory) and self.turns == other.turns

    def __repr__(self) -> str:
        return f"ConversationHistory({len(self.turns)} turns)"

    def pairs(self) -> list[list[HistoryTurn]]:
        """Consecutive turn pairs, grouped from the front; last group may be a singleton."""
        return [list(self.turns[i : i + 2]) for i in range(0, len(self.turns), 2)]

    def windowed(self, k: int | None = None) -> "ConversationHistory":
        k = k if k is not None else self.k_window
        if k is None:
            return self
        kept = self.pairs()[-k:]
        return ConversationHistory([t for p in kept for t in p])


def empty_history() -> ConversationHistory:
    return ConversationHistory(())


@dataclass(frozen=True)
class SystemInstructions:
    items: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.items or any(not i.strip() for i in self.items):
            raise ValueError("system instructions must be non-empty")


def _names_language(item: str, language: str) -> bool:
    low = item.lower()
    return any(name in low for name in LANGUAGE_NAMES.get(language, ()))


@dataclass(frozen=True)
class ResponseInstructions:
    items: tuple[str, ...]
    target_language: str

    def __post_init__(self) -> None:
        hits = sum(1 for i in self.items if _names_language(i, self.target_language))
        if hits != 1:
            raise ValueError(
                f"exactly one response instruction must name the target language, found {hits}"
            )


CONTEXT_KINDS = (
    "persona_traits",
    "humanity_spec",
    "user_memory",
    "episode_summary",
    "image_description",
    "general_instructions",
)
_UNIQUE_KINDS = ("user_memory", "episode_summary", "image_description", "humanity_spec")


@dataclass
class ContextEntry:
    kind: str
    text: str


class SituationalContext:
    """Mutable bag of context entries. Every mutation bumps ``revision`` by one."""

    def __init__(self) -> None:
        self._entries: list[ContextEntry] = []
        self.revision = 0

    @property
    def entries(self) -> tuple[ContextEntry, ...]:
        return tuple(self._entries)

    def get(self, kind: str) -> str | None:
        for e in self._entries:
            if e.kind == kind:
                return e.text
        return None

    def set(self, kind: str, text: str) -> None:
        if kind not in CONTEXT_KINDS:
            raise ValueError(f"unknown context kind {kind!r}")
        if not text:
            raise ValueError("context entry text must be non-empty")
        if kind in _UNIQUE_KINDS:
            for e in self._entries:
                if e.kind == kind:
                    e.text = text
                    self.revision += 1
                    return
        self._entries.append(ContextEntry(kind, text))
        self.revision += 1

    def remove(self, kind: str) -> bool:
        before = len(self._entries)
        self._entries = [e for e in self._entries if e.kind != kind]
        if len(self._entries) != before:
            self.revision += 1
            return True
        return False


# --- template parsing ---------------------------------------------------

_MARK_RE = re.compile(r"\{(\?|/)?([a-z_]+)\}")


def _parse_fragment(source: str, where: str) -> tuple:
    """Parse template text into (kind, ...) nodes: lit, slot, cond."""
    nodes: list = []
    stack: list[tuple[str, list]] = []
    target = nodes
    pos = 0
    for m in _MARK_RE.finditer(source):
        if m.start() > pos:
            target.append(("lit", source[pos : m.start()]))
        kind, name = m.group(1), m.group(2)
        if kind == "?":
            stack.append((name, target))
            target = []
        elif kind == "/":
            if not stack or stack[-1][0] != name:
                raise TemplateError(f"unbalanced conditional {{/{name}}} in {where}")
            _, parent = stack.pop()
            parent.append(("cond", name, tuple(target)))
            target = parent
        else:
            target.append(("slot", name))
        pos = m.end()
    if stack:
        raise TemplateError(f"unclosed conditional {{?{stack[-1][0]}}} in {where}")
    if pos < len(source):
        target.append(("lit", source[pos:]))
    return tuple(nodes)


def _walk_slots(nodes: tuple, conditional: bool, out: list) -> None:
    for node in nodes:
        if node[0] == "slot":
            out.append((node[1], conditional))
        elif node[0] == "cond":
            _walk_slots(node[2], True, out)


def _render_nodes(nodes: tuple, values: dict, where: str) -> str:
    parts: list[str] = []
    for node in nodes:
        if node[0] == "lit":
            parts.append(node[1])
        elif node[0] == "slot":
            val = values.get(node[1])
            if val is None:
                raise MissingSlotError(node[1], where)
            parts.append(val)
        else:
            if values.get(node[1]):
                parts.append(_render_nodes(node[2], values, where))
    return "".join(parts)


def load_template_text(name: str, search_dir: Path | str | None = None) -> str:
    """Load a template asset; a trailing newline (file hygiene) is stripped."""
    if search_dir is not None:
        path = Path(search_dir) / f"{name}.txt"
        if path.exists():
            text = path.read_text(encoding="utf-8")
            return text[:-1] if text.endswith("\n") else text
    try:
        text = (resources.files("rolechat") / "templates" / f"{name}.txt").read_text(
            encoding="utf-8"
        )
    except FileNotFoundError:
        raise TemplateError(f"no template named {name!r}") from None
    return text[:-1] if text.endswith("\n") else text


def render_template(name: str, slots: dict[str, str], search_dir: Path | str | None = None) -> str:
    """Render a free-standing template (used for auxiliary prompts)."""
    nodes = _parse_fragment(load_template_text(name, search_dir), name)
    return _render_nodes(nodes, slots, name)


@dataclass(frozen=True)
class SectionSpan:
    section: str
    start: int
    end: int

    def slice(self, text: str) -> str:
        return text[self.start : self.end]


@dataclass(frozen=True)
class RenderedPrompt:
    task_id: str
    text: str
    token_estimate: int
    section_spans: tuple[SectionSpan, ...]

    def span(self, section: str) -> SectionSpan:
        for s in self.section_spans:
            if s.section == section:
                return s
        raise KeyError(section)

    def section_order(self) -> tuple[str, ...]:
        return tuple(s.section for s in self.section_spans)


class TaskTemplate:
    """A parsed template plus the anchors that delimit its section spans."""

    def __init__(
        self,
        task_id: str,
        source: str,
        sigma: SigmaPermutation,
        anchors: Sequence[tuple[str, str, str | None]],
    ):
        self.task_id = task_id
        self.source = source
        self.sigma = sigma
        marks: list[tuple[int, str | None]] = []
        for section, start_anchor, end_anchor in anchors:
            for anchor in (start_anchor, end_anchor):
                if anchor is not None and source.count(anchor) != 1:
                    raise TemplateError(
                        f"anchor {anchor!r} must occur exactly once in {task_id}"
                    )
            marks.append((source.index(start_anchor), section))
            if end_anchor is not None:
                marks.append((source.index(end_anchor), None))
        marks.sort(key=lambda m: m[0])
        offsets = [off for off, _ in marks]
        if sorted(set(offsets)) != offsets:
            raise TemplateError(f"overlapping section anchors in {task_id}")
        if not marks or marks[0][0] > 0:
            marks.insert(0, (0, None))
        self._regions: list[tuple[str | None, tuple]] = []
        for i, (off, label) in enumerate(marks):
            end = marks[i + 1][0] if i + 1 < len(marks) else len(source)
            self._regions.append((label, _parse_fragment(source[off:end], task_id)))
        slots: list[tuple[str, bool]] = []
        for _, nodes in self._regions:
            _walk_slots(nodes, False, slots)
        names = [n for n, _ in slots]
        if len(names) != len(set(names)):
            raise TemplateError(f"duplicate slot in {task_id}")
        self.slots = tuple(names)
        self.required_slots = tuple(n for n, cond in slots if not cond)
        declared = [s for s, _, _ in anchors]
        expected = [s for s in self.sigma.section_order() if s in declared]
        if declared != expected:
            raise TemplateError(f"section anchors of {task_id} disagree with its sigma")

    def render(self, values: dict[str, str | None], estimator: TokenEstimator) -> RenderedPrompt:
        parts: list[str] = []
        spans: list[SectionSpan] = []
        offset = 0
        for label, nodes in self._regions:
            text = _render_nodes(nodes, values, self.task_id)
            if label is not None:
                spans.append(SectionSpan(label, offset, offset + len(text.rstrip())))
            parts.append(text)
            offset += len(text)
        full = "".join(parts)
        prompt = RenderedPrompt(
            task_id=self.task_id,
            text=full,
            token_estimate=estimator(full),
            section_spans=tuple(spans),
        )
        _check_spans(prompt, self.sigma)
        return prompt


def _check_spans(prompt: RenderedPrompt, sigma: SigmaPermutation) -> None:
    last = 0
    for span in prompt.section_spans:
        if span.start < last or span.end < span.start:
            raise TemplateError(f"section spans overlap in {prompt.task_id}")
        last = span.end
    present = [s.section for s in prompt.section_spans]
    expected = [s for s in sigma.section_order() if s in present]
    if present != expected:
        raise TemplateError(f"section order of {prompt.task_id} violates its permutation")


# --- task profiles --------------------------------------------------------

_HISTORY_STYLES = {
    # caps: instruction-tuned chat layout; agent turns end with the turn marker.
    "caps": (("USER: ", "\n"), ("ASSISTANT: ", TURN_END_MARKER + "\n")),
    # fsb: few-shot dialogue layout from the demonstration blocks.
    "fsb": (("User: ", "\n"), ("Persona: ", "\n")),
}


@dataclass(frozen=True)
class TaskProfile:
    task_id: str
    sigma: SigmaPermutation
    history_style: str
    anchors: tuple[tuple[str, str, str | None], ...]
    system_instructions: SystemInstructions
    response_instructions: ResponseInstructions | None
    persona_join: str | None = None  # joiner for persona traits, None = no persona slot
    stop_markers: tuple[str, ...] = (TURN_END_MARKER, "\nUSER:")


_VICUNA_SYSTEM = SystemInstructions(
    (
        "A chat between a curious user and an artificial intelligence assistant.",
        "The assistant gives helpful, detailed, and polite answers to the user's questions.",
    )
)

TASK_PROFILES: dict[str, TaskProfile] = {}


def _register(profile: TaskProfile) -> None:
    TASK_PROFILES[profile.task_id] = profile


_register(
    TaskProfile(
        task_id="vicuna_basis",
        sigma=IDENTITY_SIGMA,
        history_style="caps",
        anchors=(
            ("system_instructions", "# System instruction:", None),
            ("history", "# Conversation history", None),
        ),
        system_instructions=_VICUNA_SYSTEM,
        response_instructions=None,
    )
)

_register(
    TaskProfile(
        task_id="fsb",
        sigma=IDENTITY_SIGMA,
        history_style="fsb",
        anchors=(
            ("system_instructions", "# 6-shots demonstration examples", None),
            ("context", "# Current conversation", None),
            ("history", "Dialogue:", None),
        ),
        system_instructions=SystemInstructions(("6-shots demonstration examples",)),
        response_instructions=None,
        persona_join="\n",
        stop_markers=("\nUser:", "\n##"),
    )
)

_register(
    TaskProfile(
        task_id="persona_shallow",
        sigma=IDENTITY_SIGMA,
        history_style="caps",
        anchors=(
            ("system_instructions", "# System instruction:", None),
            ("context", "# Role and situational context: persona enforcement", None),
            ("response_instructions", "# Response instruction with writing style", None),
            ("history", "# Conversation history", None),
        ),
        system_instructions=SystemInstructions(
            _VICUNA_SYSTEM.items
            + ("The assistant role plays as the character described below.",)
        ),
        response_instructions=ResponseInstructions(
            (
                "Complete the following conversation as the assistant with the described"
                " character would with a short response in French:",
            ),
            "fr",
        ),
        persona_join=" ",
    )
)

_register(
    TaskProfile(
        task_id="persona_advanced",
        sigma=IDENTITY_SIGMA,
        history_style="caps",
        anchors=(
            ("system_instructions", "# System instructions", None),
            ("context", "# Situational context", None),
            ("response_instructions", "# Response instruction", None),
            ("history", "# Conversation history", None),
        ),
        system_instructions=SystemInstructions(
            (
                "Role play as the character described in the following lines.",
                "You always stay in character.",
                "You are engaging, empathetic, you give useful, short, and simple answers"
                " to the user.",
                "You ask the user questions about what they are saying or to find out more"
                " about them.",
                "You make jokes.",
                "You SHALL ALWAYS respond in French.",
            )
        ),
        response_instructions=ResponseInstructions(
            (
                "Complete the following conversation with a short and precise sentence as"
                " your character would.",
                "Always speak with new and unique messages that haven't been said in the"
                " conversation :",
                "You SHALL ALWAYS respond in French.",
            ),
            "fr",
        ),
        persona_join=" ",
    )
)

_register(
    TaskProfile(
        task_id="int",
        sigma=INT_SIGMA,
        history_style="caps",
        anchors=(
            ("system_instructions", "# System instruction:", None),
            ("history", "# Conversation history:", "# Response instructions"),
            ("context", "## General instructions", None),
            ("response_instructions", "## Writing style", None),
        ),
        system_instructions=SystemInstructions(
            (
                "A chat between a curious human and an artificial intelligence assistant.",
                "The assistant gives helpful, detailed, and polite answers to the human's"
                " questions.",
            )
        ),
        response_instructions=ResponseInstructions(
            (
                "You always speak French.",
                "You respond by a question.",
                "Your responses must be different from the rest of the conversation.",
                "You propose new ideas.",
                "You SHALL respond with one sentence only.",
            ),
            "fr",
        ),
    )
)

_TEMPLATE_CACHE: dict[tuple[str, str | None], TaskTemplate] = {}


def get_profile(task_id: str) -> TaskProfile:
    try:
        return TASK_PROFILES[task_id]
    except KeyError:
        raise UnknownTaskError(task_id) from None


def get_template(task_id: str, search_dir: Path | str | None = None) -> TaskTemplate:
    key = (task_id, str(search_dir) if search_dir else None)
    if key not in _TEMPLATE_CACHE:
        profile = get_profile(task_id)
        source = load_template_text(task_id, search_dir)
        _TEMPLATE_CACHE[key] = TaskTemplate(task_id, source, profile.sigma, profile.anchors)
    return _TEMPLATE_CACHE[key]


def format_history(task_id: str, history: ConversationHistory, k_window: int | None = None) -> str:
    """Render history turns as prompt lines; empty history renders as ''."""
    profile = get_profile(task_id)
    user_fmt, agent_fmt = _HISTORY_STYLES[profile.history_style]
    lines = []
    for turn in history.windowed(k_window):
        prefix, suffix = user_fmt if turn.speaker == SPEAKER_USER else agent_fmt
        lines.append(f"{prefix}{turn.text}{suffix}")
    return "".join(lines)


def default_demonstrations() -> str:
    text = (resources.files("rolechat") / "data" / "fsb_demonstrations.txt").read_text(
        encoding="utf-8"
    )
    return text if text.endswith("\n") else text + "\n"


@dataclass
class PromptInputs:
    """Slot values for one prompt build; history excludes the latest user message."""

    user_message: str
    history: ConversationHistory = field(default_factory=empty_history)
    persona: Sequence[str] | None = None
    user_memory: str | None = None
    summary: str | None = None
    image_description: str | None = None
    demonstrations: str | None = None
    extra_instruction: str | None = None


def render_prompt(
    task_id: str,
    inputs: PromptInputs,
    *,
    estimator: TokenEstimator = estimate_tokens,
    k_window: int | None = None,
    template_dir: Path | str | None = None,
) -> RenderedPrompt:
    """Assemble the full prompt for a task and return it with section spans."""
    profile = get_profile(task_id)
    template = get_template(task_id, template_dir)
    if inputs.user_message is None:
        raise MissingSlotError("user_message", task_id)
    persona_text: str | None = None
    if inputs.persona is not None:
        traits = [t.strip() for t in inputs.persona if t.strip()]
        if not traits:
            raise MissingSlotError("persona", task_id)
        persona_text = (profile.persona_join or " ").join(traits)
    demonstrations = inputs.demonstrations
    if demonstrations is None and "demonstrations" in template.required_slots:
        demonstrations = default_demonstrations()
    values = {
        "user_message": inputs.user_message,
        "history": format_history(task_id, inputs.history, k_window),
        "persona": persona_text,
        "user_memory": inputs.user_memory,
        "summary": inputs.summary,
        "image_description": inputs.image_description,
        "demonstrations": demonstrations,
        "extra_instruction": inputs.extra_instruction,
    }
    # conditional slots render as absent when None
    for name in template.slots:
        if name not in template.required_slots and values.get(name) is None:
            values[name] = ""
    return template.render(values, estimator)


def _plain_history_text(history: ConversationHistory) -> str:
    return "".join(f"{t.speaker}: {t.text}\n" for t in history)


def truncate_history(
    history: ConversationHistory,
    token_budget: int,
    *,
    min_keep: int = 1,
    estimator: TokenEstimator = estimate_tokens,
    formatter: Callable[[ConversationHistory], str] | None = None,
) -> tuple[ConversationHistory, list[list[HistoryTurn]]]:
    """Keep the longest turn-pair suffix whose rendered size fits the budget.

    Returns (kept, removed_pairs). Removal happens in oldest-first pair units;
    at least ``min_keep`` pairs survive even when the budget is degenerate.
    """
    if token_budget <= 0:
        raise ValueError("token_budget must be positive")
    if min_keep < 1:
        raise ValueError("min_keep must be >= 1")
    fmt = formatter or _plain_history_text
    pairs = history.pairs()
    n = len(pairs)
    if n <= min_keep:
        return ConversationHistory(history.turns), []

    def fits(start: int) -> bool:
        suffix = ConversationHistory([t for p in pairs[start:] for t in p])
        return estimator(fmt(suffix)) <= token_budget

    # fits() is monotone in start (suffixes shrink), so binary search the
    # smallest start index that fits.
    lo, hi = 0, n - min_keep
    while lo < hi:
        mid = (lo + hi) // 2
        if fits(mid):
            hi = mid
        else:
            lo = mid + 1
    keep = lo if fits(lo) else n - min_keep
    kept = ConversationHistory([t for p in pairs[keep:] for t in p])
    return kept, pairs[:keep]


def task_stop_markers(task_id: str) -> tuple[str, ...]:
    return get_profile(task_id).stop_markers
