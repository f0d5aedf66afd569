"""Auxiliary memory calls: episode summaries and one-line user memory.

Both helpers run a second, cheaper completion against the gateway and feed the
situational context of later prompts: removed history turns are compressed
into an episode summary, and facts the user gives about themselves are kept as
a single line refreshed every few user turns. Backend trouble never breaks the
chat loop; the caller keeps the previous value and the call reports degraded.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .filters import split_sentences
from .gateway import BackendRegistry, GenerationRequest, RetriesExhausted
from .prompting import HistoryTurn, render_template


@dataclass(frozen=True)
class EpisodeSummary:
    text: str
    covers_turn_range: tuple[int, int]  # inclusive absolute turn indices


@dataclass(frozen=True)
class UserMemory:
    text: str
    last_updated_turn: int


@dataclass(frozen=True)
class MemoryConfig:
    enabled: bool = True
    cadence: int = 4  # user turns between memory refreshes
    summary_max_sentences: int = 3
    max_new_tokens: int = 128
    temperature: float = 0.3
    backend_id: str | None = None  # None: reuse the session backend

    def __post_init__(self) -> None:
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.summary_max_sentences < 1:
            raise ValueError("summary_max_sentences must be >= 1")


def _excerpt(turns: Sequence[HistoryTurn]) -> str:
    return "\n".join(f"{t.speaker}: {t.text}" for t in turns)


class MemoryModules:
    """Summary and user-memory calls bound to a gateway registry."""

    def __init__(
        self,
        registry: BackendRegistry,
        config: MemoryConfig | None = None,
        template_dir: Path | str | None = None,
    ):
        self.registry = registry
        self.config = config or MemoryConfig()
        self.template_dir = template_dir

    def _complete(self, prompt: str, backend_id: str) -> str | None:
        request = GenerationRequest(
            prompt=prompt,
            max_new_tokens=self.config.max_new_tokens,
            temperature=self.config.temperature,
            stop_markers=("\n\n",),
            backend_id=self.config.backend_id or backend_id,
        )
        try:
            return self.registry.complete_with_retry(request, max_retries=1).text
        except RetriesExhausted:
            return None

    def summarize_removed(
        self,
        removed: Sequence[HistoryTurn],
        prior: EpisodeSummary | None,
        first_turn_index: int,
        backend_id: str,
    ) -> tuple[EpisodeSummary | None, bool]:
        """Summarize turns dropped by truncation; returns (summary, degraded).

        The new summary covers everything summarized so far: from the start of
        the prior summary (or the first removed turn) through the last removed
        turn, as absolute turn indices.
        """
        if not removed:
            raise ValueError("nothing to summarize")
        covers = (
            prior.covers_turn_range[0] if prior is not None else first_turn_index,
            first_turn_index + len(removed) - 1,
        )
        prompt = render_template(
            "summarize",
            {
                "max_sentences": str(self.config.summary_max_sentences),
                "prior_summary": prior.text if prior else "",
                "excerpt": _excerpt(removed),
            },
            self.template_dir,
        )
        raw = self._complete(prompt, backend_id)
        if raw is None or not raw.strip():
            return prior, True
        text = " ".join(raw.split())
        sentences = split_sentences(text)
        if len(sentences) > self.config.summary_max_sentences:
            text = " ".join(sentences[: self.config.summary_max_sentences])
        return EpisodeSummary(text=text, covers_turn_range=covers), False

    def update_user_memory(
        self,
        user_texts: Sequence[str],
        prior: UserMemory | None,
        turn_index: int,
        backend_id: str,
    ) -> tuple[UserMemory | None, bool]:
        """Refresh the one-line user memory from recent user turns."""
        if not user_texts:
            raise ValueError("at least one user turn is required")
        prompt = render_template(
            "user_memory",
            {
                "prior_memory": prior.text if prior else "",
                "excerpt": "\n".join(f"user: {t}" for t in user_texts),
            },
            self.template_dir,
        )
        raw = self._complete(prompt, backend_id)
        if raw is None:
            return prior, True
        # single line by contract; the prompt template supplies the final period
        lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
        lines = [ln[:-1] if ln.endswith(".") and not ln.endswith("..") else ln for ln in lines]
        text = "; ".join(lines)
        if not text:
            return prior, True
        return UserMemory(text=text, last_updated_turn=turn_index), False
