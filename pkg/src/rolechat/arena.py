"""Pairwise battles, Elo ratings and 1-5 score aggregation.

Two evaluation paths feed the reports. Arena battles compare two self-chats
from different setups, criterion by criterion plus an overall verdict, and
update Elo ratings. Direct scoring rates a single conversation 1-5 per
criterion by three annotators; the median is the sample score and setup
tables show means of those medians. Ratings are held as exact rationals so
replaying a ledger conserves the total rating mass to the last bit.
"""

from __future__ import annotations

import json
import statistics
import threading
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

PERSONA_CRITERIA = ("coherence", "engagingness", "humanness")
INT_CRITERIA = PERSONA_CRITERIA + ("achievement",)
BATTLE_CRITERIA = ("overall",) + PERSONA_CRITERIA

VERDICT_A = "a_wins"
VERDICT_B = "b_wins"
VERDICT_TIE = "tie"
VERDICTS = (VERDICT_A, VERDICT_B, VERDICT_TIE)

DEFAULT_INITIAL_RATING = 1000.0
DEFAULT_K_FACTOR = 32.0


class ArenaError(Exception):
    pass


class DuplicateBattleError(ArenaError):
    def __init__(self, annotator_id: str, conversation_a: str, conversation_b: str):
        super().__init__(
            f"annotator {annotator_id!r} already judged {conversation_a!r} vs {conversation_b!r}"
        )


def criteria_for_task(task: str) -> tuple[str, ...]:
    return INT_CRITERIA if task == "int" else PERSONA_CRITERIA


def expected_score(rating_a: float, rating_b: float) -> float:
    """Win probability of A against B under the logistic rating model."""
    return 1.0 / (1.0 + 10.0 ** ((rating_b - rating_a) / 400.0))


@dataclass(frozen=True)
class BattleResult:
    conversation_a: str
    conversation_b: str
    setup_a: str
    setup_b: str
    verdicts: dict[str, str]  # criterion -> a_wins | b_wins | tie
    annotator_id: str
    timestamp: float

    def __post_init__(self) -> None:
        if not self.conversation_a or not self.conversation_b:
            raise ValueError("both conversation ids are required")
        if self.conversation_a == self.conversation_b:
            raise ValueError("a battle needs two distinct conversations")
        if self.setup_a == self.setup_b:
            raise ValueError("a battle needs two distinct setups")
        if not self.annotator_id:
            raise ValueError("annotator_id is required")
        if not self.verdicts:
            raise ValueError("at least one criterion verdict is required")
        for criterion, verdict in self.verdicts.items():
            if verdict not in VERDICTS:
                raise ValueError(f"bad verdict {verdict!r} for {criterion!r}")

    def to_record(self) -> dict:
        return {
            "conversation_a": self.conversation_a,
            "conversation_b": self.conversation_b,
            "setup_a": self.setup_a,
            "setup_b": self.setup_b,
            "verdicts": dict(self.verdicts),
            "annotator_id": self.annotator_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BattleResult":
        try:
            return cls(
                conversation_a=rec["conversation_a"],
                conversation_b=rec["conversation_b"],
                setup_a=rec["setup_a"],
                setup_b=rec["setup_b"],
                verdicts=dict(rec["verdicts"]),
                annotator_id=rec["annotator_id"],
                timestamp=float(rec["timestamp"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArenaError(f"bad battle record: {exc}") from None


_SCORES = {VERDICT_A: 1.0, VERDICT_B: 0.0, VERDICT_TIE: 0.5}


class EloTable:
    """Per-criterion ratings, updated battle by battle.

    The rating swing is antisymmetric by construction: A gains exactly what B
    loses. Internally ratings are exact rationals, so the per-criterion total
    stays at setups * initial regardless of replay length; reads round to
    float.
    """

    def __init__(
        self,
        criteria: Sequence[str] = BATTLE_CRITERIA,
        initial: float = DEFAULT_INITIAL_RATING,
        k: float = DEFAULT_K_FACTOR,
    ):
        if not criteria:
            raise ValueError("at least one criterion is required")
        self.criteria = tuple(criteria)
        self.initial = float(initial)
        self.k = float(k)
        self._ratings: dict[str, dict[str, Fraction]] = {c: {} for c in self.criteria}
        self._battle_counts: Counter = Counter()
        self.battles = 0

    def setups(self) -> tuple[str, ...]:
        seen = {s for per in self._ratings.values() for s in per}
        return tuple(sorted(seen))

    def rating(self, criterion: str, setup: str) -> float:
        return float(self._per(criterion).get(setup, Fraction(self.initial)))

    def set_rating(self, criterion: str, setup: str, value: float) -> None:
        """Seed a rating directly (imports, published tables, fixtures)."""
        self._per(criterion)[setup] = Fraction(float(value))

    def battle_count(self, setup: str) -> int:
        return self._battle_counts[setup]

    def _per(self, criterion: str) -> dict[str, Fraction]:
        try:
            return self._ratings[criterion]
        except KeyError:
            raise ArenaError(f"unknown criterion {criterion!r}") from None

    def update(self, battle: BattleResult) -> None:
        for criterion, verdict in battle.verdicts.items():
            per = self._per(criterion)
            rating_a = per.get(battle.setup_a, Fraction(self.initial))
            rating_b = per.get(battle.setup_b, Fraction(self.initial))
            score_a = _SCORES[verdict]
            delta = Fraction(self.k * (score_a - expected_score(float(rating_a), float(rating_b))))
            per[battle.setup_a] = rating_a + delta
            per[battle.setup_b] = rating_b - delta
        self._battle_counts[battle.setup_a] += 1
        self._battle_counts[battle.setup_b] += 1
        self.battles += 1

    def total_points(self, criterion: str) -> float:
        per = self._per(criterion)
        return float(sum(per.values(), Fraction(0)))

    def rank(self, criterion: str = "overall") -> list[tuple[str, float]]:
        per = self._per(criterion)
        rows = [(setup, float(value)) for setup, value in per.items()]
        rows.sort(key=lambda row: (-row[1], row[0]))
        return rows

    @classmethod
    def replay(
        cls,
        battles: Iterable[BattleResult],
        criteria: Sequence[str] = BATTLE_CRITERIA,
        initial: float = DEFAULT_INITIAL_RATING,
        k: float = DEFAULT_K_FACTOR,
    ) -> "EloTable":
        """Rebuild ratings from scratch in (timestamp, arrival) order."""
        table = cls(criteria, initial, k)
        ordered = sorted(enumerate(battles), key=lambda item: (item[1].timestamp, item[0]))
        for _, battle in ordered:
            table.update(battle)
        return table


# --- direct 1-5 scoring -----------------------------------------------------


def median_of_three(scores: Sequence[int]) -> int:
    """Sample score for one conversation: the middle of three 1-5 ratings."""
    if len(scores) != 3:
        raise ValueError("exactly three annotator scores are required")
    for s in scores:
        if not isinstance(s, int) or isinstance(s, bool) or not 1 <= s <= 5:
            raise ValueError(f"scores must be integers in [1, 5], got {s!r}")
    return sorted(scores)[1]


def rate_conversation(conv, criterion: str, scores: Sequence[int]) -> int:
    """Attach a criterion median to a conversation; returns the median."""
    allowed = criteria_for_task(conv.config.task)
    if criterion not in allowed:
        raise ArenaError(
            f"criterion {criterion!r} does not apply to task {conv.config.task!r}"
        )
    median = median_of_three(scores)
    conv.annotations[criterion] = {"scores": list(scores), "median": median}
    return median


@dataclass(frozen=True)
class ScoreRow:
    setup_id: str
    task: str
    conversations: int
    means: dict[str, float | None] = field(default_factory=dict)
    rated: dict[str, int] = field(default_factory=dict)


def aggregate_scores(conversations) -> list[ScoreRow]:
    """Mean of per-conversation medians, per setup and criterion."""
    grouped: dict[str, list] = {}
    tasks: dict[str, str] = {}
    for conv in conversations:
        if not conv.valid:
            continue
        grouped.setdefault(conv.setup_id, []).append(conv)
        tasks[conv.setup_id] = conv.config.task
    rows: list[ScoreRow] = []
    for setup_id in sorted(grouped):
        convs = grouped[setup_id]
        task = tasks[setup_id]
        means: dict[str, float | None] = {}
        rated: dict[str, int] = {}
        for criterion in criteria_for_task(task):
            medians = [
                conv.annotations[criterion]["median"]
                for conv in convs
                if criterion in conv.annotations
            ]
            rated[criterion] = len(medians)
            means[criterion] = statistics.fmean(medians) if medians else None
        rows.append(ScoreRow(setup_id, task, len(convs), means, rated))
    return rows


# --- battle ledger ------------------------------------------------------------


class BattleLedger:
    """Append-only JSONL record of battles; the replay source of truth."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> list[BattleResult]:
        if not self.path.exists():
            return []
        battles = []
        with self.path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    battles.append(BattleResult.from_record(json.loads(line)))
                except (json.JSONDecodeError, ArenaError) as exc:
                    raise ArenaError(f"ledger line {line_no}: {exc}") from None
        return battles

    def judged_pairs(self) -> set[tuple[str, frozenset]]:
        return {
            (b.annotator_id, frozenset((b.conversation_a, b.conversation_b)))
            for b in self.load()
        }

    def has_judged(self, annotator_id: str, conversation_a: str, conversation_b: str) -> bool:
        key = (annotator_id, frozenset((conversation_a, conversation_b)))
        return key in self.judged_pairs()

    def append(self, battle: BattleResult, allow_duplicate: bool = False) -> None:
        with self._lock:
            if not allow_duplicate and self.has_judged(
                battle.annotator_id, battle.conversation_a, battle.conversation_b
            ):
                raise DuplicateBattleError(
                    battle.annotator_id, battle.conversation_a, battle.conversation_b
                )
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(battle.to_record(), ensure_ascii=False) + "\n")


# --- report rendering ---------------------------------------------------------


def render_leaderboard(table: EloTable, primary: str = "overall") -> str:
    """Text leaderboard: one row per setup, primary-criterion rank first."""
    ranked = table.rank(primary)
    others = [c for c in table.criteria if c != primary]
    lines = [
        f"{'rank':<6}{'setup':<28}{primary:>10}"
        + "".join(f"{c:>14}" for c in others)
        + f"{'battles':>9}"
    ]
    for position, (setup, rating) in enumerate(ranked, start=1):
        lines.append(
            f"{position:<6}{setup:<28}{rating:>10.0f}"
            + "".join(f"{table.rating(c, setup):>14.0f}" for c in others)
            + f"{table.battle_count(setup):>9}"
        )
    return "\n".join(lines)


def render_score_table(rows: Sequence[ScoreRow]) -> str:
    """Text layout of mean 1-5 scores; one section per task."""
    lines: list[str] = []
    for task, title in (("persona", "Persona task"), ("int", "Image discussion task"), ("chat", "Chat task")):
        task_rows = [r for r in rows if r.task == task]
        if not task_rows:
            continue
        if lines:
            lines.append("")
        criteria = criteria_for_task(task)
        lines.append(f"{title} (mean of per-conversation medians, 1-5)")
        lines.append(
            f"{'setup':<28}{'convs':>6}" + "".join(f"{c:>14}" for c in criteria)
        )
        for r in task_rows:
            cells = "".join(
                f"{r.means[c]:>14.2f}" if r.means[c] is not None else f"{'-':>14}"
                for c in criteria
            )
            lines.append(f"{r.setup_id:<28}{r.conversations:>6}" + cells)
    return "\n".join(lines)
