"""Shared fixtures: canonical slot values used by the golden prompt files."""

from __future__ import annotations

from pathlib import Path

from rolechat.prompting import ConversationHistory, HistoryTurn, PromptInputs

GOLDEN_DIR = Path(__file__).parent / "golden"
DATA_DIR = Path(__file__).parent / "data"

GOLDEN_PERSONA = (
    "I am a nurse on night shifts.",
    "I have a golden retriever named Biscuit.",
)
GOLDEN_HISTORY = ConversationHistory(
    [
        HistoryTurn("user", "Salut !"),
        HistoryTurn("agent", "Bonjour, comment ça va ?"),
    ]
)
GOLDEN_USER_MESSAGE = "Ça va bien, et toi ?"
GOLDEN_USER_MEMORY = "The user is called Paul and has a dog"
GOLDEN_SUMMARY = "Earlier, the user introduced their dog and asked about hobbies."
GOLDEN_IMAGE = "A rotten fruit with eyes, arms and legs, drawn in a cartoon style."
GOLDEN_DEMONSTRATIONS = (
    "## Shot-1\n"
    "Personality:\n"
    "i like tea .\n"
    "Dialogue:\n"
    "User: hello !\n"
    "Persona: hi , tea time for me .\n"
)


def golden_inputs(task_id: str) -> PromptInputs:
    """Slot values for one golden render of ``task_id``."""
    if task_id == "vicuna_basis":
        return PromptInputs(user_message=GOLDEN_USER_MESSAGE, history=GOLDEN_HISTORY)
    if task_id == "fsb":
        return PromptInputs(
            user_message=GOLDEN_USER_MESSAGE,
            history=GOLDEN_HISTORY,
            persona=GOLDEN_PERSONA,
            demonstrations=GOLDEN_DEMONSTRATIONS,
        )
    if task_id == "persona_shallow":
        return PromptInputs(
            user_message=GOLDEN_USER_MESSAGE,
            history=GOLDEN_HISTORY,
            persona=GOLDEN_PERSONA,
        )
    if task_id == "persona_advanced":
        return PromptInputs(
            user_message=GOLDEN_USER_MESSAGE,
            history=GOLDEN_HISTORY,
            persona=GOLDEN_PERSONA,
            user_memory=GOLDEN_USER_MEMORY,
            summary=GOLDEN_SUMMARY,
        )
    if task_id == "int":
        return PromptInputs(
            user_message=GOLDEN_USER_MESSAGE,
            history=GOLDEN_HISTORY,
            image_description=GOLDEN_IMAGE,
        )
    raise ValueError(task_id)


def read_golden(task_id: str) -> str:
    """Golden file content with the single file-hygiene newline stripped."""
    text = (GOLDEN_DIR / f"{task_id}.golden.txt").read_text(encoding="utf-8")
    assert text.endswith("\n")
    return text[:-1]


def load_filter_corpus() -> list[dict]:
    import json

    entries = []
    with (DATA_DIR / "filter_corpus.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    return entries


def run_filter_corpus_entry(entry: dict):
    """Run one fixture message through its pipeline with scripted regeneration.

    Returns (outcome, instructions_seen). Scripted regeneration texts come from
    the entry's ``regen`` list; exhausting the list yields empty candidates.
    """
    from rolechat import filters

    regen_texts = list(entry.get("regen", ()))
    calls = {"n": 0, "instructions": []}

    def next_text() -> str:
        idx = calls["n"]
        calls["n"] += 1
        return regen_texts[idx] if idx < len(regen_texts) else ""

    if entry["pipeline"] == "persona":

        def regenerate():
            return next_text(), "stop_marker"

        outcome = filters.filter_persona(
            entry["text"],
            is_first_agent_message=entry.get("first", False),
            finish_reason=entry.get("finish", "stop_marker"),
            regenerate=regenerate if "regen" in entry else None,
        )
    else:

        def regenerate_with(instruction: str) -> str:
            calls["instructions"].append(instruction)
            return next_text()

        outcome = filters.filter_int(
            entry["text"],
            regenerate=regenerate_with if "regen" in entry else None,
        )
    return outcome, calls["instructions"]


def refilter_output(entry: dict, outcome):
    """Second pass over a delivered message (no regeneration, clean finish)."""
    from rolechat import filters

    if entry["pipeline"] == "persona":
        return filters.filter_persona(
            outcome.text,
            is_first_agent_message=entry.get("first", False),
        )
    return filters.filter_int(outcome.text)
