"""Self-chat jobs: two agent setups talk to each other, deterministically.

A job produces conversations where side A and side B alternate replies, each
built through the same pipeline as a live session but from its own
perspective (the partner reads as the user). Seeded RNG, a logical clock on
the store and scripted backends make whole corpora reproducible bit for bit.
The pairing helper then draws balanced conversation pairs for arena battles.
"""

from __future__ import annotations

import itertools
import random
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .engine import ChatEngine
from .filters import filter_persona
from .gateway import RetriesExhausted
from .store import (
    SPEAKER_AGENT_A,
    SPEAKER_AGENT_B,
    Conversation,
    ConversationStore,
    SessionConfig,
)


class SelfChatError(Exception):
    pass


class ArenaPairingError(Exception):
    pass


@dataclass(frozen=True)
class SelfChatJob:
    setup_a: SessionConfig
    setup_b: SessionConfig
    n_rounds: int = 10  # one round = one A turn plus one B turn
    n_conversations: int = 1
    seed: int = 0
    opener_policy: str = "generated"  # "generated": A answers the cue; "fixed": A says the cue
    opener_cue: str = "Bonjour !"
    persona_pool: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.n_conversations < 1:
            raise ValueError("n_conversations must be >= 1")
        if self.opener_policy not in ("generated", "fixed"):
            raise ValueError("opener_policy must be 'generated' or 'fixed'")
        if not self.opener_cue.strip():
            raise ValueError("opener_cue must be non-empty")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+_-]+", "-", text).strip("-") or "setup"


def _conversation_rng(seed: int, index: int) -> random.Random:
    # widely spaced streams so neighbouring conversations never overlap
    return random.Random(seed * 1_000_003 + index)


def _sampled(config: SessionConfig, pool, rng: random.Random) -> SessionConfig:
    if config.task != "persona" or not pool:
        return config
    return replace(config, persona=tuple(rng.choice(pool)))


def run_self_chats(
    job: SelfChatJob,
    store: ConversationStore,
    engine: ChatEngine,
    progress: Callable[[Conversation], None] | None = None,
) -> list[Conversation]:
    """Run every conversation of a job; backend failures invalidate, not abort."""
    label_a, label_b = job.setup_a.setup_id, job.setup_b.setup_id
    group = label_a if label_a == label_b else f"{label_a}|{label_b}"
    conversations: list[Conversation] = []
    for index in range(job.n_conversations):
        rng = _conversation_rng(job.seed, index)
        # validate the effective configs: the pool may supply the personas
        config_a = _sampled(job.setup_a, job.persona_pool, rng)
        config_b = _sampled(job.setup_b, job.persona_pool, rng)
        config_a.validate()
        config_b.validate()
        session_id = f"sc-{_slug(group)}-{job.seed:03d}-{index:04d}"
        conv = Conversation(
            session_id=session_id,
            config=config_a,
            state={
                "setup_id": group,
                "self_chat": {
                    "seed": job.seed,
                    "index": index,
                    "sides": {
                        SPEAKER_AGENT_A: config_a.to_record(),
                        SPEAKER_AGENT_B: config_b.to_record(),
                    },
                },
            },
        )
        store.adopt(conv)
        try:
            _run_turns(job, store, engine, conv, config_a, config_b)
        except RetriesExhausted as exc:
            conv.valid = False
            conv.invalid_reason = str(exc)
        store.save(conv)
        conversations.append(conv)
        if progress is not None:
            progress(conv)
    return conversations


def _run_turns(
    job: SelfChatJob,
    store: ConversationStore,
    engine: ChatEngine,
    conv: Conversation,
    config_a: SessionConfig,
    config_b: SessionConfig,
) -> None:
    sides = {SPEAKER_AGENT_A: config_a, SPEAKER_AGENT_B: config_b}
    if job.opener_policy == "fixed":
        outcome = filter_persona(
            job.opener_cue,
            is_first_agent_message=True,
            target_language=config_a.target_language,
            config=engine.config.filters,
        )
        store.append_turn(conv.session_id, SPEAKER_AGENT_A, outcome.text, outcome.record())
    else:
        reply = engine.generate_reply(conv, SPEAKER_AGENT_A, job.opener_cue, [], config_a)
        store.append_turn(conv.session_id, SPEAKER_AGENT_A, reply.text, reply.outcome.record())
    engine.refresh_user_memory(conv, SPEAKER_AGENT_A, config_a)

    for turn_index in range(1, 2 * job.n_rounds):
        responder = SPEAKER_AGENT_B if turn_index % 2 else SPEAKER_AGENT_A
        latest = conv.turns[-1].text
        reply = engine.generate_reply(
            conv, responder, latest, conv.turns[:-1], sides[responder]
        )
        store.append_turn(conv.session_id, responder, reply.text, reply.outcome.record())
        engine.refresh_user_memory(conv, responder, sides[responder])


# --- arena pairing ------------------------------------------------------------


def build_arena_pairs(
    conversations: Sequence[Conversation],
    battles_per_pair: int = 5,
    *,
    min_battles: int = 5,
    max_battles: int = 14,
    seed: int = 0,
) -> list[tuple[Conversation, Conversation]]:
    """Draw balanced conversation pairs for every unordered setup pair.

    Each setup's conversations are consumed from a shuffled queue that only
    refills when exhausted, so no conversation is reused before every one of
    its setup has appeared once.
    """
    if not min_battles <= battles_per_pair <= max_battles:
        raise ArenaPairingError(
            f"battles_per_pair must be within [{min_battles}, {max_battles}]"
        )
    by_setup: dict[str, list[Conversation]] = {}
    for conv in conversations:
        if conv.valid and conv.turns:
            by_setup.setdefault(conv.setup_id, []).append(conv)
    if len(by_setup) < 2:
        raise ArenaPairingError("at least two setups with valid conversations are required")
    rng = random.Random(seed)
    queues: dict[str, list[Conversation]] = {}

    def draw(setup: str) -> Conversation:
        queue = queues.get(setup)
        if not queue:
            queue = list(by_setup[setup])
            rng.shuffle(queue)
            queues[setup] = queue
        return queue.pop()

    pairs: list[tuple[Conversation, Conversation]] = []
    for setup_a, setup_b in itertools.combinations(sorted(by_setup), 2):
        for _ in range(battles_per_pair):
            pairs.append((draw(setup_a), draw(setup_b)))
    return pairs


def load_personas(path: Path | str | None = None) -> tuple[tuple[str, ...], ...]:
    """Read persona blocks (blank-line separated, one trait per line)."""
    if path is None:
        text = (resources.files("rolechat") / "data" / "personas.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    blocks: list[tuple[str, ...]] = []
    for chunk in re.split(r"\n\s*\n", text):
        traits = tuple(line.strip() for line in chunk.splitlines() if line.strip())
        if traits:
            blocks.append(traits)
    if not blocks:
        raise SelfChatError("no personas found")
    return tuple(blocks)
