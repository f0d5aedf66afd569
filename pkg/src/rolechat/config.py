"""Application configuration from a single JSON file.

The file wires the pieces a deployment needs: backend definitions, corpus and
ledger locations, filter and budget overrides, arena pairing parameters and
the listen address. Relative paths are resolved against the config file's own
directory so a config and its assets can travel together. Unknown keys are
rejected everywhere; a typo should fail loudly, not silently use a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .engine import BudgetConfig, EngineConfig
from .filters import DEFAULT_FILTER_CONFIG, FilterConfig, FilterError
from .gateway import (
    BackendRegistry,
    HttpBackend,
    MapBackend,
    ScriptBackend,
    load_script,
)
from .memory import MemoryConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ArenaSettings:
    battles_per_pair: int = 5
    min_battles: int = 5
    max_battles: int = 14
    seed: int = 0


@dataclass(frozen=True)
class AppConfig:
    host: str = "127.0.0.1"
    port: int = 8750
    corpus_dir: str | None = None
    ledger_path: str | None = None
    ui_dir: str | None = None
    template_dir: str | None = None
    backends: tuple[tuple[str, dict], ...] = ()
    filters: FilterConfig = DEFAULT_FILTER_CONFIG
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    arena: ArenaSettings = field(default_factory=ArenaSettings)
    k_window: int | None = None
    max_retries: int = 1

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            budget=self.budget,
            memory=self.memory,
            filters=self.filters,
            template_dir=self.template_dir,
            k_window=self.k_window,
            max_retries=self.max_retries,
        )

    def resolved_ledger_path(self) -> Path | None:
        if self.ledger_path:
            return Path(self.ledger_path)
        if self.corpus_dir:
            return Path(self.corpus_dir) / "battles.jsonl"
        return None


_TOP_KEYS = {
    "host",
    "port",
    "corpus_dir",
    "ledger_path",
    "ui_dir",
    "template_dir",
    "backends",
    "filters",
    "memory",
    "budget",
    "arena",
    "k_window",
    "max_retries",
}

_MEMORY_KEYS = {
    "enabled",
    "cadence",
    "summary_max_sentences",
    "max_new_tokens",
    "temperature",
    "backend_id",
}
_BUDGET_KEYS = {"context_window", "generation_reserve", "min_keep_pairs"}
_ARENA_KEYS = {"battles_per_pair", "min_battles", "max_battles", "seed"}

_BACKEND_KEYS = {
    "script": {"type", "parallelism", "path", "entries", "loop"},
    "map": {"type", "parallelism", "responses", "default", "hashed"},
    "http": {"type", "parallelism", "url", "model", "auth_env", "timeout"},
}


def _check_keys(data: dict, allowed: set, where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(sorted(unknown))}")


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(value)
    return str(path if path.is_absolute() else base / path)


def load_config(path: Path | str) -> AppConfig:
    """Parse and validate a JSON application config."""
    file_path = Path(path)
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    _check_keys(data, _TOP_KEYS, "config")
    base = file_path.resolve().parent

    backends: list[tuple[str, dict]] = []
    for backend_id, spec in (data.get("backends") or {}).items():
        if not isinstance(spec, dict) or "type" not in spec:
            raise ConfigError(f"backend {backend_id!r} needs an object with a 'type'")
        kind = spec["type"]
        if kind not in _BACKEND_KEYS:
            raise ConfigError(
                f"backend {backend_id!r}: unknown type {kind!r}"
                f" (expected one of {', '.join(sorted(_BACKEND_KEYS))})"
            )
        _check_keys(spec, _BACKEND_KEYS[kind], f"backend {backend_id!r}")
        spec = dict(spec)
        if kind == "script" and "path" in spec:
            spec["path"] = _resolve(base, spec["path"])
        backends.append((backend_id, spec))

    try:
        filters = (
            FilterConfig.from_mapping(data["filters"])
            if "filters" in data
            else DEFAULT_FILTER_CONFIG
        )
    except FilterError as exc:
        raise ConfigError(str(exc)) from None

    memory_data = data.get("memory", {})
    _check_keys(memory_data, _MEMORY_KEYS, "memory")
    budget_data = data.get("budget", {})
    _check_keys(budget_data, _BUDGET_KEYS, "budget")
    arena_data = data.get("arena", {})
    _check_keys(arena_data, _ARENA_KEYS, "arena")

    try:
        return AppConfig(
            host=data.get("host", "127.0.0.1"),
            port=int(data.get("port", 8750)),
            corpus_dir=_resolve(base, data.get("corpus_dir")),
            ledger_path=_resolve(base, data.get("ledger_path")),
            ui_dir=_resolve(base, data.get("ui_dir")),
            template_dir=_resolve(base, data.get("template_dir")),
            backends=tuple(backends),
            filters=filters,
            memory=MemoryConfig(**memory_data),
            budget=BudgetConfig(**budget_data),
            arena=ArenaSettings(**arena_data),
            k_window=data.get("k_window"),
            max_retries=int(data.get("max_retries", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def build_registry(config: AppConfig) -> BackendRegistry:
    """Instantiate every configured backend into a registry."""
    registry = BackendRegistry()
    for backend_id, spec in config.backends:
        kind = spec["type"]
        parallelism = spec.get("parallelism")
        if kind == "script":
            if "path" in spec:
                entries = load_script(spec["path"])
            elif "entries" in spec:
                entries = spec["entries"]
            else:
                raise ConfigError(f"backend {backend_id!r}: script needs 'path' or 'entries'")
            backend = ScriptBackend(entries, loop=bool(spec.get("loop", False)))
        elif kind == "map":
            backend = MapBackend(
                spec.get("responses", {}),
                default=spec.get("default"),
                hashed=bool(spec.get("hashed", True)),
            )
        else:
            if not spec.get("url"):
                raise ConfigError(f"backend {backend_id!r}: http needs a 'url'")
            backend = HttpBackend(
                spec["url"],
                model=spec.get("model"),
                auth_env=spec.get("auth_env"),
                timeout=float(spec.get("timeout", 60.0)),
            )
        registry.register(backend_id, backend, parallelism)
    return registry
