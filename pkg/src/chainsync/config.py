"""Service configuration loading and validation.

Configuration is a JSON document (or dict) mirrored by CLI flags; validation
errors always name the offending field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from chainsync.chainsim import ChainParams
from chainsync.dispatcher import RetryPolicy
from chainsync.errors import ConfigError


@dataclass(frozen=True)
class EmitterConfig:
    """A contract/event pair the simulator can emit, with its payload shape."""

    contract_address: str
    event_signature: str
    fields: tuple[tuple[str, str], ...]  # (name, type) with type in int|str|bool
    weight: int = 1


@dataclass(frozen=True)
class AutoMintConfig:
    blocks_per_tick: int = 1
    events_per_block: tuple[int, int] = (0, 3)


@dataclass(frozen=True)
class ChainConfig:
    params: ChainParams
    sporks: tuple[tuple[int, int | None, str], ...] | None = None
    block_interval: int = 10
    emitters: tuple[EmitterConfig, ...] = ()
    auto_mint: AutoMintConfig | None = None


@dataclass(frozen=True)
class SchedulerConfig:
    tick_interval: float = 1.0
    worker_count: int = 4
    partition_size: int | None = None  # None: use each chain's max_batch
    job_retry: RetryPolicy = RetryPolicy(base_delay=1.0, factor=2.0, max_attempts=5)
    delivery_retry: RetryPolicy = RetryPolicy(base_delay=1.0, factor=2.0, max_attempts=5)


@dataclass(frozen=True)
class ApiConfig:
    host: str = "127.0.0.1"
    port: int = 8460


@dataclass(frozen=True)
class ServiceConfig:
    state_dir: Path
    seed: int | str = 0
    chains: tuple[ChainConfig, ...] = ()
    scheduler: SchedulerConfig = SchedulerConfig()
    api: ApiConfig = ApiConfig()


def _require(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{name} {message}")


def _retry_policy(raw: dict[str, Any], name: str) -> RetryPolicy:
    policy = RetryPolicy(
        base_delay=float(raw.get("base_delay", 1.0)),
        factor=float(raw.get("factor", 2.0)),
        max_attempts=int(raw.get("max_attempts", 5)),
    )
    _require(policy.base_delay > 0, f"{name}.base_delay", "must be positive")
    _require(policy.factor >= 1, f"{name}.factor", "must be >= 1")
    _require(policy.max_attempts >= 1, f"{name}.max_attempts", "must be >= 1")
    return policy


def parse_emitter(raw: dict[str, Any], name: str = "emitter") -> EmitterConfig:
    fields = tuple((n, t) for n, t in raw.get("fields", []))
    for _, t in fields:
        _require(t in ("int", "str", "bool"), f"{name}.fields", f"has unknown type '{t}'")
    emitter = EmitterConfig(
        contract_address=raw["contract_address"],
        event_signature=raw["event_signature"],
        fields=fields,
        weight=int(raw.get("weight", 1)),
    )
    _require(emitter.weight >= 1, f"{name}.weight", "must be >= 1")
    return emitter


def parse_chain(raw: dict[str, Any], index: int = 0) -> ChainConfig:
    name = f"chains[{index}]"
    for key in ("chain_id", "max_batch", "confirmation_depth"):
        _require(key in raw, f"{name}.{key}", "is required")
    try:
        params = ChainParams(
            chain_id=raw["chain_id"],
            max_batch=int(raw["max_batch"]),
            confirmation_depth=int(raw["confirmation_depth"]),
            sporked=bool(raw.get("sporked", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    sporks = None
    if raw.get("sporks") is not None:
        sporks = tuple(
            (int(lo), None if hi is None else int(hi), str(eid))
            for lo, hi, eid in raw["sporks"]
        )
    _require(
        params.sporked == (sporks is not None),
        f"{name}.sporks",
        "must be given exactly when sporked is true",
    )
    auto_mint = None
    if raw.get("auto_mint"):
        am = raw["auto_mint"]
        auto_mint = AutoMintConfig(
            blocks_per_tick=int(am.get("blocks_per_tick", 1)),
            events_per_block=tuple(am.get("events_per_block", (0, 3))),  # type: ignore[arg-type]
        )
        _require(auto_mint.blocks_per_tick >= 1, f"{name}.auto_mint.blocks_per_tick", "must be >= 1")
    block_interval = int(raw.get("block_interval", 10))
    _require(block_interval >= 1, f"{name}.block_interval", "must be >= 1")
    return ChainConfig(
        params=params,
        sporks=sporks,
        block_interval=block_interval,
        emitters=tuple(
            parse_emitter(e, f"{name}.emitters[{i}]")
            for i, e in enumerate(raw.get("emitters", []))
        ),
        auto_mint=auto_mint,
    )


def load_config(source: str | Path | dict[str, Any]) -> ServiceConfig:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file '{path}' does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from None
    else:
        raw = source

    _require("state_dir" in raw, "state_dir", "is required")
    sched_raw = raw.get("scheduler", {})
    scheduler = SchedulerConfig(
        tick_interval=float(sched_raw.get("tick_interval", 1.0)),
        worker_count=int(sched_raw.get("worker_count", 4)),
        partition_size=(
            None
            if sched_raw.get("partition_size") is None
            else int(sched_raw["partition_size"])
        ),
        job_retry=_retry_policy(sched_raw.get("retry", {}), "scheduler.retry"),
        delivery_retry=_retry_policy(
            sched_raw.get("delivery_retry", {}), "scheduler.delivery_retry"
        ),
    )
    _require(scheduler.tick_interval > 0, "scheduler.tick_interval", "must be positive")
    _require(scheduler.worker_count >= 1, "scheduler.worker_count", "must be >= 1")
    if scheduler.partition_size is not None:
        _require(scheduler.partition_size >= 1, "scheduler.partition_size", "must be >= 1")

    chains = tuple(parse_chain(c, i) for i, c in enumerate(raw.get("chains", [])))
    seen = set()
    for i, c in enumerate(chains):
        _require(c.params.chain_id not in seen, f"chains[{i}].chain_id", "must be unique")
        seen.add(c.params.chain_id)

    api_raw = raw.get("api", {})
    api = ApiConfig(host=api_raw.get("host", "127.0.0.1"), port=int(api_raw.get("port", 8460)))
    _require(0 < api.port < 65536, "api.port", "must be a valid port number")

    return ServiceConfig(
        state_dir=Path(raw["state_dir"]),
        seed=raw.get("seed", 0),
        chains=chains,
        scheduler=scheduler,
        api=api,
    )
