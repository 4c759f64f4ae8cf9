"""Deterministic scenario runner.

A scenario file (JSON, schema documented in the README) describes the seed,
the simulated chains, a tick-scripted sequence of mints, reorgs,
registrations and subscriptions, and a set of expected-outcome assertions.
The runner drives the simulators and the service core on a virtual clock so
a run is exactly reproducible, supports SIGKILL-style crash injection at
scripted points, and can resume from the persisted journals to finish an
interrupted run.
"""

from __future__ import annotations

import json
import os
import random
import signal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from chainsync.chainsim import EventSpec
from chainsync.config import (
    ChainConfig,
    SchedulerConfig,
    ServiceConfig,
    _retry_policy,
    parse_chain,
)
from chainsync.core import ServiceCore, generate_events
from chainsync.dispatcher import InProcessRouter, notification_id_for
from chainsync.errors import (
    DuplicateRegistrationError,
    DuplicateSubscriptionError,
    ScenarioError,
)
from chainsync.fetcher import decode_event
from chainsync.journal import JournalWriter, read_journal
from chainsync.receiver import FusionReceiver, RecordingReceiver
from chainsync.registry import EventRegistration
from chainsync.store import MappingSchema, QuerySpec, apply_schema
from chainsync.util import VirtualClock, canonical_json, decode_payload, sha_hex

KILL_PHASES = ("pre", "mid", "post")


@dataclass
class Scenario:
    seed: int | str
    ticks: int
    chains: tuple[ChainConfig, ...]
    schemas: dict[str, MappingSchema]
    script: list[dict[str, Any]]
    assertions: list[dict[str, Any]]
    quiesce_ticks: int = 100
    tick_interval: float = 1.0
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)


def load_scenario(source: str | Path | dict[str, Any]) -> Scenario:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ScenarioError(f"scenario file '{path}' does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario file '{path}' is not valid JSON: {exc}") from None
    else:
        raw = source

    chains = tuple(parse_chain(c, i) for i, c in enumerate(raw.get("chains", [])))
    chain_ids = {c.params.chain_id for c in chains}
    schemas = {
        name: MappingSchema.from_dict({"schema_id": name, **body} if "schema_id" not in body else body)
        for name, body in raw.get("schemas", {}).items()
    }
    script = sorted(raw.get("script", []), key=lambda s: s.get("tick", 0))
    last_tick = -1
    for step in script:
        tick = int(step.get("tick", 0))
        if tick < last_tick:
            raise ScenarioError("script times must be monotone")
        last_tick = tick
        if "chain_id" in step and step["chain_id"] not in chain_ids:
            raise ScenarioError(f"script references undefined chain '{step['chain_id']}'")
    settings = raw.get("settings", {})
    scheduler = SchedulerConfig(
        tick_interval=float(settings.get("tick_interval", 1.0)),
        worker_count=int(settings.get("worker_count", 4)),
        partition_size=settings.get("partition_size"),
        job_retry=_retry_policy(settings.get("retry", {}), "settings.retry"),
        delivery_retry=_retry_policy(
            settings.get("delivery_retry", {"max_attempts": 8}), "settings.delivery_retry"
        ),
    )
    return Scenario(
        seed=raw.get("seed", 0),
        ticks=int(settings.get("ticks", (last_tick + 1) if script else 1)),
        chains=chains,
        schemas=schemas,
        script=script,
        assertions=raw.get("assertions", []),
        quiesce_ticks=int(settings.get("quiesce_ticks", 100)),
        tick_interval=scheduler.tick_interval,
        scheduler=scheduler,
    )


@dataclass
class AssertionResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    results: list[AssertionResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def first_failure(self) -> AssertionResult | None:
        return next((r for r in self.results if not r.passed), None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "assertions": [
                {"name": r.name, "passed": r.passed, "detail": r.detail} for r in self.results
            ],
        }


class ScenarioRunner:
    def __init__(
        self,
        scenario: Scenario,
        state_dir: str | Path,
        kill_at: str | None = None,
        resume: bool = False,
    ):
        self.scenario = scenario
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.resume = resume
        self.kill_at = self._parse_kill(kill_at)
        self._progress_path = self.state_dir / "progress.jsonl"
        completed = [e["tick"] for e in read_journal(self._progress_path)]
        if completed and not resume:
            raise ScenarioError(
                f"state dir '{self.state_dir}' holds a previous run; pass resume to continue"
            )
        self._completed_tick = max(completed) if completed else -1

        self.clock = VirtualClock(0.0)
        self.router = InProcessRouter()  # recv:// receivers only; no network
        self.core = ServiceCore(
            ServiceConfig(
                state_dir=self.state_dir / "state",
                seed=scenario.seed,
                chains=scenario.chains,
                scheduler=scenario.scheduler,
            ),
            clock=self.clock,
            transport=self.router,
        )
        self.receivers: dict[str, RecordingReceiver] = {}
        self._rng = random.Random(sha_hex("scenario", str(scenario.seed)))
        self._progress = JournalWriter(self._progress_path)

    @staticmethod
    def _parse_kill(kill_at: str | None) -> tuple[int, str] | None:
        if kill_at is None:
            return None
        try:
            tick_str, phase = kill_at.split(":")
            tick = int(tick_str)
        except ValueError:
            raise ScenarioError(f"kill_at must look like TICK:PHASE, got '{kill_at}'") from None
        if phase not in KILL_PHASES:
            raise ScenarioError(f"kill phase must be one of {KILL_PHASES}")
        return tick, phase

    # -- script execution ------------------------------------------------------------

    def _resolve_registration(self, step: dict[str, Any]) -> EventRegistration:
        reg = self.core.registry.by_eoi(
            step["chain_id"], step["contract_address"], step["event_signature"]
        )
        if reg is None:
            raise ScenarioError(
                f"step at tick {step.get('tick')} references an unregistered event "
                f"({step['chain_id']}, {step['contract_address']}, {step['event_signature']})"
            )
        return reg

    def _schema_for(self, step: dict[str, Any]) -> MappingSchema:
        ref = step.get("schema")
        if isinstance(ref, str):
            if ref not in self.scenario.schemas:
                raise ScenarioError(f"unknown schema '{ref}'")
            return self.scenario.schemas[ref]
        if isinstance(ref, dict):
            return MappingSchema.from_dict(ref)
        raise ScenarioError(f"register step at tick {step.get('tick')} needs a schema")

    def _make_receiver(self, step: dict[str, Any]) -> None:
        name = step["name"]
        journal = self.state_dir / "receivers" / f"{name}.jsonl"
        kind = step.get("kind", "recording")
        if kind == "fusion":
            receiver: RecordingReceiver = FusionReceiver(
                name,
                query_fn=self.core.store.query,
                component_field=step.get("component_field", "components"),
                lookup_column=step.get("lookup_column", "tokenId"),
                journal_path=journal,
                failure_rate=float(step.get("failure_rate", 0.0)),
                seed=self.scenario.seed,
            )
        elif kind == "recording":
            receiver = RecordingReceiver(
                name,
                journal_path=journal,
                failure_rate=float(step.get("failure_rate", 0.0)),
                seed=self.scenario.seed,
            )
        else:
            raise ScenarioError(f"unknown receiver kind '{kind}'")
        self.receivers[name] = receiver
        self.router.register(name, receiver)

    def _apply_step(self, step: dict[str, Any], replay: bool) -> None:
        action = step["action"]
        if action == "mint":
            chain = next(
                c for c in self.scenario.chains if c.params.chain_id == step["chain_id"]
            )
            lo, hi = step.get("events_per_block", (0, 3))
            for _ in range(int(step.get("blocks", 1))):
                count = self._rng.randint(int(lo), int(hi))
                self.core.mint(
                    step["chain_id"], generate_events(chain.emitters, self._rng, count)
                )
        elif action == "mint_events":
            specs = [
                EventSpec(
                    e["contract_address"],
                    e["event_signature"],
                    decode_payload(e.get("payload", [])),
                    tx_index=e.get("tx_index"),
                    log_index=e.get("log_index"),
                )
                for e in step["events"]
            ]
            self.core.mint(step["chain_id"], specs)
        elif action == "reorg":
            self.core.reorg(step["chain_id"], int(step["depth"]))
        elif action == "receiver":
            self._make_receiver(step)
        elif action == "register":
            if replay:
                return
            try:
                self.core.register_event(
                    step["chain_id"],
                    step["contract_address"],
                    step["event_signature"],
                    int(step.get("init_block_height", 0)),
                    self._schema_for(step),
                )
            except DuplicateRegistrationError:
                pass  # crash landed between the journal write and the progress mark
        elif action == "subscribe":
            if replay:
                return
            reg = self._resolve_registration(step)
            try:
                self.core.subscribe(reg.registration_id, step["url"])
            except DuplicateSubscriptionError:
                pass
        elif action == "unsubscribe":
            if replay:
                return
            reg = self._resolve_registration(step)
            for sub in self.core.registry.subscriptions_for(reg.registration_id):
                if sub.url == step["url"]:
                    self.core.unsubscribe(sub.subscription_id)
        else:
            raise ScenarioError(f"unknown script action '{action}'")

    def _maybe_kill(self, tick: int, phase: str) -> None:
        if self.kill_at == (tick, phase):
            os.kill(os.getpid(), signal.SIGKILL)

    # -- main loop ------------------------------------------------------------------

    def run(self) -> ScenarioReport:
        steps_by_tick: dict[int, list[dict[str, Any]]] = {}
        for step in self.scenario.script:
            steps_by_tick.setdefault(int(step.get("tick", 0)), []).append(step)

        for tick in range(self.scenario.ticks):
            replay = tick <= self._completed_tick
            for step in steps_by_tick.get(tick, []):
                self._apply_step(step, replay)
            if not replay:
                self._maybe_kill(tick, "pre")
                self.core.engine.tick()
                self._maybe_kill(tick, "mid")
                self.core.dispatcher.drain(advance=self.clock.advance)
                self._maybe_kill(tick, "post")
                self._progress.append({"tick": tick})
            self.clock.advance(self.scenario.tick_interval)

        for _ in range(self.scenario.quiesce_ticks):
            if not self.core.engine.pending_work() and self.core.queue.pending_total() == 0:
                break
            self.core.engine.tick()
            self.core.dispatcher.drain(advance=self.clock.advance)
            self.clock.advance(self.scenario.tick_interval)
        self.core.dispatcher.drain(advance=self.clock.advance)

        return ScenarioReport([self._evaluate(a) for a in self.scenario.assertions])

    def close(self) -> None:
        self.core.close()
        self._progress.close()
        for receiver in self.receivers.values():
            receiver.close()

    # -- assertions --------------------------------------------------------------------

    def oracle_dump(self) -> list[str]:
        """Brute-force expected store content from the whole-chain accessor."""
        expected: list[str] = []
        for reg in self.core.registry.list_registrations():
            if reg.halted:
                continue
            schema = self.core.registry.get_schema(reg.schema_id)
            events = self.core.sim.all_canonical_events(
                reg.chain_id, reg.init_block_height, reg.synced_latest_block_height, [reg.eoi]
            )
            timestamps: dict[int, int] = {}
            for ev in events:
                ts = timestamps.get(ev.block_height)
                if ts is None:
                    ts = self.core.sim.get_header(reg.chain_id, ev.block_height).timestamp
                    timestamps[ev.block_height] = ts
                record = apply_schema(decode_event(ev, reg, ts), schema)
                expected.append(canonical_json(record.canonical()))
        expected.sort()
        return expected

    def _evaluate(self, assertion: dict[str, Any]) -> AssertionResult:
        kind = assertion["type"]
        name = assertion.get("name", kind)
        try:
            method = getattr(self, f"_assert_{kind}", None)
            if method is None:
                return AssertionResult(name, False, f"unknown assertion type '{kind}'")
            return method(name, assertion)
        except Exception as exc:  # an assertion that blows up is a failure, not a crash
            return AssertionResult(name, False, f"{type(exc).__name__}: {exc}")

    def _assert_store_matches_chain(self, name: str, a: dict) -> AssertionResult:
        halted = [r.registration_id for r in self.core.registry.list_registrations() if r.halted]
        if halted:
            return AssertionResult(name, False, f"halted registrations present: {halted}")
        expected = self.oracle_dump()
        got = self.core.store.canonical_dump()
        if expected == got:
            return AssertionResult(name, True, f"{len(got)} records byte-equal to the chain scan")
        missing = len(set(expected) - set(got))
        extra = len(set(got) - set(expected))
        return AssertionResult(
            name, False,
            f"store diverges from chain scan: {missing} missing, {extra} unexpected "
            f"({len(got)} stored vs {len(expected)} expected)",
        )

    def _assert_zero_checksum_failures(self, name: str, a: dict) -> AssertionResult:
        failures = self.core.integrity.failure_count()
        return AssertionResult(name, failures == 0, f"{failures} checksum failures")

    def _assert_cursors_caught_up(self, name: str, a: dict) -> AssertionResult:
        lagging = []
        for reg in self.core.registry.list_registrations():
            if reg.halted:
                continue
            head = self.core.sim.latest_height(reg.chain_id).latest_height
            gamma = self.core.sim.params(reg.chain_id).confirmation_depth
            if reg.synced_latest_block_height != head - gamma:
                lagging.append(
                    f"{reg.registration_id[:12]} at {reg.synced_latest_block_height} "
                    f"(safe head {head - gamma})"
                )
        return AssertionResult(name, not lagging, "; ".join(lagging) or "all at safe head")

    def _assert_backfill_collapsed(self, name: str, a: dict) -> AssertionResult:
        open_ranges = [
            f"{r.registration_id[:12]} start={r.synced_start_block_height} init={r.init_block_height}"
            for r in self.core.registry.list_registrations()
            if not r.halted and r.synced_start_block_height != r.init_block_height
        ]
        return AssertionResult(name, not open_ranges, "; ".join(open_ranges) or "all collapsed")

    def _assert_store_count(self, name: str, a: dict) -> AssertionResult:
        if "event" in a:
            reg = self._resolve_registration({**a["event"], "tick": "assertion"})
            page = self.core.store.query(
                QuerySpec(event_types=(reg.registration_id,), limit=1_000_000)
            )
            count = len(page.records)
        else:
            count = len(self.core.store)
        expected = int(a["expected"])
        return AssertionResult(name, count == expected, f"count {count}, expected {expected}")

    def _assert_receiver_complete(self, name: str, a: dict) -> AssertionResult:
        receiver = self.receivers.get(a["receiver"])
        if receiver is None:
            return AssertionResult(name, False, f"no receiver '{a['receiver']}'")
        url = f"recv://{a['receiver']}"
        expected: set[str] = set()
        for sub in self.core.registry.list_subscriptions():
            if not sub.active or sub.url != url:
                continue
            page = self.core.store.query(
                QuerySpec(event_types=(sub.registration_id,), limit=1_000_000)
            )
            for record in page.records:
                expected.add(notification_id_for(record.record_key, sub.subscription_id))
        if receiver.seen == expected:
            return AssertionResult(name, True, f"{len(expected)} notifications, deduplicated")
        return AssertionResult(
            name, False,
            f"receiver saw {len(receiver.seen)} of {len(expected)} expected; "
            f"missing {len(expected - receiver.seen)}, unexpected {len(receiver.seen - expected)}",
        )

    def _assert_receiver_followups(self, name: str, a: dict) -> AssertionResult:
        receiver = self.receivers.get(a["receiver"])
        if not isinstance(receiver, FusionReceiver):
            return AssertionResult(name, False, f"'{a['receiver']}' is not a fusion receiver")
        min_results = int(a.get("min_results", 1))
        expected_pairs: set[tuple[str, int]] = set()
        for body in receiver.bodies:
            for component in receiver._components(body):
                expected_pairs.add((body["notification_id"], component))
        got_pairs = {(f["notification_id"], f["component"]) for f in receiver.followups}
        thin = [f for f in receiver.followups if f["result_count"] < min_results]
        if expected_pairs == got_pairs and not thin and expected_pairs:
            return AssertionResult(
                name, True, f"{len(got_pairs)} component lookups, all with metadata"
            )
        return AssertionResult(
            name, False,
            f"followups {len(got_pairs)}/{len(expected_pairs)}; "
            f"{len(thin)} lookups below {min_results} results",
        )

    def _assert_query_returns_chains(self, name: str, a: dict) -> AssertionResult:
        spec = QuerySpec(
            filters=tuple(tuple(f) for f in a.get("filters", [])),
            sort=tuple(tuple(s) for s in a.get("sort", [("block_timestamp", "asc")])),
            limit=int(a.get("limit", 1_000_000)),
        )
        page = self.core.store.query(spec)
        chains_seen = {r.record_key[0] for r in page.records}
        wanted = set(a["chains"])
        ok = wanted <= chains_seen
        return AssertionResult(
            name, ok, f"chains in result: {sorted(chains_seen)}, wanted {sorted(wanted)}"
        )

    def _assert_no_dead_letters(self, name: str, a: dict) -> AssertionResult:
        dead = self.core.dispatcher.dead_total()
        return AssertionResult(name, dead == 0, f"{dead} dead letters")

    def _assert_alarm_count(self, name: str, a: dict) -> AssertionResult:
        alarms = self.core.integrity.alarms()
        if "source" in a:
            alarms = [al for al in alarms if al.source == a["source"]]
        expected = int(a["expected"])
        return AssertionResult(
            name, len(alarms) == expected, f"{len(alarms)} alarms, expected {expected}"
        )

    def _assert_registration_halted(self, name: str, a: dict) -> AssertionResult:
        reg = self._resolve_registration({**a["event"], "tick": "assertion"})
        want = bool(a.get("halted", True))
        return AssertionResult(
            name, reg.halted == want, f"halted_reason={reg.halted_reason!r}"
        )


def state_summary(state_dir: str | Path) -> dict[str, Any]:
    """Canonical digest of a run's persisted state, for run-equality checks.

    Covers store content (sans ingestion times), sync cursors, and each
    receiver's deduplicated notification set; everything an interrupted-and-
    resumed run must reproduce exactly.
    """
    from chainsync.registry import Registry
    from chainsync.store import MappedRecord

    state = Path(state_dir)
    records: dict[tuple, str] = {}
    for entry in read_journal(state / "state" / "store" / "records.jsonl"):
        record = MappedRecord.from_dict(entry)
        records.setdefault(record.record_key, canonical_json(record.canonical()))
    registry = Registry(state / "state" / "registry.jsonl")
    cursors = {
        r.registration_id: {
            "init": r.init_block_height,
            "start": r.synced_start_block_height,
            "latest": r.synced_latest_block_height,
            "halted": r.halted,
        }
        for r in registry.list_registrations()
    }
    registry.close()
    receivers: dict[str, list[str]] = {}
    receiver_dir = state / "receivers"
    if receiver_dir.exists():
        for path in sorted(receiver_dir.glob("*.jsonl")):
            seen = {
                e["notification_id"]
                for e in read_journal(path)
                if e.get("kind") == "delivery"
            }
            receivers[path.stem] = sorted(seen)
    return {"store": sorted(records.values()), "cursors": cursors, "receivers": receivers}


def apply_chain_script(core: ServiceCore, scenario: Scenario) -> None:
    """Replay only the chain-shaping actions of a script (mint/reorg).

    Used by the one-shot fetch command to materialize the simulated chains a
    scenario describes without running the sync service.
    """
    runner_rng = random.Random(sha_hex("scenario", str(scenario.seed)))
    for step in scenario.script:
        action = step["action"]
        if action == "mint":
            chain = next(c for c in scenario.chains if c.params.chain_id == step["chain_id"])
            lo, hi = step.get("events_per_block", (0, 3))
            for _ in range(int(step.get("blocks", 1))):
                count = runner_rng.randint(int(lo), int(hi))
                core.mint(step["chain_id"], generate_events(chain.emitters, runner_rng, count))
        elif action == "mint_events":
            specs = [
                EventSpec(
                    e["contract_address"],
                    e["event_signature"],
                    decode_payload(e.get("payload", [])),
                    tx_index=e.get("tx_index"),
                    log_index=e.get("log_index"),
                )
                for e in step["events"]
            ]
            core.mint(step["chain_id"], specs)
        elif action == "reorg":
            core.reorg(step["chain_id"], int(step["depth"]))
