from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pytest

from chainsync.chainsim import ChainParams, ChainSimulator, EventSpec
from chainsync.dispatcher import Dispatcher, DurableQueue, InProcessRouter, RetryPolicy
from chainsync.engine import SyncEngine
from chainsync.fetcher import EventFetcher, SimChainAdapter
from chainsync.integrity import IntegrityService
from chainsync.registry import Registry
from chainsync.store import EventStore, FieldMapping, MappingSchema
from chainsync.util import VirtualClock

TRANSFER_EOI = ("0xdeed", "Transfer(address,address,uint256)")
TRANSFER_SCHEMA = MappingSchema(
    "transfer",
    (
        FieldMapping("from", "from", "string"),
        FieldMapping("to", "to", "string"),
        FieldMapping("tokenId", "tokenId", "integer"),
    ),
)


def transfer_spec(token_id, contract=TRANSFER_EOI[0], signature=TRANSFER_EOI[1]):
    return EventSpec(
        contract, signature, [("from", "0xa"), ("to", "0xb"), ("tokenId", token_id)]
    )


@dataclass
class Stack:
    sim: ChainSimulator
    fetcher: EventFetcher
    registry: Registry
    store: EventStore
    integrity: IntegrityService
    dispatcher: Dispatcher
    engine: SyncEngine
    clock: VirtualClock
    router: InProcessRouter
    received: list[dict[str, Any]] = field(default_factory=list)

    def register_transfer(self, chain_id="ethsim", contract=TRANSFER_EOI[0],
                          signature=TRANSFER_EOI[1], init=0, schema=TRANSFER_SCHEMA):
        head = self.sim.latest_height(chain_id).latest_height
        gamma = self.sim.params(chain_id).confirmation_depth
        cursor = max(init, head - gamma)
        reg = self.registry.register_event(chain_id, contract, signature, init, schema, cursor)
        self.store.bind_schema(reg.registration_id, schema)
        return reg

    def run_until_idle(self, max_ticks=200, tick_seconds=1.0):
        for _ in range(max_ticks):
            self.engine.tick()
            self.dispatcher.drain(advance=self.clock.advance)
            if not self.engine.pending_work():
                return
            self.clock.advance(tick_seconds)
        raise AssertionError("engine did not go idle")

    def close(self):
        for closable in (self.registry, self.store, self.integrity, self.dispatcher):
            closable.close()


def build_stack(
    tmp_path: Path,
    chains: list[ChainParams] | None = None,
    sporks: dict[str, list[tuple[int, int | None, str]]] | None = None,
    seed: int = 42,
    worker_count: int = 4,
    retry_policy: RetryPolicy = RetryPolicy(base_delay=0.5, factor=2.0, max_attempts=3),
    delivery_policy: RetryPolicy = RetryPolicy(base_delay=0.5, factor=2.0, max_attempts=5),
    fetch_drop=None,
    store_drop=None,
    dispatch_drop=None,
) -> Stack:
    chains = chains or [ChainParams("ethsim", max_batch=100, confirmation_depth=5)]
    sim = ChainSimulator(seed)
    fetcher = EventFetcher(drop_hook=fetch_drop)
    for params in chains:
        sim.add_chain(params, sporks=(sporks or {}).get(params.chain_id))
        fetcher.register_adapter(SimChainAdapter(sim, params.chain_id))
    clock = VirtualClock(1000.0)
    registry = Registry(tmp_path / "registry.jsonl", clock=clock)
    store = EventStore(tmp_path / "store" / "records.jsonl", clock=clock, drop_hook=store_drop)
    integrity = IntegrityService(
        tmp_path / "checksums.jsonl", tmp_path / "alarms.jsonl", clock=clock
    )
    router = InProcessRouter()
    queue = DurableQueue(tmp_path / "queue")
    dispatcher = Dispatcher(
        queue,
        registry,
        integrity,
        tmp_path / "dead.jsonl",
        transport=router,
        policy=delivery_policy,
        clock=clock,
        drop_hook=dispatch_drop,
    )
    engine = SyncEngine(
        registry,
        fetcher,
        store,
        integrity,
        dispatcher,
        chain_params={p.chain_id: p for p in chains},
        worker_count=worker_count,
        retry_policy=retry_policy,
        clock=clock,
    )
    return Stack(sim, fetcher, registry, store, integrity, dispatcher, engine, clock, router)


def oracle_dump(stack: Stack) -> list[str]:
    """Brute-force expected store content: scan the canonical chain through
    the whole-chain accessor and map it through each registration's schema."""
    from chainsync.fetcher import decode_event
    from chainsync.store import apply_schema
    from chainsync.util import canonical_json

    expected = []
    for reg in stack.registry.list_registrations():
        if reg.halted:
            continue
        schema = stack.registry.get_schema(reg.schema_id)
        timestamps = {}
        for ev in stack.sim.all_canonical_events(
            reg.chain_id, reg.init_block_height, reg.synced_latest_block_height, [reg.eoi]
        ):
            ts = timestamps.get(ev.block_height)
            if ts is None:
                ts = stack.sim.get_header(reg.chain_id, ev.block_height).timestamp
                timestamps[ev.block_height] = ts
            expected.append(canonical_json(apply_schema(decode_event(ev, reg, ts), schema).canonical()))
    expected.sort()
    return expected


@pytest.fixture
def stack(tmp_path):
    s = build_stack(tmp_path)
    yield s
    s.close()
