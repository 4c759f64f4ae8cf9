"""Composition root: wires every module into one running service."""

from __future__ import annotations

import random
import threading
from typing import Any, Callable

from chainsync.chainsim import ChainSimulator, EventSpec
from chainsync.config import ChainConfig, EmitterConfig, ServiceConfig
from chainsync.dispatcher import Dispatcher, DurableQueue, HttpTransport, InProcessRouter
from chainsync.engine import SyncEngine, TickReport
from chainsync.errors import UnknownChainError
from chainsync.fetcher import EventFetcher, SimChainAdapter
from chainsync.integrity import IntegrityService
from chainsync.registry import EventRegistration, Registry, WebhookSubscription
from chainsync.store import EventStore, MappingSchema, QueryPage, QuerySpec
from chainsync.util import WallClock, sha_hex


def _generate_payload(emitter: EmitterConfig, rng: random.Random) -> list[tuple[str, Any]]:
    payload: list[tuple[str, Any]] = []
    for name, kind in emitter.fields:
        if kind == "int":
            payload.append((name, rng.randrange(1000)))
        elif kind == "bool":
            payload.append((name, rng.random() < 0.5))
        else:
            payload.append((name, f"0x{rng.randrange(16**8):08x}"))
    return payload


def generate_events(
    emitters: tuple[EmitterConfig, ...], rng: random.Random, count: int
) -> list[EventSpec]:
    """Deterministically sample emitter events for one minted block."""
    if not emitters or count <= 0:
        return []
    weights = [e.weight for e in emitters]
    specs = []
    for _ in range(count):
        emitter = rng.choices(emitters, weights=weights)[0]
        specs.append(
            EventSpec(
                emitter.contract_address,
                emitter.event_signature,
                _generate_payload(emitter, rng),
            )
        )
    return specs


class ServiceCore:
    """All modules of the sync service behind one object.

    The HTTP API, the CLI scenario runner, and the tests all drive the same
    core; they differ only in clock (wall vs virtual) and webhook transport.
    """

    def __init__(
        self,
        config: ServiceConfig,
        clock: Any = None,
        transport: Callable | None = None,
        fetch_drop=None,
        store_drop=None,
        dispatch_drop=None,
    ):
        self.config = config
        self.clock = clock or WallClock()
        state = config.state_dir
        state.mkdir(parents=True, exist_ok=True)

        self.sim = ChainSimulator(config.seed)
        self.fetcher = EventFetcher(drop_hook=fetch_drop)
        self._chain_configs: dict[str, ChainConfig] = {}
        for chain in config.chains:
            self.sim.add_chain(
                chain.params,
                sporks=list(chain.sporks) if chain.sporks else None,
                block_interval=chain.block_interval,
            )
            self.fetcher.register_adapter(SimChainAdapter(self.sim, chain.params.chain_id))
            self._chain_configs[chain.params.chain_id] = chain

        self.registry = Registry(state / "registry.jsonl", clock=self.clock)
        self.store = EventStore(
            state / "store" / "records.jsonl", clock=self.clock, drop_hook=store_drop
        )
        self.integrity = IntegrityService(
            state / "checksums.jsonl", state / "alarms.jsonl", clock=self.clock
        )
        self._http_transport: HttpTransport | None = None
        if transport is None:
            self._http_transport = HttpTransport()
            transport = InProcessRouter(fallback=self._http_transport)
        self.router = transport
        self.queue = DurableQueue(state / "queue")
        self.dispatcher = Dispatcher(
            self.queue,
            self.registry,
            self.integrity,
            state / "dead_letters.jsonl",
            transport=transport,
            policy=config.scheduler.delivery_retry,
            clock=self.clock,
            drop_hook=dispatch_drop,
        )
        self.engine = SyncEngine(
            self.registry,
            self.fetcher,
            self.store,
            self.integrity,
            self.dispatcher,
            chain_params={c.params.chain_id: c.params for c in config.chains},
            worker_count=config.scheduler.worker_count,
            partition_size=config.scheduler.partition_size,
            retry_policy=config.scheduler.job_retry,
            clock=self.clock,
        )
        # restored registrations need their schemas re-bound for query validation
        for reg in self.registry.list_registrations():
            self.store.bind_schema(reg.registration_id, self.registry.get_schema(reg.schema_id))

        self._mint_rngs = {
            cid: random.Random(sha_hex("automint", str(config.seed), cid))
            for cid in self._chain_configs
        }
        self._stop = threading.Event()
        self._loop_thread: threading.Thread | None = None

    # -- registration surface ----------------------------------------------------

    def register_event(
        self,
        chain_id: str,
        contract_address: str,
        event_signature: str,
        init_block_height: int,
        schema: MappingSchema,
    ) -> EventRegistration:
        """Register an EOI; cursors start at the chain's current safe head."""
        if chain_id not in self._chain_configs:
            raise UnknownChainError(f"unknown chain '{chain_id}'")
        head = self.sim.latest_height(chain_id).latest_height
        if init_block_height < 0:
            raise ValueError("init_block_height must be >= 0")
        if init_block_height > head:
            raise ValueError(
                f"init_block_height {init_block_height} is beyond the chain head {head}"
            )
        gamma = self._chain_configs[chain_id].params.confirmation_depth
        cursor = max(init_block_height, head - gamma)
        reg = self.registry.register_event(
            chain_id, contract_address, event_signature, init_block_height, schema, cursor
        )
        self.store.bind_schema(reg.registration_id, schema)
        return reg

    def subscribe(self, registration_id: str, url: str) -> WebhookSubscription:
        return self.dispatcher.subscribe(registration_id, url)

    def unsubscribe(self, subscription_id: str) -> WebhookSubscription:
        return self.dispatcher.unsubscribe(subscription_id)

    def query(self, spec: QuerySpec) -> QueryPage:
        return self.store.query(spec)

    def health(self) -> dict[str, Any]:
        return {
            "status": "ok",
            "chains": [
                {"chain_id": cid, "latest_height": self.sim.latest_height(cid).latest_height}
                for cid in sorted(self._chain_configs)
            ],
            "registrations": len(self.registry.list_registrations()),
            "queue_pending": self.queue.pending_total(),
        }

    # -- simulated chain controls (scenario runner, demos) --------------------------

    def mint(self, chain_id: str, events: list[EventSpec]):
        return self.sim.mint_block(chain_id, events)

    def reorg(self, chain_id: str, depth: int):
        return self.sim.reorg(chain_id, depth)

    # -- scheduler ---------------------------------------------------------------------

    def tick(self, now: float | None = None) -> TickReport:
        """One cycle: optional auto-minting, sync jobs, then a delivery pass."""
        for cid, chain in sorted(self._chain_configs.items()):
            if chain.auto_mint is None:
                continue
            rng = self._mint_rngs[cid]
            lo, hi = chain.auto_mint.events_per_block
            for _ in range(chain.auto_mint.blocks_per_tick):
                self.sim.mint_block(
                    cid, generate_events(chain.emitters, rng, rng.randint(lo, hi))
                )
        report = self.engine.tick(now)
        self.dispatcher.process(now)
        return report

    def start(self) -> None:
        """Run the scheduler loop on a background thread (wall-clock mode)."""
        if self._loop_thread is not None:
            return

        def loop() -> None:
            while not self._stop.wait(self.config.scheduler.tick_interval):
                self.tick()

        self._loop_thread = threading.Thread(target=loop, daemon=True, name="chainsync-scheduler")
        self._loop_thread.start()

    def stop(self) -> None:
        """Graceful shutdown: finish the in-flight tick, then stop scheduling."""
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout=30)
            self._loop_thread = None

    def close(self) -> None:
        self.stop()
        self.registry.close()
        self.store.close()
        self.integrity.close()
        self.dispatcher.close()
        self.queue.close()
        if self._http_transport is not None:
            self._http_transport.close()
