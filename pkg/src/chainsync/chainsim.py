"""Deterministic simulated archive nodes.

Two chain styles are supported:

* an Ethereum-like chain where a reorg temporarily swaps the top blocks for
  a competing uncle branch; the next mint re-adopts the durable trunk under
  the longest-chain rule, so a reorg never rewrites history deeper than its
  own depth and the trunk below the confirmation depth is immutable;
* a Flow-like chain segmented into sporks, where each endpoint only serves
  the block range of its own spork and reorgs are not allowed.

Everything is a pure function of the construction seed and the operation
sequence: two simulators driven by the same calls produce byte-identical
hashes and event streams.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from chainsync.errors import (
    MintError,
    ReorgError,
    SporkRangeError,
    UnknownChainError,
    UnknownEndpointError,
)
from chainsync.util import canonical_json, encode_payload, sha_hex

ZERO_HASH = "0" * 64
DEFAULT_ENDPOINT = "default"
GENESIS_EPOCH = 1_700_000_000


@dataclass(frozen=True)
class ChainParams:
    """Per-chain sync parameters.

    max_batch caps how many blocks one sync job may scan; confirmation_depth
    is the count of trailing blocks excluded from sync so that everything
    scanned is already durable.
    """

    chain_id: str
    max_batch: int
    confirmation_depth: int
    sporked: bool = False

    def __post_init__(self) -> None:
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.confirmation_depth < 0:
            raise ValueError("confirmation_depth must be >= 0")


@dataclass(frozen=True)
class BlockHeader:
    height: int
    block_hash: str
    parent_hash: str
    timestamp: int


@dataclass(frozen=True)
class ChainEvent:
    chain_id: str
    block_height: int
    block_hash: str
    tx_index: int
    log_index: int
    contract_address: str
    event_signature: str
    payload: tuple[tuple[str, Any], ...]

    @property
    def identity(self) -> tuple[str, int, int, int]:
        return (self.chain_id, self.block_height, self.tx_index, self.log_index)


@dataclass(frozen=True)
class SporkEntry:
    start_height: int
    end_height: int | None  # inclusive; None marks the open-ended last spork
    endpoint_id: str


@dataclass(frozen=True)
class SporkTable:
    entries: tuple[SporkEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("spork table needs at least one entry")
        expect = self.entries[0].start_height
        for i, e in enumerate(self.entries):
            if e.start_height != expect:
                raise ValueError("spork entries must be contiguous and ascending")
            last = i == len(self.entries) - 1
            if e.end_height is None:
                if not last:
                    raise ValueError("only the last spork may be open-ended")
            else:
                if e.end_height < e.start_height:
                    raise ValueError("spork end below start")
                expect = e.end_height + 1
        if self.entries[-1].end_height is not None:
            raise ValueError("last spork entry must be open-ended")

    @classmethod
    def single(cls, endpoint_id: str = DEFAULT_ENDPOINT) -> "SporkTable":
        return cls((SporkEntry(0, None, endpoint_id),))

    def entry_for_endpoint(self, endpoint_id: str) -> SporkEntry:
        for e in self.entries:
            if e.endpoint_id == endpoint_id:
                return e
        raise UnknownEndpointError(f"unknown endpoint '{endpoint_id}'")

    @property
    def start(self) -> int:
        return self.entries[0].start_height


@dataclass
class EventSpec:
    """What to emit when minting a block; indexes default to one tx per event."""

    contract_address: str
    event_signature: str
    payload: list[tuple[str, Any]] = field(default_factory=list)
    tx_index: int | None = None
    log_index: int | None = None


@dataclass(frozen=True)
class ChainHead:
    chain_id: str
    latest_height: int


class _Block:
    __slots__ = ("header", "events")

    def __init__(self, header: BlockHeader, events: list[ChainEvent]):
        self.header = header
        self.events = events


class _Chain:
    def __init__(self, params: ChainParams, sporks: SporkTable, block_interval: int):
        self.params = params
        self.sporks = sporks
        self.block_interval = block_interval
        self.trunk: list[_Block] = []
        self.uncle: list[_Block] | None = None  # competing top blocks, if any
        self.reorg_count = 0
        # payload shape per (contract, signature), in first-seen order; used to
        # regenerate plausible events on uncle branches
        self.emitter_shapes: dict[tuple[str, str], tuple[tuple[str, str], ...]] = {}
        self.lock = threading.RLock()

    def view(self) -> list[_Block]:
        if self.uncle is None:
            return self.trunk
        return self.trunk[: len(self.trunk) - len(self.uncle)] + self.uncle


class ChainSimulator:
    """Container for one or more simulated chains sharing a seed."""

    def __init__(self, seed: int | str):
        self.seed = str(seed)
        self._chains: dict[str, _Chain] = {}

    # -- setup -------------------------------------------------------------

    def add_chain(
        self,
        params: ChainParams,
        sporks: Sequence[tuple[int, int | None, str]] | None = None,
        block_interval: int = 10,
    ) -> None:
        if params.chain_id in self._chains:
            raise ValueError(f"chain '{params.chain_id}' already exists")
        if params.sporked:
            if not sporks:
                raise ValueError("sporked chain needs a spork table")
            table = SporkTable(tuple(SporkEntry(*e) for e in sporks))
        else:
            if sporks:
                raise ValueError("spork table only valid on a sporked chain")
            table = SporkTable.single()
        self._chains[params.chain_id] = _Chain(params, table, block_interval)

    def chain_ids(self) -> list[str]:
        return sorted(self._chains)

    def params(self, chain_id: str) -> ChainParams:
        return self._chain(chain_id).params

    def spork_table(self, chain_id: str) -> SporkTable:
        return self._chain(chain_id).sporks

    # -- chain progression ---------------------------------------------------

    def mint_block(self, chain_id: str, events: Sequence[EventSpec]) -> BlockHeader:
        chain = self._chain(chain_id)
        with chain.lock:
            if chain.uncle is not None:
                # longest-chain rule: extending the trunk reverts the uncle branch
                chain.uncle = None
            height = len(chain.trunk)
            parent = chain.trunk[-1].header.block_hash if chain.trunk else ZERO_HASH
            block = self._build_block(chain, height, parent, branch="trunk", specs=events)
            chain.trunk.append(block)
            for ev in block.events:
                shape = tuple((n, type(v).__name__) for n, v in ev.payload)
                chain.emitter_shapes.setdefault(
                    (ev.contract_address, ev.event_signature), shape
                )
            return block.header

    def reorg(self, chain_id: str, depth: int) -> ChainHead:
        chain = self._chain(chain_id)
        if chain.params.sporked:
            raise ReorgError(f"chain '{chain_id}' is sporked; sporked history cannot reorg")
        if depth < 1:
            raise ReorgError("reorg depth must be a positive integer")
        with chain.lock:
            head = len(chain.trunk) - 1
            if depth > head + 1:
                raise ReorgError(f"reorg depth {depth} exceeds chain length {head + 1}")
            chain.reorg_count += 1
            base = head - depth  # last trunk height kept by the competing branch
            parent = chain.trunk[base].header.block_hash if base >= 0 else ZERO_HASH
            branch = f"uncle{chain.reorg_count}"
            uncle: list[_Block] = []
            for h in range(base + 1, head + 1):
                specs = self._regenerate_events(chain, h, branch)
                block = self._build_block(chain, h, parent, branch=branch, specs=specs)
                uncle.append(block)
                parent = block.header.block_hash
            chain.uncle = uncle
            return ChainHead(chain_id, head)

    # -- reads ---------------------------------------------------------------

    def latest_height(self, chain_id: str) -> ChainHead:
        chain = self._chain(chain_id)
        with chain.lock:
            return ChainHead(chain_id, len(chain.trunk) - 1)

    def get_header(self, chain_id: str, height: int) -> BlockHeader:
        chain = self._chain(chain_id)
        with chain.lock:
            view = chain.view()
            if height < 0 or height >= len(view):
                raise MintError(f"no block at height {height} on '{chain_id}'")
            return view[height].header

    def get_events(
        self,
        endpoint_id: str,
        chain_id: str,
        from_height: int,
        to_height: int,
        eoi_filter: Iterable[tuple[str, str]] | None = None,
    ) -> list[ChainEvent]:
        if from_height > to_height:
            raise ValueError("from_height must be <= to_height")
        chain = self._chain(chain_id)
        entry = chain.sporks.entry_for_endpoint(endpoint_id)
        lo = entry.start_height
        hi = entry.end_height
        if from_height < lo:
            raise SporkRangeError(
                f"endpoint '{endpoint_id}' serves heights from {lo}; "
                f"subrange [{from_height}, {min(to_height, lo - 1)}] is outside it",
                endpoint_id,
                (from_height, min(to_height, lo - 1)),
            )
        if hi is not None and to_height > hi:
            raise SporkRangeError(
                f"endpoint '{endpoint_id}' serves heights up to {hi}; "
                f"subrange [{max(from_height, hi + 1)}, {to_height}] is outside it",
                endpoint_id,
                (max(from_height, hi + 1), to_height),
            )
        with chain.lock:
            return self._collect(chain.view(), chain_id, from_height, to_height, eoi_filter)

    def all_canonical_events(
        self,
        chain_id: str,
        from_height: int,
        to_height: int,
        eoi_filter: Iterable[tuple[str, str]] | None = None,
    ) -> list[ChainEvent]:
        """Whole-chain accessor bypassing endpoint routing.

        Verification oracle for tests and scenario assertions; production
        reads must go through get_events.
        """
        chain = self._chain(chain_id)
        with chain.lock:
            return self._collect(chain.view(), chain_id, from_height, to_height, eoi_filter)

    # -- internals -----------------------------------------------------------

    def _chain(self, chain_id: str) -> _Chain:
        try:
            return self._chains[chain_id]
        except KeyError:
            raise UnknownChainError(f"unknown chain '{chain_id}'") from None

    @staticmethod
    def _collect(
        view: list[_Block],
        chain_id: str,
        from_height: int,
        to_height: int,
        eoi_filter: Iterable[tuple[str, str]] | None,
    ) -> list[ChainEvent]:
        wanted = set(eoi_filter) if eoi_filter is not None else None
        out: list[ChainEvent] = []
        lo = max(from_height, 0)
        hi = min(to_height, len(view) - 1)
        for h in range(lo, hi + 1):
            for ev in view[h].events:
                if wanted is None or (ev.contract_address, ev.event_signature) in wanted:
                    out.append(ev)
        return out

    def _build_block(
        self,
        chain: _Chain,
        height: int,
        parent: str,
        branch: str,
        specs: Sequence[EventSpec],
    ) -> _Block:
        drafts: list[tuple[int, int, EventSpec]] = []
        auto_tx = 0
        for spec in specs:
            if spec.tx_index is None:
                drafts.append((auto_tx, 0, spec))
                auto_tx += 1
            else:
                drafts.append((spec.tx_index, spec.log_index or 0, spec))
        drafts.sort(key=lambda d: (d[0], d[1]))
        seen = set()
        for tx, log, _ in drafts:
            if tx < 0 or log < 0:
                raise MintError("tx_index and log_index must be non-negative")
            if (tx, log) in seen:
                raise MintError(f"duplicate (tx_index, log_index) = ({tx}, {log})")
            seen.add((tx, log))

        encoded = [
            [tx, log, s.contract_address, s.event_signature, encode_payload(s.payload)]
            for tx, log, s in drafts
        ]
        block_hash = sha_hex(
            "block", self.seed, chain.params.chain_id, str(height), parent, branch,
            canonical_json(encoded),
        )
        header = BlockHeader(
            height=height,
            block_hash=block_hash,
            parent_hash=parent,
            timestamp=GENESIS_EPOCH + height * chain.block_interval,
        )
        events = [
            ChainEvent(
                chain_id=chain.params.chain_id,
                block_height=height,
                block_hash=block_hash,
                tx_index=tx,
                log_index=log,
                contract_address=s.contract_address,
                event_signature=s.event_signature,
                payload=tuple(s.payload),
            )
            for tx, log, s in drafts
        ]
        return _Block(header, events)

    def _regenerate_events(self, chain: _Chain, height: int, branch: str) -> list[EventSpec]:
        """Randomized (but seeded) replacement events for an uncle block."""
        rng = random.Random(sha_hex("uncle-events", self.seed, chain.params.chain_id, branch, str(height)))
        shapes = sorted(chain.emitter_shapes.items())
        if not shapes:
            return []
        specs: list[EventSpec] = []
        for _ in range(rng.randint(0, 3)):
            (contract, signature), shape = shapes[rng.randrange(len(shapes))]
            payload: list[tuple[str, Any]] = []
            for name, typename in shape:
                if typename == "int":
                    payload.append((name, rng.randrange(1_000_000)))
                elif typename == "bool":
                    payload.append((name, rng.random() < 0.5))
                elif typename == "bytes":
                    payload.append((name, rng.randrange(2**32).to_bytes(4, "big")))
                else:
                    payload.append((name, f"0x{rng.randrange(16**8):08x}"))
            specs.append(EventSpec(contract, signature, payload))
        return specs
