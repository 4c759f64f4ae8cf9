"""Chain-agnostic event fetching.

A per-chain adapter exposes pull-only reads against one or more endpoints.
The middleware here subdivides a requested block range into the subranges
served by each spork endpoint, fetches them, and merges the results into a
single stream ordered by on-chain identity, so segmented chains read exactly
like single-endpoint ones. Raw event counts are captured at the endpoint
boundary, before any middleware processing, because they are one side of the
per-job fetch checksum.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping, Protocol

from chainsync.chainsim import BlockHeader, ChainEvent, ChainSimulator, SporkTable
from chainsync.errors import DecodeError, FetchError, SporkRangeError, UnknownChainError

if TYPE_CHECKING:  # pragma: no cover
    from chainsync.registry import EventRegistration


@dataclass(frozen=True)
class FetchRequest:
    chain_id: str
    from_height: int
    to_height: int
    eoi_filter: frozenset[tuple[str, str]] | None = None

    def __post_init__(self) -> None:
        if self.from_height > self.to_height:
            raise ValueError("from_height must be <= to_height")


@dataclass(frozen=True)
class DecodedEvent:
    """A raw log lifted into named, typed fields plus its block timestamp."""

    identity: tuple[str, int, int, int]
    event_type: str  # registration id of the matching EOI
    block_timestamp: int
    fields: tuple[tuple[str, Any], ...]

    @property
    def chain_id(self) -> str:
        return self.identity[0]

    @property
    def block_height(self) -> int:
        return self.identity[1]


@dataclass
class RawFetch:
    """Merged raw events plus the endpoint-boundary count per subrange."""

    events: list[ChainEvent]
    raw_count: int
    subrange_counts: list[tuple[tuple[int, int], str, int]] = field(default_factory=list)


class ChainAdapter(Protocol):
    """Pull-only contract every chain backend implements."""

    chain_id: str

    def latest_height(self) -> int: ...

    def get_header(self, height: int) -> BlockHeader: ...

    def get_events(
        self,
        endpoint_id: str,
        from_height: int,
        to_height: int,
        eoi_filter: Iterable[tuple[str, str]] | None = None,
    ) -> list[ChainEvent]: ...

    def spork_table(self) -> SporkTable: ...


class SimChainAdapter:
    """Adapter over a simulated archive node; safe for concurrent requests."""

    def __init__(self, sim: ChainSimulator, chain_id: str):
        self._sim = sim
        self.chain_id = chain_id
        self.fail_endpoints: set[str] = set()  # test seam: endpoints forced down

    def latest_height(self) -> int:
        return self._sim.latest_height(self.chain_id).latest_height

    def get_header(self, height: int) -> BlockHeader:
        return self._sim.get_header(self.chain_id, height)

    def get_events(
        self,
        endpoint_id: str,
        from_height: int,
        to_height: int,
        eoi_filter: Iterable[tuple[str, str]] | None = None,
    ) -> list[ChainEvent]:
        if endpoint_id in self.fail_endpoints:
            raise FetchError(
                f"endpoint '{endpoint_id}' unavailable", (from_height, to_height)
            )
        return self._sim.get_events(
            endpoint_id, self.chain_id, from_height, to_height, eoi_filter
        )

    def spork_table(self) -> SporkTable:
        return self._sim.spork_table(self.chain_id)


def split_by_sporks(
    from_height: int, to_height: int, table: SporkTable
) -> list[tuple[int, int, str]]:
    """Partition [from, to] into per-endpoint subranges.

    Subranges are ascending, non-overlapping, and their union is exactly the
    requested range; a single-entry table yields the identity split.
    """
    if from_height > to_height:
        raise ValueError("from_height must be <= to_height")
    if from_height < table.start:
        raise SporkRangeError(
            f"range [{from_height}, {to_height}] starts before spork coverage "
            f"({table.start})",
            table.entries[0].endpoint_id,
            (from_height, min(to_height, table.start - 1)),
        )
    out: list[tuple[int, int, str]] = []
    for entry in table.entries:
        lo = max(from_height, entry.start_height)
        hi = to_height if entry.end_height is None else min(to_height, entry.end_height)
        if lo <= hi:
            out.append((lo, hi, entry.endpoint_id))
    return out


def decode_event(
    raw: ChainEvent, registration: "EventRegistration", block_timestamp: int
) -> DecodedEvent:
    """Lift a raw event into the decoded form for its registration."""
    if (raw.contract_address, raw.event_signature) != registration.eoi:
        raise DecodeError(
            f"event ({raw.contract_address}, {raw.event_signature}) does not match "
            f"registration ({registration.contract_address}, {registration.event_signature})"
        )
    names = [n for n, _ in raw.payload]
    if len(names) != len(set(names)):
        raise DecodeError(f"malformed payload: duplicate field names in {names}")
    return DecodedEvent(
        identity=raw.identity,
        event_type=registration.registration_id,
        block_timestamp=block_timestamp,
        fields=tuple(raw.payload),
    )


class EventFetcher:
    """Spork-aware fetch middleware over registered chain adapters.

    drop_hook is a test-only fault seam: raw events it selects are removed
    from the delivered stream after the endpoint-boundary count was taken,
    which the fetch checksum must then catch.
    """

    def __init__(self, drop_hook: Callable[[ChainEvent], bool] | None = None):
        self._adapters: dict[str, ChainAdapter] = {}
        self.drop_hook = drop_hook
        self._lock = threading.Lock()

    def register_adapter(self, adapter: ChainAdapter) -> None:
        with self._lock:
            self._adapters[adapter.chain_id] = adapter

    def adapter(self, chain_id: str) -> ChainAdapter:
        try:
            return self._adapters[chain_id]
        except KeyError:
            raise UnknownChainError(f"no adapter registered for chain '{chain_id}'") from None

    def chain_ids(self) -> list[str]:
        return sorted(self._adapters)

    def fetch_raw(self, request: FetchRequest) -> RawFetch:
        """Split, fetch each subrange, and merge into one ordered raw stream.

        Any subrange failure fails the whole request: partial ranges would
        poison the checksum counts downstream.
        """
        adapter = self.adapter(request.chain_id)
        pieces = split_by_sporks(
            request.from_height, request.to_height, adapter.spork_table()
        )
        merged: list[ChainEvent] = []
        raw_count = 0
        counts: list[tuple[tuple[int, int], str, int]] = []
        for lo, hi, endpoint_id in pieces:
            try:
                events = adapter.get_events(endpoint_id, lo, hi, request.eoi_filter)
            except FetchError:
                raise
            except Exception as exc:
                raise FetchError(
                    f"fetch of [{lo}, {hi}] via '{endpoint_id}' failed: {exc}", (lo, hi)
                ) from exc
            # checksum side: count at the endpoint boundary, pre-middleware
            raw_count += len(events)
            counts.append(((lo, hi), endpoint_id, len(events)))
            if self.drop_hook is not None:
                events = [e for e in events if not self.drop_hook(e)]
            merged.extend(events)
        merged.sort(key=lambda e: e.identity)
        return RawFetch(events=merged, raw_count=raw_count, subrange_counts=counts)

    def fetch_range(
        self,
        request: FetchRequest,
        registrations: Mapping[tuple[str, str], "EventRegistration"],
    ) -> list[DecodedEvent]:
        """Fetch and decode all registered events in a range, merged and ordered."""
        if not request.eoi_filter:
            raise ValueError("fetch_range needs a non-empty eoi_filter")
        missing = [eoi for eoi in request.eoi_filter if eoi not in registrations]
        if missing:
            raise DecodeError(f"no registration for EOIs {sorted(missing)}")
        raw = self.fetch_raw(request)
        adapter = self.adapter(request.chain_id)
        timestamps: dict[int, int] = {}
        decoded: list[DecodedEvent] = []
        for ev in raw.events:
            ts = timestamps.get(ev.block_height)
            if ts is None:
                ts = adapter.get_header(ev.block_height).timestamp
                timestamps[ev.block_height] = ts
            decoded.append(
                decode_event(ev, registrations[(ev.contract_address, ev.event_signature)], ts)
            )
        return decoded
