"""In-repo test webhook receivers.

These stand in for a subscriber's off-chain service: they record every
delivery (journaled, so a killed process still knows what it received),
deduplicate on the notification id as at-least-once delivery demands, and
can simulate flaky availability. The fusion receiver additionally reacts to
a delivery by querying the event store for the metadata of the component
tokens named in the payload, closing the reflective loop end to end.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Any, Callable

from chainsync.journal import JournalWriter, read_journal
from chainsync.store import QueryPage, QuerySpec
from chainsync.util import sha_hex


class RecordingReceiver:
    """Collects webhook deliveries with optional seeded flakiness."""

    def __init__(
        self,
        name: str,
        journal_path: str | Path | None = None,
        failure_rate: float = 0.0,
        seed: int | str = 0,
    ):
        self.name = name
        self.failure_rate = failure_rate
        self._rng = random.Random(sha_hex("receiver", name, str(seed)))
        self.seen: set[str] = set()
        self.bodies: list[dict[str, Any]] = []
        self.attempts = 0
        self._journal: JournalWriter | None = None
        if journal_path is not None:
            for entry in read_journal(journal_path):
                if entry.get("kind") == "delivery" and entry["notification_id"] not in self.seen:
                    self.seen.add(entry["notification_id"])
                    self.bodies.append(entry["body"])
            self._journal = JournalWriter(journal_path)

    def __call__(self, body: bytes, headers: dict[str, str]) -> int:
        self.attempts += 1
        if self.failure_rate > 0 and self._rng.random() < self.failure_rate:
            return 503
        data = json.loads(body)
        nid = data["notification_id"]
        if nid not in self.seen:  # dedup by notification id
            self.seen.add(nid)
            self.bodies.append(data)
            if self._journal is not None:
                self._journal.append({"kind": "delivery", "notification_id": nid, "body": data})
            self.on_accept(data)
        return 200

    def on_accept(self, body: dict[str, Any]) -> None:
        """Hook for subclasses; runs once per unique notification."""

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()


class FusionReceiver(RecordingReceiver):
    """Reacts to fusion events by fetching component-token metadata.

    The payload's component field holds the token ids consumed by the fusion
    (list or comma-separated string). For each, the receiver queries the
    event store, as a renderer would to assemble the fused asset.
    """

    def __init__(
        self,
        name: str,
        query_fn: Callable[[QuerySpec], QueryPage],
        component_field: str = "components",
        lookup_column: str = "tokenId",
        component_event_types: list[str] | None = None,
        journal_path: str | Path | None = None,
        failure_rate: float = 0.0,
        seed: int | str = 0,
    ):
        self.followups: list[dict[str, Any]] = []
        super().__init__(name, journal_path, failure_rate, seed)
        self._query = query_fn
        self.component_field = component_field
        self.lookup_column = lookup_column
        self.component_event_types = component_event_types
        if journal_path is not None:
            for entry in read_journal(journal_path):
                if entry.get("kind") == "followup":
                    self.followups.append(entry["followup"])

    def _components(self, body: dict[str, Any]) -> list[int]:
        raw = body["columns"].get(self.component_field)
        if raw is None:
            return []
        if isinstance(raw, str):
            return [int(part) for part in raw.split(",") if part.strip()]
        if isinstance(raw, list):
            return [int(v) for v in raw]
        return [int(raw)]

    def on_accept(self, body: dict[str, Any]) -> None:
        for component in self._components(body):
            page = self._query(
                QuerySpec(
                    event_types=(
                        tuple(self.component_event_types)
                        if self.component_event_types
                        else None
                    ),
                    filters=((self.lookup_column, "=", component),),
                    sort=(("block_timestamp", "asc"),),
                    limit=100,
                )
            )
            followup = {
                "notification_id": body["notification_id"],
                "component": component,
                "result_count": len(page.records),
            }
            self.followups.append(followup)
            if self._journal is not None:
                self._journal.append({"kind": "followup", "followup": followup})
