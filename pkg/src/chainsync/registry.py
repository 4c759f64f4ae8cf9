"""Registration registry: the persistent sync database.

Holds event-of-interest registrations with their derived global identity and
the three sync cursors, the mapping schemas they reference, webhook
subscriptions, and backfill bookkeeping. State is an append-only journal
replayed at startup, so a hard kill never loses an acknowledged mutation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from chainsync.errors import (
    DuplicateRegistrationError,
    DuplicateSchemaError,
    DuplicateSubscriptionError,
    IncompleteBackfillError,
    UnknownRegistrationError,
    UnknownSubscriptionError,
)
from chainsync.journal import JournalWriter, read_journal
from chainsync.store import MappingSchema
from chainsync.util import WallClock, sha_hex


def derive_registration_id(chain_id: str, contract_address: str, event_signature: str) -> str:
    """Stable global identity of an EOI: digest of its defining triple."""
    return sha_hex("registration", chain_id, contract_address, event_signature)


@dataclass(frozen=True)
class EventRegistration:
    registration_id: str
    chain_id: str
    contract_address: str
    event_signature: str
    init_block_height: int
    synced_start_block_height: int
    synced_latest_block_height: int
    schema_id: str
    created_at: float
    halted_reason: str | None = None
    last_scanned_hash: str | None = None

    @property
    def halted(self) -> bool:
        return self.halted_reason is not None

    @property
    def eoi(self) -> tuple[str, str]:
        return (self.contract_address, self.event_signature)

    @property
    def backfill_pending_range(self) -> tuple[int, int] | None:
        """Historical range still owned by the backfill group, if any."""
        if self.init_block_height < self.synced_start_block_height:
            return (self.init_block_height, self.synced_start_block_height)
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "registration_id": self.registration_id,
            "chain_id": self.chain_id,
            "contract_address": self.contract_address,
            "event_signature": self.event_signature,
            "init_block_height": self.init_block_height,
            "synced_start_block_height": self.synced_start_block_height,
            "synced_latest_block_height": self.synced_latest_block_height,
            "schema_id": self.schema_id,
            "created_at": self.created_at,
            "halted_reason": self.halted_reason,
            "last_scanned_hash": self.last_scanned_hash,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EventRegistration":
        return cls(**d)


@dataclass(frozen=True)
class CursorUpdate:
    registration_id: str
    new_latest: int
    job_id: str
    block_hash: str | None = None  # head-of-range hash kept for the reorg probe


@dataclass
class AdvanceResult:
    registration: EventRegistration
    applied: bool  # False means the update was stale and ignored


@dataclass(frozen=True)
class WebhookSubscription:
    subscription_id: str
    registration_id: str
    url: str
    secret: str
    active: bool
    created_at: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "subscription_id": self.subscription_id,
            "registration_id": self.registration_id,
            "url": self.url,
            "secret": self.secret,
            "active": self.active,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "WebhookSubscription":
        return cls(**d)


@dataclass
class BackfillState:
    planned: bool = False
    outstanding: set[tuple[int, int]] = field(default_factory=set)
    done: set[tuple[int, int]] = field(default_factory=set)

    @property
    def complete(self) -> bool:
        return self.planned and not self.outstanding


class Registry:
    """Journal-backed registration store with serialized mutations."""

    def __init__(self, path: str | Path, clock: Any = None):
        self._clock = clock or WallClock()
        self._lock = threading.RLock()
        self._registrations: dict[str, EventRegistration] = {}
        self._schemas: dict[str, MappingSchema] = {}
        self._subscriptions: dict[str, WebhookSubscription] = {}
        self._sub_incarnations: dict[tuple[str, str], int] = {}
        self._backfill: dict[str, BackfillState] = {}
        for entry in read_journal(path):
            self._replay(entry)
        self._journal = JournalWriter(path)

    # -- replay ----------------------------------------------------------------

    def _replay(self, entry: dict[str, Any]) -> None:
        op = entry["op"]
        if op == "register":
            reg = EventRegistration.from_dict(entry["registration"])
            self._registrations[reg.registration_id] = reg
            self._schemas.setdefault(
                entry["schema"]["schema_id"], MappingSchema.from_dict(entry["schema"])
            )
            if reg.backfill_pending_range is not None:
                self._backfill[reg.registration_id] = BackfillState()
        elif op == "advance":
            reg = self._registrations[entry["registration_id"]]
            if entry["new_latest"] > reg.synced_latest_block_height:
                self._registrations[reg.registration_id] = replace(
                    reg,
                    synced_latest_block_height=entry["new_latest"],
                    last_scanned_hash=entry.get("block_hash") or reg.last_scanned_hash,
                )
        elif op == "backfill_plan":
            state = self._backfill.setdefault(entry["registration_id"], BackfillState())
            if not state.planned:
                state.planned = True
                state.outstanding = {tuple(r) for r in entry["partitions"]}
        elif op == "backfill_done":
            state = self._backfill.setdefault(entry["registration_id"], BackfillState())
            rng = tuple(entry["range"])
            state.outstanding.discard(rng)
            state.done.add(rng)
        elif op == "backfill_complete":
            reg = self._registrations[entry["registration_id"]]
            self._registrations[reg.registration_id] = replace(
                reg, synced_start_block_height=reg.init_block_height
            )
        elif op == "halt":
            reg = self._registrations[entry["registration_id"]]
            self._registrations[reg.registration_id] = replace(
                reg, halted_reason=entry["reason"]
            )
        elif op == "subscribe":
            sub = WebhookSubscription.from_dict(entry["subscription"])
            self._subscriptions[sub.subscription_id] = sub
            key = (sub.registration_id, sub.url)
            self._sub_incarnations[key] = self._sub_incarnations.get(key, 0) + 1
        elif op == "unsubscribe":
            sub = self._subscriptions[entry["subscription_id"]]
            self._subscriptions[sub.subscription_id] = replace(sub, active=False)
        else:  # pragma: no cover - future-proofing
            raise ValueError(f"unknown journal op '{op}'")

    # -- registrations -----------------------------------------------------------

    def register_event(
        self,
        chain_id: str,
        contract_address: str,
        event_signature: str,
        init_block_height: int,
        schema: MappingSchema,
        initial_cursor: int,
    ) -> EventRegistration:
        """Persist a new registration with both cursors at the safe head.

        initial_cursor is the chain's current safe head (head minus the
        confirmation depth), floored at init_block_height by the caller, so
        regular sync starts at the present while backfill owns the history.
        """
        reg_id = derive_registration_id(chain_id, contract_address, event_signature)
        with self._lock:
            if reg_id in self._registrations:
                raise DuplicateRegistrationError(
                    f"event already registered as {reg_id} "
                    f"({chain_id}, {contract_address}, {event_signature})"
                )
            if initial_cursor < init_block_height:
                raise ValueError("initial cursor may not sit below init_block_height")
            existing = self._schemas.get(schema.schema_id)
            if existing is not None and existing != schema:
                raise DuplicateSchemaError(
                    f"schema '{schema.schema_id}' already exists with different mappings"
                )
            reg = EventRegistration(
                registration_id=reg_id,
                chain_id=chain_id,
                contract_address=contract_address,
                event_signature=event_signature,
                init_block_height=init_block_height,
                synced_start_block_height=initial_cursor,
                synced_latest_block_height=initial_cursor,
                schema_id=schema.schema_id,
                created_at=self._clock.now(),
            )
            self._registrations[reg_id] = reg
            self._schemas[schema.schema_id] = schema
            if reg.backfill_pending_range is not None:
                self._backfill[reg_id] = BackfillState()
            self._journal.append(
                {"op": "register", "registration": reg.to_dict(), "schema": schema.to_dict()}
            )
            return reg

    def get(self, registration_id: str) -> EventRegistration:
        try:
            return self._registrations[registration_id]
        except KeyError:
            raise UnknownRegistrationError(
                f"unknown registration '{registration_id}'"
            ) from None

    def by_eoi(
        self, chain_id: str, contract_address: str, event_signature: str
    ) -> EventRegistration | None:
        reg_id = derive_registration_id(chain_id, contract_address, event_signature)
        return self._registrations.get(reg_id)

    def list_registrations(self, chain_id: str | None = None) -> list[EventRegistration]:
        with self._lock:
            regs = [
                r
                for r in self._registrations.values()
                if chain_id is None or r.chain_id == chain_id
            ]
        return sorted(regs, key=lambda r: r.registration_id)

    def advance_latest(self, update: CursorUpdate) -> AdvanceResult:
        """Monotonic cursor advance; stale updates are reported as no-ops."""
        with self._lock:
            reg = self.get(update.registration_id)
            if update.new_latest <= reg.synced_latest_block_height:
                return AdvanceResult(reg, applied=False)
            reg = replace(
                reg,
                synced_latest_block_height=update.new_latest,
                last_scanned_hash=update.block_hash or reg.last_scanned_hash,
            )
            self._registrations[reg.registration_id] = reg
            self._journal.append(
                {
                    "op": "advance",
                    "registration_id": reg.registration_id,
                    "new_latest": update.new_latest,
                    "job_id": update.job_id,
                    "block_hash": update.block_hash,
                }
            )
            return AdvanceResult(reg, applied=True)

    def halt_registration(self, registration_id: str, reason: str) -> EventRegistration:
        with self._lock:
            reg = self.get(registration_id)
            if reg.halted:
                return reg
            reg = replace(reg, halted_reason=reason)
            self._registrations[registration_id] = reg
            self._journal.append(
                {"op": "halt", "registration_id": registration_id, "reason": reason}
            )
            return reg

    # -- backfill bookkeeping ------------------------------------------------------

    def record_backfill_plan(
        self, registration_id: str, partitions: list[tuple[int, int]]
    ) -> None:
        with self._lock:
            self.get(registration_id)
            state = self._backfill.setdefault(registration_id, BackfillState())
            if state.planned:
                return
            state.planned = True
            state.outstanding = set(partitions)
            self._journal.append(
                {
                    "op": "backfill_plan",
                    "registration_id": registration_id,
                    "partitions": [list(p) for p in partitions],
                }
            )

    def backfill_state(self, registration_id: str) -> BackfillState:
        with self._lock:
            self.get(registration_id)
            state = self._backfill.get(registration_id, BackfillState(planned=True))
            return BackfillState(state.planned, set(state.outstanding), set(state.done))

    def mark_backfill_done(
        self, registration_id: str, partition: tuple[int, int], job_id: str
    ) -> int:
        """Record one finished backfill partition; returns how many remain."""
        with self._lock:
            self.get(registration_id)
            state = self._backfill.setdefault(registration_id, BackfillState())
            if partition in state.done:
                return len(state.outstanding)
            state.outstanding.discard(partition)
            state.done.add(partition)
            self._journal.append(
                {
                    "op": "backfill_done",
                    "registration_id": registration_id,
                    "range": list(partition),
                    "job_id": job_id,
                }
            )
            return len(state.outstanding)

    def complete_backfill(self, registration_id: str) -> EventRegistration:
        """Collapse the start cursor onto init once the whole group finished."""
        with self._lock:
            reg = self.get(registration_id)
            if reg.init_block_height == reg.synced_start_block_height:
                return reg  # already collapsed; idempotent
            state = self._backfill.get(registration_id)
            if state is None or not state.complete:
                outstanding = sorted(state.outstanding) if state else "unplanned"
                raise IncompleteBackfillError(
                    f"backfill for {registration_id} incomplete: {outstanding}"
                )
            reg = replace(reg, synced_start_block_height=reg.init_block_height)
            self._registrations[registration_id] = reg
            self._journal.append(
                {"op": "backfill_complete", "registration_id": registration_id}
            )
            return reg

    # -- schemas -------------------------------------------------------------------

    def get_schema(self, schema_id: str) -> MappingSchema:
        try:
            return self._schemas[schema_id]
        except KeyError:
            raise UnknownRegistrationError(f"unknown schema '{schema_id}'") from None

    def list_schemas(self) -> list[MappingSchema]:
        return sorted(self._schemas.values(), key=lambda s: s.schema_id)

    # -- webhook subscriptions -------------------------------------------------------

    def add_subscription(self, registration_id: str, url: str, secret: str) -> WebhookSubscription:
        with self._lock:
            self.get(registration_id)
            for sub in self._subscriptions.values():
                if sub.active and sub.registration_id == registration_id and sub.url == url:
                    raise DuplicateSubscriptionError(
                        f"active subscription for ({registration_id}, {url}) already exists"
                    )
            key = (registration_id, url)
            incarnation = self._sub_incarnations.get(key, 0) + 1
            self._sub_incarnations[key] = incarnation
            sub = WebhookSubscription(
                subscription_id=sha_hex("subscription", registration_id, url, str(incarnation)),
                registration_id=registration_id,
                url=url,
                secret=secret,
                active=True,
                created_at=self._clock.now(),
            )
            self._subscriptions[sub.subscription_id] = sub
            self._journal.append({"op": "subscribe", "subscription": sub.to_dict()})
            return sub

    def deactivate_subscription(self, subscription_id: str) -> WebhookSubscription:
        with self._lock:
            sub = self._subscriptions.get(subscription_id)
            if sub is None:
                raise UnknownSubscriptionError(f"unknown subscription '{subscription_id}'")
            if sub.active:
                sub = replace(sub, active=False)
                self._subscriptions[subscription_id] = sub
                self._journal.append({"op": "unsubscribe", "subscription_id": subscription_id})
            return sub

    def get_subscription(self, subscription_id: str) -> WebhookSubscription:
        sub = self._subscriptions.get(subscription_id)
        if sub is None:
            raise UnknownSubscriptionError(f"unknown subscription '{subscription_id}'")
        return sub

    def subscriptions_for(self, registration_id: str) -> list[WebhookSubscription]:
        with self._lock:
            subs = [
                s
                for s in self._subscriptions.values()
                if s.active and s.registration_id == registration_id
            ]
        return sorted(subs, key=lambda s: s.subscription_id)

    def list_subscriptions(self) -> list[WebhookSubscription]:
        return sorted(self._subscriptions.values(), key=lambda s: s.subscription_id)

    def eoi_index(self, chain_id: str) -> dict[tuple[str, str], EventRegistration]:
        """Live (contract, signature) lookup for one chain's job scope."""
        with self._lock:
            return {
                r.eoi: r
                for r in self._registrations.values()
                if r.chain_id == chain_id and not r.halted
            }

    def close(self) -> None:
        self._journal.close()
