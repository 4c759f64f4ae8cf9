"""Reflective hook path: durable notification queue and webhook delivery.

Persisting an event and telling the outside world about it are decoupled by
an on-disk queue so that receiver downtime never loses data. Delivery is
at-least-once: receivers deduplicate on the notification id embedded in the
payload. Entries leave the queue only when acknowledged (delivered or dead),
and per registration they are handed to the delivery pass in enqueue order.
"""

from __future__ import annotations

import hmac
import hashlib
import json
import secrets as _secrets
import threading
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import httpx

from chainsync.errors import InvalidUrlError
from chainsync.integrity import IntegrityService
from chainsync.journal import JournalWriter, read_journal
from chainsync.registry import Registry, WebhookSubscription
from chainsync.store import MappedRecord
from chainsync.util import WallClock, canonical_json, encode_value, sha_hex

WIRE_VERSION = 1

PENDING = "pending"
DELIVERED = "delivered"
DEAD = "dead"

Transport = Callable[[str, bytes, dict[str, str]], int]


@dataclass(frozen=True)
class RetryPolicy:
    base_delay: float = 1.0
    factor: float = 2.0
    max_attempts: int = 5

    def delay(self, attempt: int) -> float:
        return self.base_delay * self.factor ** (attempt - 1)


@dataclass
class Notification:
    notification_id: str
    subscription_id: str
    registration_id: str
    body: dict[str, Any]
    attempts: int = 0
    state: str = PENDING


@dataclass
class DeliveryReport:
    notification_id: str
    subscription_id: str
    url: str
    outcome: str  # delivered | retry | dead
    attempts: int
    status: int | None = None


def notification_id_for(record_key: tuple[str, int, int, int], subscription_id: str) -> str:
    return sha_hex("notification", *(str(p) for p in record_key), subscription_id)


def build_wire_body(
    record: MappedRecord, notification_id: str, subscription_id: str
) -> dict[str, Any]:
    """Versioned webhook payload for one persisted record."""
    chain_id, height, tx, log = record.record_key
    return {
        "version": WIRE_VERSION,
        "notification_id": notification_id,
        "subscription_id": subscription_id,
        "event_type": record.event_type,
        "schema_id": record.schema_id,
        "chain_id": chain_id,
        "block_height": height,
        "tx_index": tx,
        "log_index": log,
        "block_timestamp": record.block_timestamp,
        "columns": {k: encode_value(v) for k, v in record.columns.items()},
    }


def sign_body(secret: str, body: bytes) -> str:
    return hmac.new(secret.encode(), body, hashlib.sha256).hexdigest()


class HttpTransport:
    """Outbound POST over real HTTP."""

    def __init__(self, timeout: float = 5.0):
        self._client = httpx.Client(timeout=timeout)

    def __call__(self, url: str, body: bytes, headers: dict[str, str]) -> int:
        response = self._client.post(url, content=body, headers=headers)
        return response.status_code

    def close(self) -> None:
        self._client.close()


class InProcessRouter:
    """Transport that routes recv://name URLs to in-process receivers and
    falls back to a real HTTP transport for everything else."""

    def __init__(self, fallback: Transport | None = None):
        self._receivers: dict[str, Callable[[bytes, dict[str, str]], int]] = {}
        self._fallback = fallback

    def register(self, name: str, handler: Callable[[bytes, dict[str, str]], int]) -> None:
        self._receivers[name] = handler

    def __call__(self, url: str, body: bytes, headers: dict[str, str]) -> int:
        parsed = urllib.parse.urlparse(url)
        if parsed.scheme == "recv":
            handler = self._receivers.get(parsed.netloc)
            if handler is None:
                raise ConnectionError(f"no in-process receiver '{parsed.netloc}'")
            return handler(body, headers)
        if self._fallback is None:
            raise ConnectionError(f"no transport for {url}")
        return self._fallback(url, body, headers)


class DurableQueue:
    """Per-topic append-only log with acknowledged-id tracking.

    Entry ids deduplicate replays; an entry is pending until acknowledged and
    both the entries and the acks survive a process kill.
    """

    def __init__(self, directory: str | Path):
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._entries: dict[str, list[tuple[str, dict[str, Any]]]] = {}
        self._ids: dict[str, set[str]] = {}
        self._acked: dict[str, set[str]] = {}
        self._writers: dict[str, tuple[JournalWriter, JournalWriter]] = {}
        for log in sorted(self._dir.glob("*.log")):
            topic = log.stem
            entries = []
            ids = set()
            for e in read_journal(log):
                if e["id"] not in ids:
                    ids.add(e["id"])
                    entries.append((e["id"], e["data"]))
            self._entries[topic] = entries
            self._ids[topic] = ids
            acked = set()
            for a in read_journal(log.with_suffix(".ack")):
                acked.add(a["id"])
            self._acked[topic] = acked

    def _writer(self, topic: str) -> tuple[JournalWriter, JournalWriter]:
        w = self._writers.get(topic)
        if w is None:
            w = (
                JournalWriter(self._dir / f"{topic}.log"),
                JournalWriter(self._dir / f"{topic}.ack"),
            )
            self._writers[topic] = w
        return w

    def enqueue_many(self, topic: str, items: list[tuple[str, dict[str, Any]]]) -> int:
        """Append new entries; known ids (even acknowledged ones) are skipped."""
        with self._lock:
            ids = self._ids.setdefault(topic, set())
            entries = self._entries.setdefault(topic, [])
            self._acked.setdefault(topic, set())
            fresh = []
            for entry_id, data in items:
                if entry_id in ids:
                    continue
                ids.add(entry_id)
                entries.append((entry_id, data))
                fresh.append({"id": entry_id, "data": data})
            if fresh:
                self._writer(topic)[0].append_many(fresh)
            return len(fresh)

    def enqueue(self, topic: str, entry_id: str, data: dict[str, Any]) -> bool:
        return self.enqueue_many(topic, [(entry_id, data)]) == 1

    def pending(self, topic: str) -> list[tuple[str, dict[str, Any]]]:
        with self._lock:
            acked = self._acked.get(topic, set())
            return [(i, d) for i, d in self._entries.get(topic, []) if i not in acked]

    def ack(self, topic: str, entry_id: str) -> None:
        with self._lock:
            acked = self._acked.setdefault(topic, set())
            if entry_id in acked:
                return
            acked.add(entry_id)
            self._writer(topic)[1].append({"id": entry_id})

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def pending_total(self) -> int:
        with self._lock:
            return sum(len(self.pending(t)) for t in self._entries)

    def close(self) -> None:
        for log_w, ack_w in self._writers.values():
            log_w.close()
            ack_w.close()


class Dispatcher:
    """Webhook subscriptions plus the delivery workers over the queue.

    drop_hook is a test-only fault seam: a (record, subscription) pair it
    selects is silently never enqueued, which the notify checksum must then
    catch.
    """

    def __init__(
        self,
        queue: DurableQueue,
        registry: Registry,
        integrity: IntegrityService,
        dead_letter_path: str | Path,
        transport: Transport,
        policy: RetryPolicy = RetryPolicy(),
        clock: Any = None,
        drop_hook: Callable[[MappedRecord, WebhookSubscription], bool] | None = None,
    ):
        self._queue = queue
        self._registry = registry
        self._integrity = integrity
        self._transport = transport
        self.policy = policy
        self._clock = clock or WallClock()
        self.drop_hook = drop_hook
        self._attempts: dict[str, int] = {}
        self._retry_at: dict[str, float] = {}
        self._dead: set[str] = set()
        self._lock = threading.RLock()
        for entry in read_journal(dead_letter_path):
            self._dead.add(entry["notification_id"])
        self._dead_journal = JournalWriter(dead_letter_path)

    # -- subscriptions ---------------------------------------------------------

    def subscribe(self, registration_id: str, url: str) -> WebhookSubscription:
        parsed = urllib.parse.urlparse(url)
        if parsed.scheme not in ("http", "https", "recv") or not parsed.netloc:
            raise InvalidUrlError(f"malformed webhook url '{url}'")
        return self._registry.add_subscription(
            registration_id, url, secret=_secrets.token_hex(16)
        )

    def unsubscribe(self, subscription_id: str) -> WebhookSubscription:
        return self._registry.deactivate_subscription(subscription_id)

    # -- enqueue -----------------------------------------------------------------

    def enqueue_notifications(
        self, job_id: str, records: list[MappedRecord]
    ) -> tuple[int, int]:
        """Queue one notification per (record, active subscription).

        Returns (sent, expected): sent counts pairs durably handed to the
        queue in this call, counting replays already present as handed off;
        expected is the full product count the notify checksum demands.
        """
        sent = 0
        expected = 0
        by_topic: dict[str, list[tuple[str, dict[str, Any]]]] = {}
        for record in sorted(records, key=lambda r: r.record_key):
            for sub in self._registry.subscriptions_for(record.event_type):
                expected += 1
                if self.drop_hook is not None and self.drop_hook(record, sub):
                    continue  # injected loss: never enqueued, never counted sent
                nid = notification_id_for(record.record_key, sub.subscription_id)
                body = build_wire_body(record, nid, sub.subscription_id)
                by_topic.setdefault(record.event_type, []).append(
                    (nid, {"subscription_id": sub.subscription_id, "body": body})
                )
                sent += 1
        for topic, items in sorted(by_topic.items()):
            self._queue.enqueue_many(topic, items)
        return sent, expected

    # -- delivery ------------------------------------------------------------------

    def process(self, now: float | None = None) -> list[DeliveryReport]:
        """One delivery pass over every topic, honoring retry backoff."""
        now = self._clock.now() if now is None else now
        reports: list[DeliveryReport] = []
        for topic in self._queue.topics():
            for nid, data in self._queue.pending(topic):
                with self._lock:
                    if self._retry_at.get(nid, 0.0) > now:
                        continue
                reports.append(self._attempt(topic, nid, data, now))
        return reports

    def _attempt(self, topic: str, nid: str, data: dict[str, Any], now: float) -> DeliveryReport:
        sub_id = data["subscription_id"]
        sub = self._registry.get_subscription(sub_id)
        attempts = self._attempts.get(nid, 0) + 1
        self._attempts[nid] = attempts
        if not sub.active:
            # subscriber left while the entry was queued; retire it silently
            self._queue.ack(topic, nid)
            return DeliveryReport(nid, sub_id, sub.url, DELIVERED, attempts, None)
        try:
            body = canonical_json(data["body"]).encode()
        except (TypeError, ValueError) as exc:
            self._retire_dead(topic, nid, sub, attempts, f"serialization failure: {exc}")
            return DeliveryReport(nid, sub_id, sub.url, DEAD, attempts)
        headers = {
            "Content-Type": "application/json",
            "X-Chainsync-Notification": nid,
            "X-Chainsync-Signature": sign_body(sub.secret, body),
        }
        try:
            status: int | None = self._transport(sub.url, body, headers)
        except Exception:
            status = None
        if status is not None and 200 <= status < 300:
            self._queue.ack(topic, nid)
            with self._lock:
                self._retry_at.pop(nid, None)
            return DeliveryReport(nid, sub_id, sub.url, DELIVERED, attempts, status)
        if attempts >= self.policy.max_attempts:
            self._retire_dead(
                topic, nid, sub, attempts,
                f"gave up after {attempts} attempts (last status {status})",
            )
            return DeliveryReport(nid, sub_id, sub.url, DEAD, attempts, status)
        with self._lock:
            self._retry_at[nid] = now + self.policy.delay(attempts)
        return DeliveryReport(nid, sub_id, sub.url, "retry", attempts, status)

    def _retire_dead(
        self, topic: str, nid: str, sub: WebhookSubscription, attempts: int, reason: str
    ) -> None:
        self._queue.ack(topic, nid)
        with self._lock:
            if nid in self._dead:
                return
            self._dead.add(nid)
            self._dead_journal.append(
                {
                    "notification_id": nid,
                    "subscription_id": sub.subscription_id,
                    "url": sub.url,
                    "attempts": attempts,
                    "reason": reason,
                    "at": self._clock.now(),
                }
            )
        self._integrity.count("notifications_dead_total")
        self._integrity.raise_alarm(
            "notification-dead",
            {"notification_id": nid, "subscription_id": sub.subscription_id, "reason": reason},
        )

    def drain(self, advance: Callable[[float], None] | None = None, max_rounds: int = 10_000) -> int:
        """Deliver until the queue is empty or nothing further is due.

        advance, when given, moves a virtual clock forward to the next retry
        due time so backoff elapses instantly in tests and scenarios.
        """
        delivered = 0
        for _ in range(max_rounds):
            if self._queue.pending_total() == 0:
                break
            reports = self.process()
            delivered += sum(1 for r in reports if r.outcome == DELIVERED)
            if any(r.outcome == "retry" for r in reports) or not reports:
                with self._lock:
                    due = [t for t in self._retry_at.values() if t > self._clock.now()]
                if advance is not None and due:
                    advance(min(due) - self._clock.now())
                elif not reports:
                    break
        return delivered

    def pending_total(self) -> int:
        return self._queue.pending_total()

    def dead_total(self) -> int:
        return len(self._dead)

    def attempts_of(self, notification_id: str) -> int:
        return self._attempts.get(notification_id, 0)

    def close(self) -> None:
        self._dead_journal.close()
