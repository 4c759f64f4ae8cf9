"""End-to-end data completeness assurance.

Each sync job produces a checksum record holding the counts gathered at the
fetch boundary and at the store. The fetch identity requires that every raw
event in the scanned range was either persisted under a registered type or
deliberately skipped:

    count(allEvents) == count(nonPersisted) + sum(persistedPerType)

The notify identity requires that the hand-off to the queue covered every
persisted record times its active subscriptions. Any verification failure
raises an instant alarm; records are persisted for analytics and become
immutable once both verdicts are final.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from chainsync.errors import ImmutableRecordError, UnknownJobError
from chainsync.journal import JournalWriter, read_journal
from chainsync.util import WallClock

PASS = "pass"
FAIL = "fail"
PENDING = "pending"


@dataclass(frozen=True)
class ChecksumRecord:
    job_id: str
    registration_id: str
    chain_id: str
    from_height: int
    to_height: int
    kind: str  # regular | backfill
    count_all_events: int
    count_non_persisted: int
    per_type_persisted: dict[str, int]
    fetch_verdict: str
    notify_verdict: str = PENDING
    notification_sent: int | None = None
    notification_expected: int | None = None
    recorded_at: float = 0.0

    @property
    def persisted_total(self) -> int:
        return sum(self.per_type_persisted.values())

    @property
    def final(self) -> bool:
        return self.notify_verdict != PENDING

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "registration_id": self.registration_id,
            "chain_id": self.chain_id,
            "from_height": self.from_height,
            "to_height": self.to_height,
            "kind": self.kind,
            "count_all_events": self.count_all_events,
            "count_non_persisted": self.count_non_persisted,
            "per_type_persisted": dict(self.per_type_persisted),
            "fetch_verdict": self.fetch_verdict,
            "notify_verdict": self.notify_verdict,
            "notification_sent": self.notification_sent,
            "notification_expected": self.notification_expected,
            "recorded_at": self.recorded_at,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ChecksumRecord":
        return cls(**d)


@dataclass(frozen=True)
class AlarmEvent:
    alarm_id: int
    source: str
    detail: dict[str, Any]
    at: float

    def to_dict(self) -> dict[str, Any]:
        return {"alarm_id": self.alarm_id, "source": self.source, "detail": self.detail, "at": self.at}


class IntegrityService:
    """Verifies the two per-job checksum identities and keeps the alarm log."""

    def __init__(self, checksum_path: str | Path, alarm_path: str | Path, clock: Any = None):
        self._clock = clock or WallClock()
        self._lock = threading.RLock()
        self._records: dict[str, ChecksumRecord] = {}
        self._alarms: list[AlarmEvent] = []
        self.counters: dict[str, int] = {
            "jobs_total": 0,
            "checksum_failures_total": 0,
            "alarms_total": 0,
            "notifications_dead_total": 0,
        }
        self.persisted_by_type: dict[str, int] = {}
        for entry in read_journal(checksum_path):
            self._apply(ChecksumRecord.from_dict(entry), count=True)
        for entry in read_journal(alarm_path):
            self._alarms.append(
                AlarmEvent(entry["alarm_id"], entry["source"], entry["detail"], entry["at"])
            )
        self.counters["alarms_total"] = len(self._alarms)
        self._checksum_journal = JournalWriter(checksum_path)
        self._alarm_journal = JournalWriter(alarm_path)

    # -- state transitions -------------------------------------------------------

    def _apply(self, record: ChecksumRecord, count: bool) -> None:
        prev = self._records.get(record.job_id)
        self._records[record.job_id] = record
        if not count:
            return
        if prev is None:
            self.counters["jobs_total"] += 1
        if record.fetch_verdict == FAIL and (prev is None or prev.fetch_verdict != FAIL):
            self.counters["checksum_failures_total"] += 1
        if record.fetch_verdict == PASS and (prev is None or prev.fetch_verdict != PASS):
            for t, n in record.per_type_persisted.items():
                self.persisted_by_type[t] = self.persisted_by_type.get(t, 0) + n
        if record.notify_verdict == FAIL and (prev is None or prev.notify_verdict != FAIL):
            self.counters["checksum_failures_total"] += 1

    def verify_fetch_checksum(self, report: Any) -> ChecksumRecord:
        """Check the fetch identity for a finished job and persist the verdict.

        report is any object exposing the JobReport count fields. Failure is
        a verdict, not an exception; it raises an alarm and the caller must
        not advance the cursor.
        """
        identity_holds = report.count_all_events == report.count_non_persisted + sum(
            report.per_type_persisted.values()
        )
        record = ChecksumRecord(
            job_id=report.job_id,
            registration_id=report.registration_id,
            chain_id=report.chain_id,
            from_height=report.from_height,
            to_height=report.to_height,
            kind=report.kind,
            count_all_events=report.count_all_events,
            count_non_persisted=report.count_non_persisted,
            per_type_persisted=dict(report.per_type_persisted),
            fetch_verdict=PASS if identity_holds else FAIL,
            recorded_at=self._clock.now(),
        )
        with self._lock:
            prev = self._records.get(report.job_id)
            if prev is not None:
                same_fetch_side = (
                    prev.count_all_events == record.count_all_events
                    and prev.count_non_persisted == record.count_non_persisted
                    and prev.per_type_persisted == record.per_type_persisted
                    and prev.fetch_verdict == record.fetch_verdict
                )
                if same_fetch_side:
                    return prev  # re-verification is idempotent
                if prev.final:
                    raise ImmutableRecordError(
                        f"checksum record for job {report.job_id} is final"
                    )
                record = replace(record, notify_verdict=prev.notify_verdict,
                                 notification_sent=prev.notification_sent,
                                 notification_expected=prev.notification_expected)
            self._apply(record, count=True)
            self._checksum_journal.append(record.to_dict())
        if record.fetch_verdict == FAIL:
            self.raise_alarm(
                "fetch-checksum",
                {
                    "job_id": report.job_id,
                    "registration_id": report.registration_id,
                    "count_all_events": report.count_all_events,
                    "count_non_persisted": report.count_non_persisted,
                    "per_type_persisted": dict(report.per_type_persisted),
                    "identity": f"{report.count_all_events} != "
                    f"{report.count_non_persisted} + "
                    f"{sum(report.per_type_persisted.values())}",
                },
            )
        return record

    def verify_notify_checksum(
        self, job_id: str, sent_count: int, expected_count: int | None = None
    ) -> ChecksumRecord:
        """Check the notification hand-off count against the persisted counts.

        expected_count defaults to the job's summed per-type persisted count,
        the plain identity for one subscription per type; the dispatcher
        passes the record-times-subscriptions product when fan-out differs.
        """
        with self._lock:
            prev = self._records.get(job_id)
            if prev is None:
                raise UnknownJobError(f"no fetch checksum recorded for job '{job_id}'")
            expected = expected_count if expected_count is not None else prev.persisted_total
            verdict = PASS if sent_count == expected else FAIL
            if prev.final:
                if (
                    prev.notification_sent == sent_count
                    and prev.notification_expected == expected
                ):
                    return prev  # idempotent
                raise ImmutableRecordError(f"checksum record for job {job_id} is final")
            record = replace(
                prev,
                notify_verdict=verdict,
                notification_sent=sent_count,
                notification_expected=expected,
                recorded_at=self._clock.now(),
            )
            self._apply(record, count=True)
            self._checksum_journal.append(record.to_dict())
        if verdict == FAIL:
            self.raise_alarm(
                "notify-checksum",
                {
                    "job_id": job_id,
                    "sent": sent_count,
                    "expected": expected,
                    "missing": expected - sent_count,
                },
            )
        return record

    # -- alarms --------------------------------------------------------------------

    def raise_alarm(self, source: str, detail: dict[str, Any] | str) -> AlarmEvent:
        if isinstance(detail, str):
            detail = {"message": detail}
        with self._lock:
            alarm = AlarmEvent(
                alarm_id=len(self._alarms) + 1,
                source=source,
                detail=detail,
                at=self._clock.now(),
            )
            self._alarms.append(alarm)
            self.counters["alarms_total"] += 1
            self._alarm_journal.append(alarm.to_dict())
        return alarm

    def alarms(self) -> list[AlarmEvent]:
        with self._lock:
            return list(self._alarms)

    def count(self, counter: str, n: int = 1) -> None:
        with self._lock:
            self.counters[counter] = self.counters.get(counter, 0) + n

    # -- inspection ------------------------------------------------------------------

    def record_for(self, job_id: str) -> ChecksumRecord:
        record = self._records.get(job_id)
        if record is None:
            raise UnknownJobError(f"no checksum record for job '{job_id}'")
        return record

    def records(self) -> list[ChecksumRecord]:
        with self._lock:
            return sorted(self._records.values(), key=lambda r: (r.recorded_at, r.job_id))

    def failure_count(self) -> int:
        return self.counters["checksum_failures_total"]

    def checksum_analytics(
        self,
        chain_id: str | None = None,
        registration_id: str | None = None,
        from_ts: float | None = None,
        to_ts: float | None = None,
        interval: float = 60.0,
    ) -> dict[str, Any]:
        """Per-type processing totals, failure counts, and rate series."""
        if interval <= 0:
            raise ValueError("interval must be positive")
        with self._lock:
            rows = [
                r
                for r in self._records.values()
                if (chain_id is None or r.chain_id == chain_id)
                and (registration_id is None or r.registration_id == registration_id)
                and (from_ts is None or r.recorded_at >= from_ts)
                and (to_ts is None or r.recorded_at <= to_ts)
            ]
        per_type: dict[str, dict[str, Any]] = {}
        failed_jobs = 0
        for r in sorted(rows, key=lambda r: (r.recorded_at, r.job_id)):
            failed = r.fetch_verdict == FAIL or r.notify_verdict == FAIL
            if failed:
                failed_jobs += 1
            bucket = int(r.recorded_at // interval) * interval
            for t, n in r.per_type_persisted.items():
                stats = per_type.setdefault(
                    t, {"total": 0, "failures": 0, "series": {}}
                )
                stats["total"] += n
                stats["series"][bucket] = stats["series"].get(bucket, 0) + n
                if failed:
                    stats["failures"] += 1
        return {
            "jobs": len(rows),
            "failed_jobs": failed_jobs,
            "per_type": {
                t: {
                    "total": s["total"],
                    "failures": s["failures"],
                    "series": sorted(s["series"].items()),
                }
                for t, s in per_type.items()
            },
        }

    def render_metrics(self) -> str:
        """Counters in a line-based text exposition format."""
        with self._lock:
            lines = [f"{name} {value}" for name, value in sorted(self.counters.items())]
            for t in sorted(self.persisted_by_type):
                lines.append(f'events_persisted_total{{type="{t}"}} {self.persisted_by_type[t]}')
        return "\n".join(lines) + "\n"

    def close(self) -> None:
        self._checksum_journal.close()
        self._alarm_journal.close()
