"""Block sync engine.

Plans regular jobs per registration with the capped batch size, runs a
dedicated group of backfilling jobs over each registration's historical
range, and executes every job through the full pipeline: fetch, decode,
map, persist, verify the fetch checksum, hand notifications to the queue,
verify the notify checksum, then advance the cursor or mark the partition
done. A failed step never advances state; retries are idempotent at the
store and the queue.

Every job also probes the block hash recorded at the previous cursor
position before reading further. A mismatch means a reorganization deeper
than the chain's confirmation depth slipped past the safety margin; the
affected registration is halted with an alarm instead of guessing a repair.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

from chainsync.chainsim import ChainParams
from chainsync.dispatcher import Dispatcher, RetryPolicy
from chainsync.errors import ChainsyncError, FetchError, PersistenceError, SchemaError
from chainsync.fetcher import EventFetcher, FetchRequest, decode_event
from chainsync.integrity import FAIL, IntegrityService
from chainsync.registry import CursorUpdate, EventRegistration, Registry
from chainsync.store import EventStore, MappedRecord, apply_schema
from chainsync.util import WallClock

REGULAR = "regular"
BACKFILL = "backfill"


def compute_batch(synced_latest: int, chain_head: int, params: ChainParams) -> int:
    """Blocks the next regular job may scan; zero or less means skip this cycle.

    The cap is the chain's max batch; the budget is how far the cursor lags
    the head after reserving the confirmation depth.
    """
    return min(params.max_batch, chain_head - params.confirmation_depth - synced_latest)


@dataclass(frozen=True)
class SyncJob:
    job_id: str
    registration_id: str
    chain_id: str
    kind: str  # regular | backfill
    from_height: int
    to_height: int
    attempt: int = 1

    def retry(self) -> "SyncJob":
        return SyncJob(
            self.job_id, self.registration_id, self.chain_id, self.kind,
            self.from_height, self.to_height, self.attempt + 1,
        )


@dataclass
class JobReport:
    job_id: str
    registration_id: str
    chain_id: str
    kind: str
    from_height: int
    to_height: int
    status: str = "success"
    count_all_events: int = 0
    count_non_persisted: int = 0
    per_type_persisted: dict[str, int] = field(default_factory=dict)
    inserted: int = 0
    duplicates: int = 0
    notification_sent: int | None = None
    notification_expected: int | None = None
    error_stage: str | None = None  # fetch | schema | persist | checksum | reorg | halted
    error: str | None = None
    retryable: bool = True
    attempt: int = 1


@dataclass
class TickReport:
    executed: list[JobReport] = field(default_factory=list)
    parked: list[str] = field(default_factory=list)

    @property
    def failures(self) -> list[JobReport]:
        return [r for r in self.executed if r.status != "success"]


def _job_id(registration_id: str, kind: str, from_height: int, to_height: int) -> str:
    # deterministic so a re-planned job after a crash maps onto the same
    # checksum record instead of double-counting
    return f"{registration_id[:12]}-{kind[0]}-{from_height}-{to_height}"


class SyncEngine:
    def __init__(
        self,
        registry: Registry,
        fetcher: EventFetcher,
        store: EventStore,
        integrity: IntegrityService,
        dispatcher: Dispatcher,
        chain_params: Mapping[str, ChainParams],
        worker_count: int = 4,
        partition_size: int | None = None,
        retry_policy: RetryPolicy = RetryPolicy(),
        clock: Any = None,
    ):
        self.registry = registry
        self.fetcher = fetcher
        self.store = store
        self.integrity = integrity
        self.dispatcher = dispatcher
        self.chain_params = dict(chain_params)
        self.worker_count = worker_count
        self.partition_size = partition_size
        self.retry_policy = retry_policy
        self._clock = clock or WallClock()
        self._lock = threading.RLock()
        self._seq = itertools.count()
        self._retries: list[tuple[float, int, SyncJob]] = []  # heap by due time
        self._scheduled: set[str] = set()  # job ids waiting in the retry heap
        self._active_regular: dict[str, str] = {}  # registration -> job id
        self._parked: set[str] = set()
        self._inflight_ids: set[str] = set()
        self.job_log: dict[str, JobReport] = {}  # last report per job id

    # -- planning ---------------------------------------------------------------

    def plan_regular_jobs(
        self,
        registrations: list[EventRegistration],
        heads: Mapping[str, int],
    ) -> list[SyncJob]:
        """One job per lagging registration, covering the next batch of blocks."""
        jobs: list[SyncJob] = []
        with self._lock:
            for reg in sorted(registrations, key=lambda r: r.registration_id):
                if reg.halted or reg.registration_id in self._active_regular:
                    continue
                head = heads.get(reg.chain_id)
                if head is None:
                    continue
                batch = compute_batch(
                    reg.synced_latest_block_height, head, self.chain_params[reg.chain_id]
                )
                if batch < 1:
                    continue
                lo = reg.synced_latest_block_height + 1
                hi = reg.synced_latest_block_height + batch
                job = SyncJob(
                    _job_id(reg.registration_id, REGULAR, lo, hi),
                    reg.registration_id,
                    reg.chain_id,
                    REGULAR,
                    lo,
                    hi,
                )
                self._active_regular[reg.registration_id] = job.job_id
                jobs.append(job)
        return jobs

    def plan_backfill_jobs(
        self, registration: EventRegistration, partition_size: int | None = None
    ) -> list[SyncJob]:
        """Partition the historical range into independent jobs.

        The ranges are contiguous, non-overlapping, and cover
        [init_block_height, synced_start_block_height] exactly, so together
        with regular jobs starting just above the start cursor the whole
        history is scanned once.
        """
        pending = registration.backfill_pending_range
        if pending is None:
            return []
        size = partition_size or self.partition_size
        if size is None:
            size = self.chain_params[registration.chain_id].max_batch
        if size < 1:
            raise ValueError("partition size must be >= 1")
        lo, hi = pending
        jobs = []
        for start in range(lo, hi + 1, size):
            end = min(start + size - 1, hi)
            jobs.append(
                SyncJob(
                    _job_id(registration.registration_id, BACKFILL, start, end),
                    registration.registration_id,
                    registration.chain_id,
                    BACKFILL,
                    start,
                    end,
                )
            )
        return jobs

    # -- execution -----------------------------------------------------------------

    def execute_job(self, job: SyncJob) -> JobReport:
        report = JobReport(
            job_id=job.job_id,
            registration_id=job.registration_id,
            chain_id=job.chain_id,
            kind=job.kind,
            from_height=job.from_height,
            to_height=job.to_height,
            attempt=job.attempt,
        )
        reg = self.registry.get(job.registration_id)
        if reg.halted:
            report.status = "failed"
            report.error_stage = "halted"
            report.error = reg.halted_reason
            report.retryable = False
            return report

        adapter = self.fetcher.adapter(job.chain_id)

        if job.kind == REGULAR and reg.last_scanned_hash is not None:
            probe_height = job.from_height - 1
            if probe_height == reg.synced_latest_block_height:
                current = adapter.get_header(probe_height).block_hash
                if current != reg.last_scanned_hash:
                    reason = (
                        f"block hash mismatch at height {probe_height}: a "
                        f"reorganization deeper than the confirmation depth occurred"
                    )
                    self.registry.halt_registration(job.registration_id, reason)
                    self.integrity.raise_alarm(
                        "reorg-detected",
                        {
                            "registration_id": job.registration_id,
                            "chain_id": job.chain_id,
                            "height": probe_height,
                            "expected_hash": reg.last_scanned_hash,
                            "observed_hash": current,
                        },
                    )
                    report.status = "failed"
                    report.error_stage = "reorg"
                    report.error = reason
                    report.retryable = False
                    return report

        try:
            raw = self.fetcher.fetch_raw(
                FetchRequest(job.chain_id, job.from_height, job.to_height)
            )
        except (FetchError, ChainsyncError) as exc:
            report.status = "failed"
            report.error_stage = "fetch"
            report.error = str(exc)
            return report

        report.count_all_events = raw.raw_count
        scope = self.registry.eoi_index(job.chain_id)
        timestamps: dict[int, int] = {}
        buckets: dict[str, list[MappedRecord]] = {}
        try:
            for ev in raw.events:
                target = scope.get((ev.contract_address, ev.event_signature))
                if target is None or ev.block_height < target.init_block_height:
                    report.count_non_persisted += 1
                    continue
                ts = timestamps.get(ev.block_height)
                if ts is None:
                    ts = adapter.get_header(ev.block_height).timestamp
                    timestamps[ev.block_height] = ts
                decoded = decode_event(ev, target, ts)
                schema = self.registry.get_schema(target.schema_id)
                record = apply_schema(decoded, schema)
                buckets.setdefault(target.registration_id, []).append(record)
        except SchemaError as exc:
            report.status = "failed"
            report.error_stage = "schema"
            report.error = str(exc)
            return report

        acked_records: list[MappedRecord] = []
        try:
            for rid in sorted(buckets):
                result = self.store.persist(buckets[rid])
                report.per_type_persisted[rid] = len(result.acked)
                report.inserted += result.inserted
                report.duplicates += result.duplicates
                acked_records.extend(result.acked)
        except (PersistenceError, OSError) as exc:
            report.status = "failed"
            report.error_stage = "persist"
            report.error = str(exc)
            return report

        checksum = self.integrity.verify_fetch_checksum(report)
        if checksum.fetch_verdict == FAIL:
            report.status = "failed"
            report.error_stage = "checksum"
            report.error = (
                f"fetch checksum mismatch: {report.count_all_events} != "
                f"{report.count_non_persisted} + {sum(report.per_type_persisted.values())}"
            )
            return report

        sent, expected = self.dispatcher.enqueue_notifications(job.job_id, acked_records)
        report.notification_sent = sent
        report.notification_expected = expected
        self.integrity.verify_notify_checksum(job.job_id, sent, expected)

        if job.kind == REGULAR:
            end_hash = adapter.get_header(job.to_height).block_hash
            self.registry.advance_latest(
                CursorUpdate(job.registration_id, job.to_height, job.job_id, end_hash)
            )
        else:
            remaining = self.registry.mark_backfill_done(
                job.registration_id, (job.from_height, job.to_height), job.job_id
            )
            if remaining == 0 and self.registry.backfill_state(job.registration_id).complete:
                self.registry.complete_backfill(job.registration_id)
        return report

    # -- scheduling loop ----------------------------------------------------------------

    def _due_retries(self, now: float) -> list[SyncJob]:
        jobs = []
        with self._lock:
            while self._retries and self._retries[0][0] <= now:
                _, _, job = heapq.heappop(self._retries)
                self._scheduled.discard(job.job_id)
                jobs.append(job)
        return jobs

    def _plan_backfills(self) -> list[SyncJob]:
        jobs: list[SyncJob] = []
        with self._lock:
            busy = set(self._scheduled) | set(self._parked)
        for reg in self.registry.list_registrations():
            if reg.halted or reg.backfill_pending_range is None:
                continue
            state = self.registry.backfill_state(reg.registration_id)
            if not state.planned:
                planned = self.plan_backfill_jobs(reg)
                self.registry.record_backfill_plan(
                    reg.registration_id, [(j.from_height, j.to_height) for j in planned]
                )
                state = self.registry.backfill_state(reg.registration_id)
            if state.planned and not state.outstanding:
                # every partition finished but the collapse was lost to a
                # crash between the last mark and the cursor update
                self.registry.complete_backfill(reg.registration_id)
                continue
            for lo, hi in sorted(state.outstanding):
                job = SyncJob(
                    _job_id(reg.registration_id, BACKFILL, lo, hi),
                    reg.registration_id,
                    reg.chain_id,
                    BACKFILL,
                    lo,
                    hi,
                )
                if job.job_id not in busy and job.job_id not in self._inflight_ids:
                    jobs.append(job)
        return jobs

    def tick(self, now: float | None = None) -> TickReport:
        """One scheduler cycle: plan, execute in the worker pool, settle."""
        now = self._clock.now() if now is None else now
        tick_report = TickReport()

        heads = {cid: self.fetcher.adapter(cid).latest_height() for cid in self.fetcher.chain_ids()}
        jobs = self._due_retries(now)
        self._inflight_ids = {j.job_id for j in jobs}
        backfills = self._plan_backfills()
        jobs.extend(backfills)
        self._inflight_ids.update(j.job_id for j in backfills)
        jobs.extend(self.plan_regular_jobs(self.registry.list_registrations(), heads))

        if jobs:
            with ThreadPoolExecutor(max_workers=self.worker_count) as pool:
                reports = list(pool.map(self.execute_job, jobs))
        else:
            reports = []
        self._inflight_ids = set()

        for job, report in zip(jobs, reports):
            self.job_log[job.job_id] = report
            tick_report.executed.append(report)
            if report.status == "success" or not report.retryable:
                with self._lock:
                    if self._active_regular.get(job.registration_id) == job.job_id:
                        del self._active_regular[job.registration_id]
                    self._parked.discard(job.job_id)
                continue
            if job.attempt >= self.retry_policy.max_attempts:
                # parked jobs keep their slot: a regular job that exhausted its
                # retries stalls its registration rather than looping alarms
                with self._lock:
                    self._parked.add(job.job_id)
                tick_report.parked.append(job.job_id)
                self.integrity.raise_alarm(
                    "job-parked",
                    {
                        "job_id": job.job_id,
                        "registration_id": job.registration_id,
                        "attempts": job.attempt,
                        "stage": report.error_stage,
                        "error": report.error,
                    },
                )
            else:
                due = now + self.retry_policy.delay(job.attempt)
                with self._lock:
                    heapq.heappush(self._retries, (due, next(self._seq), job.retry()))
                    self._scheduled.add(job.job_id)
        return tick_report

    # -- convenience -----------------------------------------------------------------

    def pending_work(self) -> bool:
        """True while any registration lags, backfills remain, or retries wait.

        Parked jobs do not count: they stall until operator intervention or a
        process restart, which clears the in-memory park list.
        """
        with self._lock:
            if self._retries:
                return True
            parked = set(self._parked)
            active = dict(self._active_regular)
        for reg in self.registry.list_registrations():
            if reg.halted:
                continue
            if reg.backfill_pending_range is not None:
                state = self.registry.backfill_state(reg.registration_id)
                outstanding = {
                    _job_id(reg.registration_id, BACKFILL, lo, hi)
                    for lo, hi in state.outstanding
                }
                if not state.planned or outstanding - parked:
                    return True
            if active.get(reg.registration_id) in parked:
                continue
            head = self.fetcher.adapter(reg.chain_id).latest_height()
            if compute_batch(reg.synced_latest_block_height, head, self.chain_params[reg.chain_id]) >= 1:
                return True
        return False

    def parked_jobs(self) -> list[str]:
        with self._lock:
            return sorted(self._parked)
