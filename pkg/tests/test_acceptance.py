"""Acceptance suite: one test per criterion, at the stated tolerances.

Run with `pytest -v tests/test_acceptance.py`; each criterion reports as its
own pass/fail line. Tests print a summary line as well for -s runs.
"""

import json
import random
import signal
import time
from pathlib import Path

import pytest

from chainsync.chainsim import ChainParams, ChainSimulator, EventSpec
from chainsync.dispatcher import RetryPolicy, notification_id_for
from chainsync.engine import SyncJob, compute_batch
from chainsync.fetcher import EventFetcher, FetchRequest, SimChainAdapter
from chainsync.receiver import RecordingReceiver
from chainsync.store import QuerySpec

from conftest import (
    TRANSFER_EOI,
    TRANSFER_SCHEMA,
    build_stack,
    oracle_dump,
    transfer_spec,
)
from test_scenario import run_scenario_subprocess, state_summary

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _report(criterion, detail):
    print(f"\nACCEPTANCE criterion {criterion}: PASS - {detail}")


# -- 1. batch formula conformance ------------------------------------------------


def test_criterion_01_batch_formula_conformance():
    rng = random.Random(0xBA7C4)
    started = time.monotonic()
    for _ in range(1000):
        mb = rng.randint(1, 10_000)
        cl = rng.randint(0, 5_000_000)
        gamma = rng.randint(0, 500)
        synced = rng.randint(0, 5_000_000)
        params = ChainParams("c", max_batch=mb, confirmation_depth=gamma)
        oracle = min(mb, cl - gamma - synced)  # independent one-line oracle
        assert compute_batch(synced, cl, params) == oracle
    elapsed = time.monotonic() - started
    assert elapsed < 1.0, f"1000 evaluations took {elapsed:.3f}s"
    _report(1, f"1000 randomized tuples exact in {elapsed * 1000:.0f} ms")


# -- 2. end-to-end completeness ---------------------------------------------------


CONTRACTS = [f"0xc{i}" for i in range(5)]
FLOW_CONTRACTS = [f"A.f8d6.C{i}" for i in range(5)]
SIGNATURE = "Transfer(address,address,uint256)"


def _mint_many(stack, chain, contracts, rng, blocks, events_per_block):
    total = 0
    for _ in range(blocks):
        specs = []
        for _ in range(events_per_block):
            contract = rng.choice(contracts)
            specs.append(
                EventSpec(
                    contract,
                    SIGNATURE,
                    [("from", f"0x{rng.randrange(16**6):06x}"),
                     ("to", f"0x{rng.randrange(16**6):06x}"),
                     ("tokenId", rng.randrange(500))],
                )
            )
        stack.sim.mint_block(chain, specs)
        total += len(specs)
    return total


def _register_all(stack, chain, contracts):
    regs = []
    for contract in contracts:
        head = stack.sim.latest_height(chain).latest_height
        gamma = stack.sim.params(chain).confirmation_depth
        reg = stack.registry.register_event(
            chain, contract, SIGNATURE, 0, TRANSFER_SCHEMA,
            max(0, head - gamma),
        )
        stack.store.bind_schema(reg.registration_id, TRANSFER_SCHEMA)
        regs.append(reg)
    return regs


def _build_two_chain_stack(tmp_path, seed=1234, max_batch=200, workers=8):
    return build_stack(
        tmp_path,
        chains=[
            ChainParams("ethsim", max_batch=max_batch, confirmation_depth=5),
            ChainParams("flowsim", max_batch=max_batch, confirmation_depth=0, sporked=True),
        ],
        sporks={"flowsim": [(0, 299, "s0"), (300, 599, "s1"), (600, None, "s2")]},
        seed=seed,
        worker_count=workers,
    )


def test_criterion_02_end_to_end_completeness(tmp_path):
    started = time.monotonic()
    stack = _build_two_chain_stack(tmp_path)
    rng = random.Random(515)
    total = 0
    total += _mint_many(stack, "ethsim", CONTRACTS, rng, blocks=500, events_per_block=30)
    total += _mint_many(stack, "flowsim", FLOW_CONTRACTS, rng, blocks=500, events_per_block=30)
    regs = _register_all(stack, "ethsim", CONTRACTS)
    regs += _register_all(stack, "flowsim", FLOW_CONTRACTS)
    assert len(regs) >= 10
    for tick in range(35):
        total += _mint_many(stack, "ethsim", CONTRACTS, rng, blocks=10, events_per_block=30)
        total += _mint_many(stack, "flowsim", FLOW_CONTRACTS, rng, blocks=10, events_per_block=30)
        stack.sim.reorg("ethsim", rng.randint(1, 5))  # depth <= gamma, every tick
        stack.engine.tick()
        stack.clock.advance(1.0)
    assert total >= 50_000
    stack.run_until_idle(max_ticks=300)

    got = stack.store.canonical_dump()
    expected = oracle_dump(stack)
    assert got == expected, (
        f"store diverged: {len(got)} stored vs {len(expected)} expected"
    )
    assert stack.integrity.failure_count() == 0
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"scenario took {elapsed:.1f}s"
    stack.close()
    _report(2, f"{total} minted events, {len(got)} records byte-equal in {elapsed:.1f}s")


# -- 3. reorg safety ------------------------------------------------------------------


def test_criterion_03_reorg_safety(tmp_path):
    def run(with_reorgs, where):
        stack = build_stack(tmp_path / where, seed=77)
        rng = random.Random(42)
        _mint_many(stack, "ethsim", CONTRACTS, rng, blocks=60, events_per_block=4)
        _register_all(stack, "ethsim", CONTRACTS)
        for i in range(25):
            _mint_many(stack, "ethsim", CONTRACTS, rng, blocks=3, events_per_block=4)
            if with_reorgs:
                stack.sim.reorg("ethsim", 1 + i % 5)  # capped at gamma = 5
            stack.engine.tick()
            stack.clock.advance(1.0)
        stack.run_until_idle()
        dump = stack.store.canonical_dump()
        failures = stack.integrity.failure_count()
        stack.close()
        return dump, failures

    reorged, f1 = run(True, "a")
    clean, f2 = run(False, "b")
    assert reorged == clean
    assert f1 == 0 and f2 == 0

    # depth gamma + 1 must halt the registration with exactly one alarm
    stack = build_stack(tmp_path / "deep", seed=78)
    rng = random.Random(43)
    _mint_many(stack, "ethsim", [CONTRACTS[0]], rng, blocks=40, events_per_block=2)
    (reg,) = _register_all(stack, "ethsim", [CONTRACTS[0]])
    _mint_many(stack, "ethsim", [CONTRACTS[0]], rng, blocks=10, events_per_block=2)
    stack.run_until_idle()
    stack.sim.mint_block("ethsim", [])
    stack.sim.reorg("ethsim", 6)
    stack.engine.tick()  # reads uncle content at the margin
    stack.clock.advance(1.0)
    stack.sim.mint_block("ethsim", [])  # trunk wins; scanned hash is now stale
    for _ in range(4):
        stack.engine.tick()
        stack.clock.advance(1.0)
    assert stack.registry.get(reg.registration_id).halted
    alarms = [a for a in stack.integrity.alarms() if a.source == "reorg-detected"]
    assert len(alarms) == 1
    stack.close()
    _report(3, f"{len(reorged)} records equal reorg-free twin; depth-6 reorg halted with 1 alarm")


# -- 4. checksum sensitivity ------------------------------------------------------------


def _fault_trial(tmp_path, rng, point, trial):
    holder = {}
    hooks = {"fetch_drop": None, "store_drop": None, "dispatch_drop": None}
    if point == "fetch":
        hooks["fetch_drop"] = lambda ev: ev.identity == holder.get("target")
    elif point == "store":
        hooks["store_drop"] = lambda rec: rec.record_key == holder.get("target")
    else:
        hooks["dispatch_drop"] = lambda rec, sub: rec.record_key == holder.get("target")

    stack = build_stack(
        tmp_path / f"{point}-{trial}",
        chains=[ChainParams("ethsim", max_batch=50, confirmation_depth=2)],
        seed=trial,
        retry_policy=RetryPolicy(base_delay=0.5, factor=2.0, max_attempts=1),
        **hooks,
    )
    for height in range(8):
        specs = [transfer_spec(rng.randrange(50)) for _ in range(rng.randint(1, 3))]
        if rng.random() < 0.3:
            specs.append(EventSpec("0xnoise", "Noise()", [("n", height)]))
        stack.sim.mint_block("ethsim", specs)
    reg = stack.register_transfer(init=0)
    stack.router.register("sink", RecordingReceiver("sink"))
    stack.dispatcher.subscribe(reg.registration_id, "recv://sink")

    head = stack.sim.latest_height("ethsim").latest_height
    candidates = stack.sim.all_canonical_events("ethsim", 0, head - 2, [TRANSFER_EOI])
    target = rng.choice(candidates)
    holder["target"] = target.identity

    stack.run_until_idle(max_ticks=30)
    records = stack.integrity.records()
    covering = [
        r
        for r in records
        if r.registration_id == reg.registration_id
        and r.from_height <= target.block_height <= r.to_height
    ]
    assert covering, "no checksum record covers the dropped event"
    if point == "dispatch":
        flipped = any(r.notify_verdict == "fail" for r in covering)
    else:
        flipped = any(r.fetch_verdict == "fail" for r in covering)
    stack.close()
    return flipped


@pytest.mark.parametrize("point", ["fetch", "store", "dispatch"])
def test_criterion_04_checksum_sensitivity(tmp_path, point):
    rng = random.Random(hash(point) & 0xFFFF)
    flips = sum(_fault_trial(tmp_path, rng, point, trial) for trial in range(100))
    assert flips == 100, f"{point} drop flipped only {flips}/100 verdicts"
    _report(4, f"{point} drop flipped its checksum verdict in 100/100 trials")


# -- 5. backfill cursor collapse and range accounting ---------------------------------------


def test_criterion_05_backfill_collapse_and_exact_ranges(tmp_path):
    stack = _build_two_chain_stack(tmp_path, seed=99, max_batch=60, workers=4)
    rng = random.Random(5)
    _mint_many(stack, "ethsim", CONTRACTS[:3], rng, blocks=310, events_per_block=3)
    _mint_many(stack, "flowsim", FLOW_CONTRACTS[:2], rng, blocks=650, events_per_block=2)
    regs = _register_all(stack, "ethsim", CONTRACTS[:3])
    regs += _register_all(stack, "flowsim", FLOW_CONTRACTS[:2])
    assert all(r.init_block_height < r.synced_start_block_height for r in regs)
    for _ in range(10):
        _mint_many(stack, "ethsim", CONTRACTS[:3], rng, blocks=5, events_per_block=3)
        _mint_many(stack, "flowsim", FLOW_CONTRACTS[:2], rng, blocks=5, events_per_block=2)
        stack.engine.tick()
        stack.clock.advance(1.0)
    stack.run_until_idle()

    for reg in (stack.registry.get(r.registration_id) for r in regs):
        assert reg.synced_start_block_height == reg.init_block_height
        head = stack.sim.latest_height(reg.chain_id).latest_height
        gamma = stack.sim.params(reg.chain_id).confirmation_depth
        ranges = sorted(
            (rec.from_height, rec.to_height)
            for rec in stack.integrity.records()
            if rec.registration_id == reg.registration_id and rec.fetch_verdict == "pass"
        )
        # range-accounting oracle: no overlap, no gap, exact cover
        assert ranges[0][0] == reg.init_block_height
        assert ranges[-1][1] == head - gamma
        for (_, prev_hi), (lo, _) in zip(ranges, ranges[1:]):
            assert lo == prev_hi + 1, f"gap or overlap at {prev_hi} -> {lo}"
    stack.close()
    _report(5, f"{len(regs)} registrations collapsed; job ranges partition [init, head - depth]")


# -- 6. spork equivalence ----------------------------------------------------------------------


def test_criterion_06_spork_equivalence():
    rng = random.Random(606)
    for trial in range(500):
        head_target = rng.randint(20, 70)
        n_sporks = rng.randint(1, 6)
        bounds = sorted(rng.sample(range(1, head_target), min(n_sporks - 1, head_target - 1)))
        entries = []
        start = 0
        for i, b in enumerate(bounds):
            entries.append((start, b - 1, f"e{i}"))
            start = b
        entries.append((start, None, f"e{len(bounds)}"))

        sim = ChainSimulator(trial)
        sim.add_chain(
            ChainParams("flowsim", max_batch=50, confirmation_depth=0, sporked=True),
            sporks=entries,
        )
        for height in range(head_target + 1):
            specs = [transfer_spec(rng.randrange(30)) for _ in range(rng.randint(0, 3))]
            sim.mint_block("flowsim", specs)
        fetcher = EventFetcher()
        fetcher.register_adapter(SimChainAdapter(sim, "flowsim"))
        lo = rng.randint(0, head_target)
        hi = rng.randint(lo, head_target)
        split_fetch = fetcher.fetch_raw(FetchRequest("flowsim", lo, hi)).events
        monolithic = sim.all_canonical_events("flowsim", lo, hi)
        assert split_fetch == monolithic, f"trial {trial} diverged on [{lo}, {hi}]"
    _report(6, "500 random (spork table, range) pairs match the monolithic accessor exactly")


# -- 7. idempotent persistence -------------------------------------------------------------------


def test_criterion_07_idempotent_persistence(tmp_path):
    stack = _build_two_chain_stack(tmp_path, seed=717, max_batch=40, workers=4)
    rng = random.Random(7)
    _mint_many(stack, "ethsim", [CONTRACTS[0]], rng, blocks=150, events_per_block=4)
    _mint_many(stack, "flowsim", [FLOW_CONTRACTS[0]], rng, blocks=620, events_per_block=2)
    _register_all(stack, "ethsim", [CONTRACTS[0]])
    _register_all(stack, "flowsim", [FLOW_CONTRACTS[0]])
    stack.run_until_idle()

    first_reports = [r for r in stack.engine.job_log.values() if r.status == "success"]
    assert first_reports
    assert all(r.duplicates == 0 for r in first_reports)
    before = stack.store.canonical_dump()

    for report in first_reports:
        job = SyncJob(
            report.job_id, report.registration_id, report.chain_id,
            report.kind, report.from_height, report.to_height, attempt=2,
        )
        replay = stack.engine.execute_job(job)
        assert replay.status == "success"
        assert replay.inserted == 0
        assert replay.duplicates == report.inserted  # dup counter equals first-run inserts

    assert stack.store.canonical_dump() == before
    assert stack.integrity.failure_count() == 0
    stack.close()
    _report(7, f"replayed {len(first_reports)} jobs; zero store rows changed")


# -- 8. delivery guarantee ---------------------------------------------------------------------


def _delivery_stack(tmp_path, receiver, max_attempts):
    stack = build_stack(
        tmp_path,
        chains=[ChainParams("ethsim", max_batch=100, confirmation_depth=3)],
        seed=88,
        delivery_policy=RetryPolicy(base_delay=0.5, factor=2.0, max_attempts=max_attempts),
    )
    stack.router.register(receiver.name, receiver)
    rng = random.Random(8)
    _mint_many(stack, "ethsim", [CONTRACTS[0]], rng, blocks=80, events_per_block=3)
    (reg,) = _register_all(stack, "ethsim", [CONTRACTS[0]])
    sub = stack.dispatcher.subscribe(reg.registration_id, f"recv://{receiver.name}")
    stack.run_until_idle()
    return stack, reg, sub


def test_criterion_08_delivery_guarantee(tmp_path):
    flaky = RecordingReceiver("flaky", failure_rate=0.30, seed=808)
    stack, reg, sub = _delivery_stack(tmp_path / "flaky", flaky, max_attempts=12)
    records = stack.store.query(
        QuerySpec(event_types=(reg.registration_id,), limit=1_000_000)
    ).records
    expected = {notification_id_for(r.record_key, sub.subscription_id) for r in records}
    assert expected, "no notifications generated"
    assert flaky.seen == expected  # dedup set equals the record x subscription product
    assert stack.dispatcher.dead_total() == 0
    assert stack.integrity.failure_count() == 0
    stack.close()

    hostile = RecordingReceiver("down", failure_rate=1.0, seed=808)
    stack2, reg2, sub2 = _delivery_stack(tmp_path / "down", hostile, max_attempts=5)
    records2 = stack2.store.query(
        QuerySpec(event_types=(reg2.registration_id,), limit=1_000_000)
    ).records
    expected2 = {notification_id_for(r.record_key, sub2.subscription_id) for r in records2}
    assert stack2.dispatcher.dead_total() == len(expected2)
    for nid in expected2:
        assert stack2.dispatcher.attempts_of(nid) == 5  # dead after exactly maxAttempts
    dead_alarms = [a for a in stack2.integrity.alarms() if a.source == "notification-dead"]
    assert len(dead_alarms) == len(expected2)
    stack2.close()
    _report(
        8,
        f"flaky receiver converged on {len(expected)} notifications with 0 dead; "
        f"hostile receiver dead-lettered {len(expected2)} after exactly 5 attempts",
    )


# -- 9. pagination soundness -------------------------------------------------------------------


def _random_query(rng, reg_ids, addresses):
    filters = []
    for _ in range(rng.randrange(0, 3)):
        kind = rng.randrange(3)
        if kind == 0:
            filters.append(("tokenId", rng.choice(["<", "<=", ">", ">=", "=", "!="]),
                            rng.randrange(500)))
        elif kind == 1:
            filters.append(("block_height", rng.choice(["<", ">="]), rng.randrange(250)))
        else:
            filters.append(("to", "=", rng.choice(addresses)))
    sort_cols = rng.sample(["tokenId", "block_timestamp", "from", "block_height"],
                           rng.randrange(0, 3))
    sort = tuple((c, rng.choice(["asc", "desc"])) for c in sort_cols)
    event_types = None
    if rng.random() < 0.4:
        event_types = tuple(rng.sample(reg_ids, rng.randint(1, len(reg_ids))))
    return QuerySpec(
        event_types=event_types,
        filters=tuple(filters),
        sort=sort,
        limit=rng.randint(3, 25),
    )


def test_criterion_09_pagination_soundness(tmp_path):
    stack = build_stack(
        tmp_path,
        chains=[ChainParams("ethsim", max_batch=100, confirmation_depth=3)],
        seed=909, worker_count=4,
    )
    rng = random.Random(9)
    _mint_many(stack, "ethsim", CONTRACTS[:3], rng, blocks=150, events_per_block=5)
    regs = _register_all(stack, "ethsim", CONTRACTS[:3])
    stack.run_until_idle()
    reg_ids = [r.registration_id for r in regs]
    addresses = sorted({r.value_of("to") for r in stack.store.all_records()})[:20]

    for trial in range(200):
        spec = _random_query(rng, reg_ids, addresses)
        full = stack.store.query(
            QuerySpec(spec.event_types, spec.filters, spec.sort, limit=1_000_000)
        ).records
        seen = []
        cursor = None
        while True:
            page = stack.store.query(
                QuerySpec(spec.event_types, spec.filters, spec.sort, spec.limit, cursor=cursor)
            )
            keys = [r.record_key for r in page.records]
            assert not set(keys) & set(seen), f"trial {trial}: overlapping pages"
            seen.extend(keys)
            cursor = page.next_cursor
            if cursor is None:
                break
        assert seen == [r.record_key for r in full], f"trial {trial}: pages != full result"

    # stability under concurrent ingestion of new blocks
    spec = QuerySpec(sort=(("tokenId", "asc"), ("block_height", "desc")), limit=9)
    initial = [
        r.record_key
        for r in stack.store.query(QuerySpec(sort=spec.sort, limit=1_000_000)).records
    ]
    walked = []
    cursor = None
    while True:
        page = stack.store.query(QuerySpec(sort=spec.sort, limit=spec.limit, cursor=cursor))
        walked.extend(r.record_key for r in page.records)
        cursor = page.next_cursor
        _mint_many(stack, "ethsim", CONTRACTS[:3], rng, blocks=2, events_per_block=4)
        stack.engine.tick()
        stack.clock.advance(1.0)
        if cursor is None:
            break
    final = [
        r.record_key
        for r in stack.store.query(QuerySpec(sort=spec.sort, limit=1_000_000)).records
    ]
    assert len(set(walked)) == len(walked), "concurrent ingestion produced duplicate rows"
    assert set(initial) <= set(walked) <= set(final)
    positions = [final.index(k) for k in walked]
    assert positions == sorted(positions), "page order diverged from the total order"
    stack.close()
    _report(9, "200 random specs paginated exactly; cursor walk stable under ingestion")


# -- 10. crash recovery --------------------------------------------------------------------------


def test_criterion_10_crash_recovery(tmp_path):
    from test_scenario import CRASH_SCENARIO, run_scenario_inline

    scenario_path = tmp_path / "crash.json"
    scenario_path.write_text(json.dumps(CRASH_SCENARIO))
    baseline_dir = tmp_path / "baseline"
    report = run_scenario_inline(CRASH_SCENARIO, baseline_dir)
    assert report.passed, report.to_dict()
    baseline = state_summary(baseline_dir)

    rng = random.Random(10)
    points = rng.sample(
        [(t, p) for t in range(CRASH_SCENARIO["settings"]["ticks"])
         for p in ("pre", "mid", "post")],
        10,
    )
    for tick, phase in points:
        kill_at = f"{tick}:{phase}"
        crash_dir = tmp_path / f"kill-{tick}-{phase}"
        killed = run_scenario_subprocess(scenario_path, crash_dir, kill_at=kill_at)
        assert killed.returncode == -signal.SIGKILL, (
            f"{kill_at}: expected SIGKILL exit, got {killed.returncode}"
        )
        resumed = run_scenario_subprocess(scenario_path, crash_dir, resume=True)
        assert resumed.returncode == 0, f"{kill_at}: {resumed.stdout}{resumed.stderr}"
        summary = state_summary(crash_dir)
        assert summary["store"] == baseline["store"], f"{kill_at}: store diverged"
        assert summary["cursors"] == baseline["cursors"], f"{kill_at}: cursors diverged"
        assert summary["receivers"] == baseline["receivers"], f"{kill_at}: receivers diverged"
    _report(10, f"10 SIGKILL points resumed to state equal to the uninterrupted run")
