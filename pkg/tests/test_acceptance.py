"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N <name>: PASS|FAIL <detail>`` line that
the terminal summary prints, and asserts the same condition.
"""

import os
import random
import threading
import time

import pytest

from evstore._util import KiB, MiB, SimClock, crc32
from evstore.catalog import (CREATE_CRASH_POINTS, CREATE_RESOURCE, Backend, Catalog, DbState,
                             EventHeader, EventId, Holder, Journal, LockMode, StorageLocator,
                             db_resource)
from evstore.cdr import CdrConfig, CdrPipeline
from evstore.dataserver import ServerFarm
from evstore.errors import Conflict, DuplicateName, InjectedCrash, VerificationFailed
from evstore.harness.faults import FaultPlan, run_fault_scenario
from evstore.harness.generator import Generator, GeneratorProfile, plan_chunks
from evstore.harness.stress import stress_cell, stress_scan
from evstore.hsm import HsmConfig
from evstore.migration.migrate import Migrator, Phase, overhead_report, sampled
from evstore.store import EventStore

from conftest import ACCEPTANCE, ingest_all

pytestmark = pytest.mark.acceptance


def verdict(n, name, ok, detail):
    line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def W(tag):
    return Holder(os.getuid(), tag, write=True)


# ------------------------------------------------------ criteria 1 and 2

@pytest.fixture(scope="module")
def big_run(tmp_path_factory):
    profile = GeneratorProfile(seed=11, runs=20, events_per_run=2500, payload_size=30 * KiB)
    cfg = CdrConfig()
    horizon = profile.runs * profile.events_per_run * profile.payload_size / cfg.source_rate
    plan = FaultPlan.generate(11, horizon, len(plan_chunks(profile)), kills=10, stalls=1,
                              corruptions=1, migrator_crashes=1)
    root = str(tmp_path_factory.mktemp("big"))
    t = time.monotonic()
    rep = run_fault_scenario(plan, profile, root, cfg,
                             HsmConfig(capacity=512 * MiB, track_overhead=False),
                             migrate_runs=2, check=False)
    elapsed = time.monotonic() - t
    yield plan, rep, elapsed
    rep.store.close()


def test_c1_end_to_end_no_loss(big_run):
    plan, rep, elapsed = big_run
    kinds = [k for k, _ in rep.faults_applied]
    faults_ok = (kinds.count("kill_client") == 10 and kinds.count("stall_lock") == 1
                 and kinds.count("corrupt_stream") == 1 and rep.migration_crashes == 1
                 and rep.cdr["corrupt_transfers"] >= 1)
    ok = (rep.events_expected >= 50000 and rep.events_found == rep.events_expected
          and not rep.lost and not rep.corrupted and faults_ok and elapsed <= 600
          and not rep.durability_lost_files and not rep.consistency_problems)
    verdict(1, "end-to-end no-loss", ok,
            f"events={rep.events_found}/{rep.events_expected} "
            f"bytes={rep.cdr['bytes_in'] / 2**30:.2f}GiB lost={len(rep.lost)} "
            f"corrupted={len(rep.corrupted)} kills={kinds.count('kill_client')} "
            f"stalls={kinds.count('stall_lock')} corruptions={rep.cdr['corrupt_transfers']} "
            f"migrator_crashes={rep.migration_crashes} runtime={elapsed:.0f}s")


def test_c2_late_deletion_safety(big_run):
    _plan, rep, _t = big_run
    audits = len(rep.series) * 7  # the auditor runs after each of the 7 stages of a tick
    ok = rep.audit_violations == [] and audits > 0 and rep.cdr["bytes_to_tape"] == rep.cdr["bytes_in"]
    verdict(2, "late-deletion safety", ok,
            f"violations={len(rep.audit_violations)} audits={audits}")


# ------------------------------------------------------------ criterion 3

def test_c3_overhead(tmp_path):
    t = time.monotonic()
    store = EventStore(str(tmp_path / "s"), clock=SimClock(), hsm_config=HsmConfig(track_overhead=False))
    profile = GeneratorProfile(seed=3, runs=1, events_per_run=2000, payload_size=30 * KiB)
    ingest_all(store, profile)
    a = overhead_report(store, Backend.CONTAINER_A)
    elapsed = time.monotonic() - t
    store.close()
    s, c = a["structural_overhead"], a["post_compression_overhead"]
    ok = abs(s - 0.30) <= 0.02 and abs(c - 0.06) <= 0.02 and elapsed <= 120
    verdict(3, "overhead", ok, f"structural={s:.2%} post_compression={c:.2%} runtime={elapsed:.0f}s")


# ------------------------------------------------------------ criterion 4

def test_c4_scan_scalability(tmp_path):
    t = time.monotonic()
    cap, per_client = 16 * MiB, 2 * MiB
    counts = [1, 2, 4, 8, 16, 32, 64, 128]
    profile = GeneratorProfile(seed=3, runs=2, events_per_run=1024, payload_size=30 * KiB)
    curves = {}
    for backend in (Backend.CONTAINER_A, Backend.FLAT_B):
        store = EventStore(str(tmp_path / backend.name), hsm_config=HsmConfig(pin_window=1e9))
        ingest_all(store, profile, backend=backend)
        with ServerFarm(store, count=2, total_bandwidth=cap, processes=True) as farm:
            curves[backend] = stress_scan(store.catalog, farm.endpoints(), counts, [1, 2], 32,
                                          label=backend.name, client_bandwidth=per_client, farm=farm,
                                          csv_path=str(tmp_path / "stress.csv"))
        store.close()
    elapsed = time.monotonic() - t
    problems = []
    for backend, rows in curves.items():
        wire = [r.aggregate_bytes_per_s for r in rows]
        plateau = max(wire)
        if abs(plateau - cap) > 0.15 * cap:
            problems.append(f"{backend.name} plateau {plateau / MiB:.1f} MiB/s")
        climb = wire[:wire.index(plateau) + 1]
        if any(b < a * 0.95 for a, b in zip(climb, climb[1:])):
            problems.append(f"{backend.name} not rising to its plateau")
        if any(w < 0.8 * plateau for w in wire[wire.index(plateau):]):
            problems.append(f"{backend.name} drops after the plateau")
        if sum(r.failures for r in rows):
            problems.append(f"{backend.name} failures")
    # useful bytes per second: the flat layout ships no page structure
    order = [(f.aggregate_payload_bytes_per_s, a.aggregate_payload_bytes_per_s)
             for a, f in zip(curves[Backend.CONTAINER_A], curves[Backend.FLAT_B])]
    if any(f < a for f, a in order):
        problems.append("FlatB below ContainerA")
    ok = not problems and elapsed <= 900
    curve = lambda b: ",".join(f"{r.aggregate_payload_bytes_per_s / MiB:.1f}" for r in curves[b])  # noqa: E731
    verdict(4, "scan scalability", ok,
            f"cap={cap / MiB:.0f}MiB/s ContainerA=[{curve(Backend.CONTAINER_A)}] "
            f"FlatB=[{curve(Backend.FLAT_B)}] MiB/s payload runtime={elapsed:.0f}s {problems or ''}")


# ------------------------------------------------------------ criterion 5

def test_c5_400_clients(tmp_path):
    t = time.monotonic()
    store = EventStore(str(tmp_path / "s"), hsm_config=HsmConfig(pin_window=1e9))
    manifest, _ = ingest_all(store, GeneratorProfile(seed=5, runs=1, events_per_run=1600,
                                                     payload_size=30 * KiB))
    with ServerFarm(store, count=10, total_bandwidth=64 * MiB, processes=True,
                    write_root=os.path.join(store.root, "scratch")) as farm:
        r = stress_cell(store.catalog, farm.endpoints(), 400, [1], 4, farm=farm, write_ratio=0.1,
                        writers=4, client_bandwidth=2 * MiB)
    store.close()
    elapsed = time.monotonic() - t
    ratio = r.write_bytes / r.wire_bytes if r.wire_bytes else 0.0
    ok = r.failures == 0 and r.records == 1600 and abs(ratio - 0.1) <= 0.02 and elapsed <= 600
    verdict(5, "400 clients", ok,
            f"clients=400 servers=10 failures={r.failures} scans_records={r.records} "
            f"write/read={ratio:.3f} start_spread={r.start_spread_s * 1000:.0f}ms "
            f"peak_handlers={r.server_peak_open_handlers} runtime={elapsed:.0f}s")


# ------------------------------------------------------------ criterion 6

def _hdr(run, event, fid, rng):
    n = rng.randrange(1000, 40000)
    return EventHeader(EventId(run, event), StorageLocator(Backend.FLAT_B, fid, event * 40000, n,
                                                           rng.getrandbits(32)))


def test_c6_lease_robustness(tmp_path):
    rng = random.Random(6)
    ttl = 2.0
    path = str(tmp_path / "catalog.evc")
    clock = SimClock()
    cat = Catalog(Journal(path), clock=clock, default_ttl=ttl)
    admin = W("admin")
    dbs = {}
    for run in range(1, 5):
        db_id = cat.create_database(f"db{run}", "", admin)
        dbs[run] = (db_id, cat.allocate_file(db_id))
    oracle = {run: [] for run in dbs}  # last committed headers per run
    violations = []
    kills = replays = 0

    def compare(catalog, runs, where):
        for run in runs:
            if catalog.headers(run) != oracle[run]:
                violations.append(f"{where}: run {run} differs from the committed state")

    for i in range(1000):
        run = rng.choice(list(dbs))
        db_id, fid = dbs[run]
        h = W(f"client{i}")
        try:
            lease = cat.acquire_lease(h, db_resource(db_id))
        except Conflict as exc:
            violations.append(f"iteration {i}: {db_resource(db_id)} not free: {exc}")
            continue
        pending = list(oracle[run])
        for _ in range(rng.randint(1, 3)):
            if oracle[run] and rng.random() < 0.3:
                k = rng.randrange(len(oracle[run]))
                if pending[k] is oracle[run][k]:  # not yet touched in this transaction
                    loc = StorageLocator(Backend.FLAT_B, fid, 0, 100, rng.getrandbits(32))
                    cat.attach_dst(pending[k].id, f"dst-i{i}", loc, lease.lease_id)
                    pending[k] = pending[k].with_dst(f"dst-i{i}", loc)
            else:
                batch = [_hdr(run, len(pending) + j, fid, rng) for j in range(rng.randint(0, 6))]
                cat.put_headers(db_id, batch, lease.lease_id)
                pending += batch
        if rng.random() < 0.5:
            cat.release_lease(lease.lease_id, h)
            oracle[run] = pending
        else:
            kills += 1  # dies holding the lease mid-transaction
            if i % 50 == 49:
                replays += 1
                # the service dies too, with the dead client's work still pending
                compare(Catalog.open(Journal(), records=cat.journal.records(), clock=SimClock()),
                        dbs, f"replay@{i}")
            try:
                cat.acquire_lease(W("probe"), db_resource(db_id))
                violations.append(f"iteration {i}: lease of a dead client released early")
            except Conflict:
                pass
            clock.advance(ttl + 1e-3)
            try:
                probe = cat.acquire_lease(W("probe"), db_resource(db_id))
                cat.release_lease(probe.lease_id, W("probe"))
            except Conflict as exc:
                violations.append(f"iteration {i}: not re-acquirable one ttl after the kill: {exc}")
        compare(cat, [run], f"live@{i}")
        if i % 100 == 99:
            problems = cat.consistency_check()
            violations += [f"iteration {i}: {p}" for p in problems]
    compare(cat, dbs, "final")
    cat.journal.close()
    replayed = Catalog.open(Journal(path), clock=SimClock())
    compare(replayed, dbs, "final replay")
    replays += 1
    violations += replayed.consistency_check()
    verdict(6, "lease robustness", not violations,
            f"iterations=1000 kills={kills} replays={replays} violations={len(violations)} "
            f"{violations[:3] or ''}")


# ------------------------------------------------------------ criterion 7

def test_c7_create_crash_matrix(tmp_path):
    violations = []
    cases = 0
    for point in CREATE_CRASH_POINTS:
        torn = {"create.torn_begin": "begin", "create.torn_commit": "commit"}.get(point)
        # whole-service crash: reopen from the journal
        path = str(tmp_path / f"{point}.evc")
        cat = Catalog(Journal(path), clock=SimClock())
        cat.create_database("before", "", W("a"))
        cat.crash.arm(point)
        try:
            cat.create_database("victim", "", W("v"), torn=torn)
            violations.append(f"{point}: no crash")
        except InjectedCrash:
            pass
        cat.journal.close()
        back = Catalog.open(Journal(path), clock=SimClock())
        violations += [f"{point} reopen: {p}" for p in back.consistency_check()]
        if [l for l in back.leases if l.mode is LockMode.EXCLUSIVE]:
            violations.append(f"{point} reopen: exclusive lease survived")
        if any(e.state is DbState.CREATING for e in back.databases()):
            violations.append(f"{point} reopen: database stuck in Creating")
        try:
            back.create_database("victim", "", W("v2"), timeout=1.0)
        except DuplicateName:
            if back.database_by_name("victim").state is not DbState.OPEN:
                violations.append(f"{point} reopen: victim exists but is not Open")
        back.create_database("after", "", W("b"), timeout=1.0)
        cases += 1
        if torn:
            continue
        # the creating client dies; the service lives on
        clock = SimClock()
        cat = Catalog(clock=clock, default_ttl=2.0)
        cat.crash.arm(point)
        try:
            cat.create_database("victim", "", W("v"))
        except InjectedCrash:
            pass
        clock.advance(2.0 + 1e-3)
        cat.reap_expired()
        violations += [f"{point} live: {p}" for p in cat.consistency_check()]
        if cat.leases.on(CREATE_RESOURCE):
            violations.append(f"{point} live: create lease stuck")
        try:
            cat.create_database("victim", "", W("v2"), timeout=1.0)
        except DuplicateName:
            pass
        cat.create_database("after", "", W("b"), timeout=1.0)
        if not all(e.state is DbState.OPEN for e in cat.databases()):
            violations.append(f"{point} live: database not Open")
        cases += 1
    verdict(7, "create_database crash matrix", not violations,
            f"points={len(CREATE_CRASH_POINTS)} cases={cases} violations={len(violations)} "
            f"{violations[:3] or ''}")


# ------------------------------------------------------------ criterion 8

def test_c8_migration(tmp_path):
    store = EventStore(str(tmp_path / "s"), clock=SimClock(), hsm_config=HsmConfig(pin_window=1e9))
    profile = GeneratorProfile(seed=8, runs=12, events_per_run=200, payload_size=8 * KiB)
    manifest, _ = ingest_all(store, profile)
    runs = profile.run_numbers
    stop = threading.Event()
    reads = [0, 0]

    def reader():
        rng = random.Random(8)
        keys = sorted(manifest.events)
        while not stop.is_set():
            run, e = rng.choice(keys)
            try:
                ok = crc32(store.read_event(EventId(run, e))) == manifest.events[(run, e)][0]
            except Exception:
                ok = False
            reads[0] += 1
            reads[1] += int(not ok)

    t = threading.Thread(target=reader)
    t.start()
    try:
        scope = Migrator(store).full_scope(runs)
        rng = random.Random(80)
        detected = 0
        for trial in range(50):
            run = scope[trial % len(scope)]
            event = rng.randrange(profile.events_per_run)
            m = Migrator(store, W(f"trial{trial}"))
            m.corrupt.add((run, event))
            try:
                m.migrate_run(run)
            except VerificationFailed as exc:
                rep = exc.report
                detected += (rep.phase == Phase.VERIFY_FULL.value
                             and [(x.run, x.event) for x in rep.mismatches] == [(run, event)]
                             and m.phase(run) is Phase.FAILED
                             and store.catalog.get_header(EventId(run, 0)).raw.backend is Backend.CONTAINER_A)
        clean = Migrator(store, W("migrator")).migrate_runs(runs, sample_fraction=0.05, seed=8)
    finally:
        stop.set()
        t.join()
    expect_sampled = sum(sampled(8, r, e, 0.05) for r in runs if r not in scope
                         for e in range(profile.events_per_run))
    switched = all(h.raw.backend is Backend.FLAT_B for r in runs for h in store.catalog.headers(r))
    intact = all(crc32(store.read_event(EventId(r, e))) == c for (r, e), (c, _n) in manifest.events.items())
    store.close()
    ok = (len(runs) >= 10 and scope == [1, 2] and clean.passed and clean.mismatches == []
          and clean.events_compared_full == 2 * profile.events_per_run
          and clean.events_compared_sampled == expect_sampled and detected == 50
          and reads[1] == 0 and reads[0] > 0 and switched and intact)
    sampled_share = clean.events_compared_sampled / (10 * profile.events_per_run)
    verdict(8, "migration", ok,
            f"runs={len(runs)} full={scope} full_events={clean.events_compared_full} "
            f"sampled={clean.events_compared_sampled} ({sampled_share:.1%}) "
            f"mismatches={len(clean.mismatches)} corruption_detected={detected}/50 "
            f"reads={reads[0]} failed_reads={reads[1]}")


# ------------------------------------------------------------ criterion 9

def test_c9_catch_up(tmp_path):
    store = EventStore(str(tmp_path / "s"), clock=SimClock(), hsm_config=HsmConfig(track_overhead=False))
    cfg = CdrConfig(max_chunk_size=8 * MiB, buffer_capacity=256 * MiB, backend=Backend.FLAT_B)
    R, stall = cfg.nominal_rate, (10.0, 20.0)
    gen = Generator(GeneratorProfile(seed=9, runs=1, events_per_run=16000, payload_size=30 * KiB,
                                     max_chunk_size=8 * MiB))
    pipe = CdrPipeline(store, cfg, gen.chunks())
    pipe.hooks.append(lambda p: p.stall_tape(stall[0] <= p.clock.now() - p.t0 < stall[1]))
    rep = pipe.run()
    end_backlog = store.hsm.tape_backlog_bytes
    store.close()
    s = rep.series
    steady = max(r["tape_backlog_bytes"] for r in s if 2.0 <= r["t"] < stall[0])
    stalled = [r for r in s if stall[0] + 1 <= r["t"] < stall[1]]
    after = [r for r in s if r["t"] >= stall[1]]
    start = after[0]
    # drain window: from the end of the stall until the backlog is back to its pre-stall level
    done = next((r for r in after[1:] if r["tape_backlog_bytes"] <= steady), None)
    rate = ((done["tape_streamed_bytes"] - start["tape_streamed_bytes"]) / (done["t"] - start["t"])
            if done else 0.0)
    peak = max(r["tape_backlog_bytes"] for r in s)
    ok = (done is not None and R < rate <= cfg.catchup_factor * R * (1 + 1e-9)
          and all(r["tape_rate"] == 0 for r in stalled) and end_backlog == 0
          and rep.audit_violations == [] and done["t"] < s[-1]["t"])
    verdict(9, "catch-up", ok,
            f"R={R / MiB:.0f}MiB/s drain={rate / MiB:.2f}MiB/s limit={cfg.catchup_factor * R / MiB:.0f}MiB/s "
            f"peak_backlog={peak / MiB:.0f}MiB recovered_at=t{done['t'] if done else None} "
            f"final_backlog={end_backlog}")


# ----------------------------------------------------------- criterion 10

def test_c10_metadata_ratio(tmp_path):
    store = EventStore(str(tmp_path / "s"), clock=SimClock())
    ingest_all(store, GeneratorProfile())
    stats = store.catalog.catalog_stats()
    store.close()
    verdict(10, "metadata ratio", stats.metadata_ratio <= 0.005,
            f"ratio={stats.metadata_ratio:.4%} headers={stats.header_count} "
            f"header_bytes={stats.header_bytes} payload_bytes={stats.payload_bytes}")
