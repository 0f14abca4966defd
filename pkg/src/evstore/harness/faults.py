"""Scripted fault plans and the end-to-end scenario that runs them.

A plan is a list of timed fault events. ``FaultPlan.generate`` derives one
from a seed, so a scenario (generator seed, plan seed, config) always
replays the same way.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
from dataclasses import asdict, dataclass, field

from .._util import SimClock, crc32
from ..catalog import EventId, Holder, LockMode
from ..cdr import CdrConfig, CdrPipeline
from ..cdr.ingest import Ingester
from ..errors import EvStoreError, InjectedCrash, InvariantViolated, NotFound
from ..hsm import HsmConfig
from ..migration.migrate import Migrator
from ..store import EventStore
from .generator import Generator

log = logging.getLogger(__name__)

KINDS = ("kill_client", "stall_lock", "stall_tape", "slow_tape", "corrupt_stream",
         "crash_migrator", "crash_tape_migrator")

MIGRATOR_PHASES = {"Copy": "migrate.copy", "VerifyFull": "migrate.after_copy",
                   "VerifySampled": "migrate.after_copy", "Switch": "migrate.before_switch",
                   "Done": "migrate.after_switch"}


@dataclass
class FaultEvent:
    kind: str
    t: float = 0.0
    duration: float = 0.0
    factor: float = 1.0
    chunk: int = 0  # index into the generator's chunk plan
    offset: int = 0
    point: str = ""
    phase: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")


@dataclass
class FaultPlan:
    events: list = field(default_factory=list)
    seed: int = 0

    def of(self, kind):
        return [e for e in self.events if e.kind == kind]

    def to_json(self):
        return {"seed": self.seed, "events": [asdict(e) for e in self.events]}

    @classmethod
    def from_json(cls, d):
        return cls([FaultEvent(**e) for e in d["events"]], d.get("seed", 0))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def generate(cls, seed, horizon, chunks, kills=10, stalls=1, corruptions=1, migrator_crashes=1,
                 tape_stalls=0, slow_tapes=0, tape_crashes=0, stall_seconds=10.0):
        """A reproducible plan; fault times fall inside ``[0.1, 0.7] * horizon``."""
        rng = random.Random(seed)
        when = lambda: round(rng.uniform(0.1, 0.7) * horizon, 2)  # noqa: E731
        ev = []
        for _ in range(kills):
            ev.append(FaultEvent("kill_client", when(), point=rng.choice(Ingester.CRASH_POINTS)))
        for _ in range(stalls):
            ev.append(FaultEvent("stall_lock", when(), duration=stall_seconds))
        for _ in range(tape_stalls):
            ev.append(FaultEvent("stall_tape", when(), duration=stall_seconds))
        for _ in range(slow_tapes):
            ev.append(FaultEvent("slow_tape", when(), duration=stall_seconds, factor=2.0))
        for _ in range(corruptions):
            ev.append(FaultEvent("corrupt_stream", chunk=rng.randrange(max(chunks, 1)),
                                 offset=rng.randrange(1 << 30)))
        for _ in range(tape_crashes):
            ev.append(FaultEvent("crash_tape_migrator", when(),
                                 point=rng.choice(["hsm.after_tape_write", "hsm.after_verify"])))
        for _ in range(migrator_crashes):
            ev.append(FaultEvent("crash_migrator", phase=rng.choice(sorted(MIGRATOR_PHASES))))
        ev.sort(key=lambda e: (e.t, e.kind))
        return cls(ev, seed)


@dataclass
class ScenarioReport:
    events_expected: int = 0
    events_found: int = 0
    lost: list = field(default_factory=list)
    corrupted: list = field(default_factory=list)
    audit_violations: list = field(default_factory=list)
    durability_lost_files: list = field(default_factory=list)
    consistency_problems: list = field(default_factory=list)
    migration_runs: list = field(default_factory=list)
    migration_crashes: int = 0
    reader_reads: int = 0
    reader_failures: int = 0
    cdr: dict = field(default_factory=dict)
    series: list = field(default_factory=list, repr=False)
    faults_applied: list = field(default_factory=list)

    @property
    def ok(self):
        return not (self.lost or self.corrupted or self.audit_violations or self.durability_lost_files
                    or self.consistency_problems or self.reader_failures)

    def verdict(self):
        return {"lost": len(self.lost), "corrupted": len(self.corrupted),
                "audit_violations": len(self.audit_violations),
                "durability_lost_files": len(self.durability_lost_files),
                "consistency_problems": len(self.consistency_problems),
                "reader_failures": self.reader_failures}


class _Scheduler:
    """Applies timed fault events from the pipeline's tick hook."""

    def __init__(self, plan, pipeline, gen):
        self.pending = sorted((e for e in plan.events if e.kind not in ("crash_migrator",)),
                              key=lambda e: e.t)
        self.pipeline = pipeline
        self.restore = []
        self.applied = []
        for e in list(self.pending):
            if e.kind == "corrupt_stream":
                run, seq, *_ = gen.plan[e.chunk % len(gen.plan)]
                pipeline.corrupt_stream((run, seq), e.offset)
                self.pending.remove(e)
                self.applied.append(("corrupt_stream", (run, seq)))

    def __call__(self, p):
        now = p.clock.now() - p.t0
        for at, fn in list(self.restore):
            if now >= at:
                fn()
                self.restore.remove((at, fn))
        while self.pending and self.pending[0].t <= now:
            e = self.pending.pop(0)
            self.applied.append((e.kind, now))
            if e.kind == "kill_client":
                p.kill_ingester(e.point)
            elif e.kind == "stall_lock":
                p.stall_lock_service(e.duration)
            elif e.kind == "stall_tape":
                p.stall_tape(True)
                self.restore.append((now + e.duration, lambda: p.stall_tape(False)))
            elif e.kind == "slow_tape":
                p.slow_tape(e.factor)
                self.restore.append((now + e.duration, lambda: p.slow_tape(1.0)))
            elif e.kind == "crash_tape_migrator":
                p.crash_tape_migrator(e.point)


def _check_events(store, manifest, report):
    for (run, event), (crc, length) in sorted(manifest.events.items()):
        try:
            payload = store.read_event(EventId(run, event))
        except NotFound:
            report.lost.append((run, event))
            continue
        except EvStoreError as exc:
            report.corrupted.append((run, event, type(exc).__name__))
            continue
        if len(payload) != length or crc32(payload) != crc:
            report.corrupted.append((run, event, "payload differs"))
        else:
            report.events_found += 1


def _reader_loop(store, manifest, stop, counts, seed):
    rng = random.Random(seed)
    keys = sorted(manifest.events)
    while not stop.is_set() and keys:
        run, event = rng.choice(keys)
        crc, _n = manifest.events[(run, event)]
        try:
            ok = crc32(store.read_event(EventId(run, event))) == crc
        except EvStoreError:
            ok = False
        counts[0] += 1
        counts[1] += int(not ok)


def run_migrations(store, runs, plan, report, manifest=None, sample_fraction=0.05, seed=0):
    """Migrate ``runs`` with any planned migrator crash, restarting the
    migrator like a supervisor would, while a reader loop checks payloads."""
    crashes = [MIGRATOR_PHASES[e.phase] for e in plan.of("crash_migrator")]
    stop = threading.Event()
    counts = [0, 0]
    reader = None
    if manifest is not None:
        reader = threading.Thread(target=_reader_loop, args=(store, manifest, stop, counts, seed),
                                  daemon=True)
        reader.start()
    try:
        generation = 0
        while True:
            generation += 1
            holder = Holder(os.getuid(), f"migrator-g{generation}", write=True)
            m = Migrator(store, holder)
            for point in crashes:
                m.crash.arm(point)
            crashes = []
            try:
                rep = m.migrate_runs(runs, sample_fraction, seed)
                break
            except InjectedCrash as exc:
                log.info("migrator crashed at %s; restarting", exc)
                report.migration_crashes += 1
    finally:
        stop.set()
        if reader is not None:
            reader.join(30)
    report.migration_runs = list(rep.runs)
    report.reader_reads, report.reader_failures = counts
    return rep


def run_fault_scenario(plan, profile, root, cdr_config=None, hsm_config=None, migrate_runs=None,
                       check=True, max_time=None, manifest=None, reader=True):
    """Generate, ship, ingest, tape and (optionally) migrate a data set under
    ``plan``, then compare every event to the generator manifest."""
    clock = SimClock()
    store = EventStore(root, clock=clock, hsm_config=hsm_config or HsmConfig())
    gen = Generator(profile)
    cfg = cdr_config or CdrConfig(max_chunk_size=profile.max_chunk_size)
    produced = gen.empty_manifest()
    pipe = CdrPipeline(store, cfg, gen.chunks(manifest=produced))
    sched = _Scheduler(plan, pipe, gen)
    pipe.hooks.append(sched)
    cdr = pipe.run(max_time=max_time)
    oracle = manifest if manifest is not None else produced
    report = ScenarioReport(events_expected=len(oracle.events))
    report.cdr = cdr.summary()
    report.series = cdr.series
    report.audit_violations = list(cdr.audit_violations)
    report.faults_applied = sched.applied
    if migrate_runs:
        runs = migrate_runs if not isinstance(migrate_runs, int) else store.catalog.runs()[:migrate_runs]
        run_migrations(store, runs, plan, report, oracle if reader else None, seed=plan.seed)
    store.catalog.reap_expired()
    _check_events(store, oracle, report)
    report.durability_lost_files = store.hsm.verify_all()
    report.consistency_problems = store.catalog.consistency_check()
    report.store = store
    if check and not report.ok:
        raise InvariantViolated(f"scenario failed: {report.verdict()}",
                                dump={"verdict": report.verdict(), "faults": sched.applied,
                                      "lost": report.lost[:20], "corrupted": report.corrupted[:20],
                                      "audit": report.audit_violations[:20]})
    return report


def run_client_kill_scenario(store, clients=20, kill_fraction=0.1, seed=0, ttl=None, run=None):
    """Scan clients hold shared leases on ``readers/run/<n>`` and renew them
    while scanning; a random subset dies without releasing. Returns a dict
    with the reaped lease ids, the killed ids and the completed scans."""
    cat = store.catalog
    clock = store.clock
    ttl = ttl or cat.default_ttl
    rng = random.Random(seed)
    runs = [r for r in cat.runs() if cat.is_sealed(r)] if run is None else [run]
    killed = set(rng.sample(range(clients), max(1, round(kill_fraction * clients))))
    leases = {}
    for i in range(clients):
        h = Holder(os.getuid(), f"scan-{i}")
        leases[i] = (h, cat.acquire_lease(h, f"readers/run/{runs[i % len(runs)]}", LockMode.SHARED, ttl))
    completed = 0
    for step in range(4):
        clock.sleep(ttl / 4)
        for i, (h, lease) in leases.items():
            if i not in killed:
                cat.renew_lease(lease.lease_id, h, ttl)
    clock.sleep(ttl * 0.01)  # just past one ttl after the kills
    reaped = cat.reap_expired()
    killed_ids = {leases[i][1].lease_id for i in killed}
    for i, (h, lease) in leases.items():
        if i not in killed:
            cat.release_lease(lease.lease_id, h)
            completed += 1
    free = all(not cat.leases.on(f"readers/run/{runs[i % len(runs)]}") for i in killed)
    return {"killed": killed_ids, "reaped": set(reaped), "completed": completed,
            "resources_free": free, "elapsed": ttl * 1.01}
