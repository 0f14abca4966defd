"""Live migration of RAW payloads from ContainerA to FlatB.

A job per run goes Copy -> VerifyFull or VerifySampled -> Switch -> Done.
Job state lives in catalog metadata under ``migration/run/<n>`` so that a
migrator killed in any phase can be restarted and picks up where it left
off. Old locators stay valid (the ContainerA files are never touched) until
the per-run Switch, which rebinds every RAW locator of the run in one
catalog transaction.
"""

from __future__ import annotations

import contextlib
import csv
import enum
import hashlib
import io
import json
import logging
import os
import zlib
from dataclasses import dataclass, field

from .._util import CrashPoints
from ..catalog import Backend, LockMode, StorageLocator, db_resource, run_resource
from ..errors import (ChecksumMismatch, Conflict, DuplicateName, NotFound, NotOpen,
                      VerificationFailed)
from . import backends

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    COPY = "Copy"
    VERIFY_FULL = "VerifyFull"
    VERIFY_SAMPLED = "VerifySampled"
    SWITCH = "Switch"
    DONE = "Done"
    FAILED = "Failed"


@dataclass
class Mismatch:
    run: int
    event: int
    old: StorageLocator
    new: StorageLocator
    reason: str


@dataclass
class VerificationReport:
    runs: list = field(default_factory=list)
    events_compared_full: int = 0
    events_compared_sampled: int = 0
    mismatches: list = field(default_factory=list)
    seed: int = 0
    sample_fraction: float = 0.0
    phase: str = ""
    noop: bool = False

    @property
    def passed(self):
        return not self.mismatches

    def merge(self, other):
        self.runs += other.runs
        self.events_compared_full += other.events_compared_full
        self.events_compared_sampled += other.events_compared_sampled
        self.mismatches += other.mismatches
        return self

    def to_json(self):
        return {"runs": self.runs, "events_compared_full": self.events_compared_full,
                "events_compared_sampled": self.events_compared_sampled,
                "mismatches": [[m.run, m.event, m.old.pack().hex(), m.new.pack().hex(), m.reason]
                               for m in self.mismatches],
                "seed": self.seed, "sample_fraction": self.sample_fraction, "phase": self.phase}

    @classmethod
    def from_json(cls, d):
        mm = [Mismatch(r, e, StorageLocator.unpack(bytes.fromhex(o)),
                       StorageLocator.unpack(bytes.fromhex(n)), why)
              for r, e, o, n, why in d["mismatches"]]
        return cls(list(d["runs"]), d["events_compared_full"], d["events_compared_sampled"], mm,
                   d["seed"], d["sample_fraction"], d["phase"])

    def to_text(self):
        lines = [f"runs: {' '.join(map(str, self.runs))}",
                 f"seed: {self.seed}",
                 f"sample_fraction: {self.sample_fraction}",
                 f"events_compared_full: {self.events_compared_full}",
                 f"events_compared_sampled: {self.events_compared_sampled}",
                 f"mismatches: {len(self.mismatches)}",
                 f"phase: {self.phase}",
                 f"result: {'PASS' if self.passed else 'FAIL'}"]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        """One row per mismatch, both locators spelled out."""
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["run", "event", "reason", "old_backend", "old_file", "old_offset", "old_length",
                     "old_checksum", "new_backend", "new_file", "new_offset", "new_length",
                     "new_checksum"])
        for m in self.mismatches:
            w.writerow([m.run, m.event, m.reason,
                        m.old.backend.name, m.old.file_id, m.old.offset, m.old.length,
                        f"{m.old.checksum:08x}",
                        m.new.backend.name, m.new.file_id, m.new.offset, m.new.length,
                        f"{m.new.checksum:08x}"])
        return out.getvalue()


def sampled(seed, run, event, fraction):
    """Deterministic per-event coin with probability ``fraction``."""
    if fraction >= 1:
        return True
    if fraction <= 0:
        return False
    h = hashlib.blake2b(f"{seed}:{run}:{event}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") < fraction * 2 ** 64


def _flip(payload):
    buf = bytearray(payload)
    buf[len(buf) // 2] ^= 0x01
    return bytes(buf)


class Migrator:
    """Runs migration jobs against one EventStore.

    ``crash`` points: ``migrate.copy`` (half-way through the copy),
    ``migrate.after_copy``, ``migrate.after_verify``, ``migrate.before_switch``,
    ``migrate.after_switch``.
    """

    CRASH_POINTS = ("migrate.copy", "migrate.after_copy", "migrate.after_verify",
                    "migrate.before_switch", "migrate.after_switch")

    def __init__(self, store, holder=None, full_runs=2, full_volume_fraction=0.10, crash=None):
        self.store = store
        self.holder = holder or store.admin
        self.full_runs = full_runs
        self.full_volume_fraction = full_volume_fraction
        self.crash = crash or CrashPoints()
        self.corrupt = set()  # (run, event) pairs damaged while copying
        self.table_root = os.path.join(store.root, "migration")
        os.makedirs(self.table_root, exist_ok=True)

    # -------------------------------------------------------------- state

    @staticmethod
    def _key(run):
        return f"migration/run/{run}"

    def job(self, run):
        return self.store.catalog.meta.get(self._key(run))

    def phase(self, run):
        job = self.job(run)
        return Phase(job["phase"]) if job else None

    def _save(self, run, **changes):
        job = dict(self.job(run) or {})
        job.update(changes)
        self.store.catalog.set_meta(self._key(run), job)
        return job

    def _table_path(self, run, attempt):
        return os.path.join(self.table_root, f"run{run:06d}-a{attempt}.json")

    def _write_table(self, run, attempt, old, new):
        path = self._table_path(run, attempt)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump({"old": [l.pack().hex() for l in old], "new": [l.pack().hex() for l in new]}, fh)
        os.replace(tmp, path)
        return path

    def tables(self, run):
        job = self.job(run)
        if not job or not job.get("table"):
            raise NotFound(f"run {run} has no migration copy")
        with open(job["table"]) as fh:
            doc = json.load(fh)
        unpack = lambda xs: [StorageLocator.unpack(bytes.fromhex(x)) for x in xs]  # noqa: E731
        return unpack(doc["old"]), unpack(doc["new"])

    # -------------------------------------------------------- verification

    def full_scope(self, runs):
        """Runs compared event by event: the first ``full_runs`` runs or the
        first ``full_volume_fraction`` of the volume, whichever is larger."""
        cat = self.store.catalog
        volume = {r: sum(h.raw.length for h in cat.headers(r)) for r in runs}
        total = sum(volume.values())
        scope, acc = [], 0
        for r in runs:
            if len(scope) < self.full_runs or acc < self.full_volume_fraction * total:
                scope.append(r)
                acc += volume[r]
        return scope

    def _compare(self, run, old, new, fraction, seed, full):
        rep = VerificationReport(runs=[run], seed=seed, sample_fraction=1.0 if full else fraction)
        read = self.store.read_payload
        for event, (o, n) in enumerate(zip(old, new)):
            if not full and not sampled(seed, run, event, fraction):
                continue
            if full:
                rep.events_compared_full += 1
            else:
                rep.events_compared_sampled += 1
            try:
                a = read(o)
            except ChecksumMismatch as exc:
                rep.mismatches.append(Mismatch(run, event, o, n, f"old copy: {exc}"))
                continue
            try:
                b = read(n)
            except ChecksumMismatch:
                rep.mismatches.append(Mismatch(run, event, o, n, "new copy fails its checksum"))
                continue
            if a != b:
                rep.mismatches.append(Mismatch(run, event, o, n, "payload bytes differ"))
        return rep

    def verify_sample(self, run, fraction, seed=0):
        """Re-compare a seeded subset of a migrated run's events."""
        old, new = self.tables(run)
        rep = self._compare(run, old, new, fraction, seed, full=fraction >= 1)
        if fraction >= 1:
            rep.events_compared_sampled, rep.events_compared_full = rep.events_compared_full, 0
        rep.phase = "Verify"
        return rep

    # ---------------------------------------------------------------- jobs

    def _acquire(self, resource):
        """Exclusive lease, waiting out a dead migrator's lease if needed."""
        cat = self.store.catalog
        deadline = self.store.clock.now() + 2 * cat.default_ttl
        while True:
            try:
                return cat.acquire_lease(self.holder, resource, LockMode.EXCLUSIVE)
            except Conflict:
                if self.store.clock.now() > deadline:
                    raise
                self.store.clock.sleep(min(1.0, cat.default_ttl / 4))

    def _copy(self, run, job):
        store, cat = self.store, self.store.catalog
        attempt = job.get("attempt", 0) + 1
        job = self._save(run, phase=Phase.COPY.value, attempt=attempt, table=None)
        name = f"migr-run{run:06d}-a{attempt}"
        try:
            db_id = cat.database_by_name(name).db_id
        except NotFound:
            try:
                db_id = cat.create_database(name, "", self.holder, backend=Backend.FLAT_B)
            except DuplicateName:
                db_id = cat.database_by_name(name).db_id
        lease = self._acquire(db_resource(db_id))
        old = [h.raw for h in cat.headers(run)]
        new = []
        writer = None
        if old:
            writer = store.new_file(db_id, Backend.FLAT_B)
            for event, loc in enumerate(old):
                if event == len(old) // 2:
                    self.crash.hit("migrate.copy")
                payload = store.read_payload(loc)
                if (run, event) in self.corrupt:
                    payload = _flip(payload)
                got = writer.append(payload)
                # the copy claims the source checksum; verification catches a bad write
                new.append(StorageLocator(got.backend, got.file_id, got.offset, got.length,
                                          loc.checksum))
            store.register(writer, name)
        cat.seal_database(db_id, lease.lease_id)
        cat.release_lease(lease.lease_id, self.holder)
        table = self._write_table(run, attempt, old, new)
        self.crash.hit("migrate.after_copy")
        return self._save(run, table=table, db_id=db_id,
                          file_id=writer.file_id if writer else 0)

    def migrate_run(self, run, sample_fraction=0.05, seed=0, full=None):
        """Migrate one sealed run; resumable and idempotent.

        ``full`` forces (or skips) event-by-event verification; by default it
        follows :meth:`full_scope` over the sealed runs in catalog order.
        """
        cat = self.store.catalog
        job = self.job(run)
        if job and job["phase"] == Phase.DONE.value:
            rep = VerificationReport.from_json(job["report"])
            rep.noop = True
            return rep
        if not cat.is_sealed(run):
            raise NotOpen(f"run {run} is not sealed")
        if full is None:
            full = run in self.full_scope([r for r in cat.runs() if cat.is_sealed(r)])
        job = job or {}

        if job.get("phase") in (None, Phase.COPY.value, Phase.FAILED.value) or not job.get("table"):
            job = self._copy(run, job)
            job = self._save(run, phase=(Phase.VERIFY_FULL if full else Phase.VERIFY_SAMPLED).value,
                             full=full, seed=seed, fraction=sample_fraction)

        if job["phase"] in (Phase.VERIFY_FULL.value, Phase.VERIFY_SAMPLED.value):
            old, new = self.tables(run)
            full = job["phase"] == Phase.VERIFY_FULL.value
            current = [h.raw for h in cat.headers(run)]
            rep = self._compare(run, old, new, job["fraction"], job["seed"], full)
            if current != old:
                rep.mismatches.append(Mismatch(run, -1, current[0] if current else old[0],
                                               new[0] if new else old[0],
                                               "run locators changed since the copy"))
            rep.phase = job["phase"]
            if not rep.passed:
                self._save(run, phase=Phase.FAILED.value, report=rep.to_json())
                raise VerificationFailed(rep)
            self.crash.hit("migrate.after_verify")
            job = self._save(run, phase=Phase.SWITCH.value, report=rep.to_json())

        if job["phase"] == Phase.SWITCH.value:
            _old, new = self.tables(run)
            self.crash.hit("migrate.before_switch")
            lease = self._acquire(run_resource(run))
            cat.rebind_raw(run, new, lease.lease_id)
            cat.release_lease(lease.lease_id, self.holder)
            self.crash.hit("migrate.after_switch")
            job = self._save(run, phase=Phase.DONE.value)

        rep = VerificationReport.from_json(job["report"])
        rep.phase = Phase.DONE.value
        return rep

    def migrate_runs(self, runs, sample_fraction=0.05, seed=0):
        """Migrate ``runs`` in order; full verification for the leading scope."""
        sealed = [r for r in runs if self.store.catalog.is_sealed(r)]
        scope = set(self.full_scope(sealed))
        total = VerificationReport(seed=seed, sample_fraction=sample_fraction)
        for run in sealed:
            total.merge(self.migrate_run(run, sample_fraction, seed, full=run in scope))
        total.phase = Phase.DONE.value
        return total


def _compressed_size(pieces, level=-1):
    comp = zlib.compressobj(level)
    n = 0
    for piece in pieces:
        n += len(comp.compress(piece))
    return n + len(comp.flush())


def _file_chunks(path, size=1 << 20):
    with open(path, "rb") as fh:
        yield from iter(lambda: fh.read(size), b"")


def overhead_of_files(paths, backend, level=-1):
    """Structural and post-compression overhead of a set of backend files."""
    backend = Backend(backend)
    payload = files = comp_files = comp_payload = 0
    for path in paths:
        files += os.path.getsize(path)
        view = backends.container_payloads if backend is Backend.CONTAINER_A else backends.flat_payloads
        payload += sum(len(p) for p in view(path))
        comp_files += _compressed_size(_file_chunks(path), level)
        comp_payload += _compressed_size(view(path), level)
    return {
        "backend": backend.name,
        "files": len(paths),
        "payload_bytes": payload,
        "file_bytes": files,
        "structural_overhead": files / payload - 1 if payload else 0.0,
        "post_compression_overhead": comp_files / comp_payload - 1 if comp_payload else 0.0,
    }


def overhead_report(store, backend, db_ids=None):
    """Overhead of every ``backend`` file in ``db_ids`` (all databases if None)."""
    backend = Backend(backend)
    fids = [fid for entry in store.catalog.databases()
            if entry.backend is backend and (db_ids is None or entry.db_id in db_ids)
            for fid in entry.files if fid in store.hsm]
    with contextlib.ExitStack() as stack:
        paths = [stack.enter_context(store.hsm.pinned(fid)) for fid in fids]
        return overhead_of_files(paths, backend)
