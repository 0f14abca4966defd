"""The federation catalog.

Holds event headers, the database registry and the file -> database map.
Every mutation runs under a lease; the lease id doubles as the transaction
id in the journal. Mutations are applied in memory immediately (readers see
them at once, without locking) and recorded in an undo log until the holder
commits or releases. If the holder dies, its lease runs out and
``reap_expired`` undoes the work and journals a rollback, so replay skips it.
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass

from .._util import CrashPoints, RealClock
from ..errors import (
    Conflict,
    CreationTimeout,
    DuplicateName,
    Expired,
    LeaseRequired,
    NotFound,
    NotHolder,
    NotOpen,
    PermissionDenied,
    SequenceGap,
    ServiceStalled,
    VersionAlreadyBound,
)
from .journal import Journal, encode_headers, encode_json
from .leases import LeaseTable
from .types import (
    CREATE_RESOURCE,
    Backend,
    ChunkResult,
    DatabaseEntry,
    DbState,
    EventId,
    LockMode,
    StorageLocator,
    db_resource,
    run_resource,
)

log = logging.getLogger(__name__)

DEFAULT_TTL = 10.0

# every place create_database can be interrupted; "torn" ones leave a half-written journal record
CREATE_CRASH_POINTS = ("create.before_begin", "create.torn_begin", "create.after_begin",
                       "create.torn_commit", "create.after_commit", "create.after_release")


@dataclass(frozen=True)
class CatalogStats:
    header_count: int
    header_bytes: int
    payload_bytes: int
    metadata_ratio: float  # 0.0 when there is no payload yet


class Catalog:
    def __init__(self, journal=None, clock=None, default_ttl=DEFAULT_TTL,
                 crash=None, create_timeout=30.0):
        self.journal = journal if journal is not None else Journal()
        self.clock = clock or RealClock()
        self.default_ttl = default_ttl
        self.crash = crash or CrashPoints()
        self.create_timeout = create_timeout

        self._mu = threading.RLock()
        self._create_cv = threading.Condition(self._mu)
        self._create_queue = collections.deque()

        self._dbs = {}
        self._db_by_name = {}
        self._file_db = {}
        self._next_db = 1
        self._next_file = 1
        self._runs = {}
        self._sealed = set()
        self._chunks = {}
        self._header_bytes = 0
        self._payload_bytes = 0
        self.meta = {}

        self.leases = LeaseTable()
        self._undo = {}
        self._on_commit = {}
        self._run_owner = {}
        self.stalled_until = float("-inf")
        self.recovered = []
        self.reaped_total = 0

    # ------------------------------------------------------------------ load

    @classmethod
    def open(cls, journal, records=None, **kw):
        cat = cls(journal, **kw)
        cat._replay(journal.records() if records is None else records)
        return cat

    def _replay(self, records):
        pending = collections.defaultdict(list)
        max_txn = 0
        for rec in records:
            op = rec["op"]
            if op.startswith("hsm."):
                continue
            txn = rec.get("txn", 0)
            max_txn = max(max_txn, txn)
            if op == "commit":
                for r in pending.pop(txn, []):
                    self._apply(r)
            elif op == "rollback":
                pending.pop(txn, None)
            elif txn:
                pending[txn].append(rec)
                if op == "db.create.begin":
                    self._next_db = max(self._next_db, rec["entry"]["db_id"] + 1)
            else:
                self._apply(rec)
        for txn, recs in pending.items():
            for r in recs:
                if r["op"] == "db.create.begin":
                    self.recovered.append(r["entry"]["name"])
                    log.warning("rolled back interrupted creation of %s", r["entry"]["name"])
            self.journal.append_json({"op": "rollback", "txn": txn})
        self.leases = LeaseTable(first_id=max_txn + 1)

    def _apply(self, rec):
        op = rec["op"]
        if op in ("db.create.begin", "db.snapshot"):
            entry = DatabaseEntry.from_json(rec["entry"])
            if op == "db.create.begin":
                entry.state = DbState.OPEN
            self._dbs[entry.db_id] = entry
            self._db_by_name[entry.name] = entry.db_id
            self._next_db = max(self._next_db, entry.db_id + 1)
            for fid in entry.files:
                self._file_db[fid] = entry.db_id
                self._next_file = max(self._next_file, fid + 1)
        elif op == "db.seal":
            self._dbs[rec["db_id"]].state = DbState.SEALED
        elif op == "file.alloc":
            self._bind_file(rec["db_id"], rec["file_id"])
        elif op == "headers":
            for h in rec["headers"]:
                self._runs.setdefault(h.id.run, []).append(h)
                self._header_bytes += h.packed_size
                self._payload_bytes += h.raw.length
        elif op == "chunk":
            r = ChunkResult(**rec["result"])
            self._chunks[(r.run, r.sequence)] = r
        elif op == "dst":
            run_list = self._runs[rec["run"]]
            h = run_list[rec["event"]]
            loc = StorageLocator.unpack(bytes.fromhex(rec["loc"]))
            run_list[rec["event"]] = h.with_dst(rec["version"], loc)
            self._header_bytes += run_list[rec["event"]].packed_size - h.packed_size
        elif op == "rebind":
            blob = bytes.fromhex(rec["locs"])
            old = self._runs[rec["run"]]
            self._runs[rec["run"]] = [
                h.with_raw(StorageLocator.unpack(blob, i * StorageLocator.SIZE))
                for i, h in enumerate(old)
            ]
        elif op == "run.seal":
            self._sealed.add(rec["run"])
        elif op == "meta":
            self.meta[rec["key"]] = rec["value"]
        else:
            raise ValueError(f"unknown catalog journal op {op!r}")

    def _bind_file(self, db_id, file_id):
        entry = self._dbs[db_id]
        if file_id not in entry.files:
            entry.files.append(file_id)
        self._file_db[file_id] = db_id
        self._next_file = max(self._next_file, file_id + 1)

    def snapshot_bodies(self):
        """Encoded records that rebuild the committed state (for compaction)."""
        with self._mu:
            if self._undo:
                raise RuntimeError("cannot compact with open transactions")
            out = [encode_json({"op": "db.snapshot", "entry": e.to_json()})
                   for e in self._dbs.values()]
            for run, headers in self._runs.items():
                for i in range(0, len(headers), 4096):
                    out.append(encode_headers(0, 0, headers[i:i + 4096]))
            out += [encode_json({"op": "run.seal", "run": r}) for r in sorted(self._sealed)]
            out += [encode_json({"op": "chunk", "result": r.__dict__}) for r in self._chunks.values()]
            out += [encode_json({"op": "meta", "key": k, "value": v}) for k, v in self.meta.items()]
            return out

    # ------------------------------------------------------------- leases

    def _check_stall(self):
        if self.clock.now() < self.stalled_until:
            raise ServiceStalled(f"lock service stalled until t={self.stalled_until:.1f}")

    def stall(self, duration):
        """Make the lock service unresponsive for ``duration`` seconds."""
        self.stalled_until = self.clock.now() + duration

    def acquire_lease(self, holder, resource, mode=LockMode.EXCLUSIVE, ttl=None):
        if mode is LockMode.EXCLUSIVE and not holder.write:
            raise PermissionDenied(f"{holder} is read-only; exclusive leases need write mode")
        with self._mu:
            self._check_stall()
            now = self.clock.now()
            blocking = self.leases.blocking(resource, mode)
            for lease in blocking:
                if lease.expires_at < now:
                    self._reap_one(lease)
            blocking = self.leases.blocking(resource, mode)
            if blocking:
                raise Conflict(resource, blocking[0].holder)
            return self.leases.grant(holder, resource, mode, now + (ttl or self.default_ttl))

    def _live_lease(self, lease_id, holder):
        lease = self.leases.get(lease_id)
        if lease is None:
            raise Expired(f"lease {lease_id} is gone (expired and reaped, or released)")
        if not lease.holder.same_client(holder):
            raise NotHolder(f"lease {lease_id} belongs to {lease.holder}, not {holder}")
        if lease.expires_at < self.clock.now():
            self._reap_one(lease)
            raise Expired(f"lease {lease_id} expired")
        return lease

    def renew_lease(self, lease_id, holder, ttl=None):
        with self._mu:
            self._check_stall()
            lease = self._live_lease(lease_id, holder)
            self.leases.extend(lease_id, self.clock.now() + (ttl or self.default_ttl))
            return lease

    def commit(self, lease_id, holder):
        with self._mu:
            self._live_lease(lease_id, holder)
            self._commit(lease_id)

    def release_lease(self, lease_id, holder):
        """Commit the holder's pending work and free the resource."""
        with self._mu:
            self._live_lease(lease_id, holder)
            self._commit(lease_id)
            self.leases.remove(lease_id)
            self._create_cv.notify_all()

    def reap_expired(self, now=None):
        now = self.clock.now() if now is None else now
        with self._mu:
            if self.clock.now() < self.stalled_until:
                return []
            reaped = self.leases.pop_expired(now)
            for lease in reaped:
                self._rollback(lease)
            if reaped:
                self._create_cv.notify_all()
            return [l.lease_id for l in reaped]

    def _reap_one(self, lease):
        self.leases.remove(lease.lease_id)
        self._rollback(lease)
        self._create_cv.notify_all()

    def _rollback(self, lease):
        self.reaped_total += 1
        undo = self._undo.pop(lease.lease_id, None)
        self._on_commit.pop(lease.lease_id, None)
        if undo:
            for fn in reversed(undo):
                fn()
            self.journal.append_json({"op": "rollback", "txn": lease.lease_id})
            log.info("reaped lease %d of %s: rolled back %d mutations",
                     lease.lease_id, lease.holder, len(undo))

    def _commit(self, txn, torn=False):
        undo = self._undo.pop(txn, None)
        if undo is None:
            return
        self.journal.append_json({"op": "commit", "txn": txn}, torn=torn)
        for fn in self._on_commit.pop(txn, []):
            fn()
        for run in [r for r, owner in self._run_owner.items() if owner == txn]:
            del self._run_owner[run]

    def _record(self, txn, undo_fn, on_commit=None):
        self._undo.setdefault(txn, []).append(undo_fn)
        if on_commit is not None:
            self._on_commit.setdefault(txn, []).append(on_commit)

    def _write_lease(self, lease_id, resources):
        lease = self.leases.get(lease_id)
        if (lease is None or lease.mode is not LockMode.EXCLUSIVE
                or lease.resource not in resources or not lease.holder.write):
            raise LeaseRequired(f"need an exclusive write lease on one of {sorted(resources)}")
        if lease.expires_at < self.clock.now():
            self._reap_one(lease)
            raise Expired(f"lease {lease_id} expired")
        return lease

    # ------------------------------------------------------------ databases

    def create_database(self, name, affinity, holder, backend=Backend.CONTAINER_A,
                        timeout=None, torn=None):
        """Create a database; creations are serialized FIFO.

        ``torn`` names a journal write ("begin" or "commit") to leave half
        written before crashing; only meaningful for whole-service crash
        tests, where the journal is reopened afterwards.
        """
        if not holder.write:
            raise PermissionDenied(f"{holder} is read-only")
        timeout = self.create_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        ticket = object()
        with self._create_cv:
            if name in self._db_by_name:
                raise DuplicateName(name)
            self._create_queue.append(ticket)
            try:
                while True:
                    if self._create_queue[0] is ticket:
                        try:
                            lease = self.acquire_lease(holder, CREATE_RESOURCE, LockMode.EXCLUSIVE)
                            break
                        except Conflict:
                            pass
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise CreationTimeout(f"gave up waiting to create {name}")
                    self._create_cv.wait(min(remaining, 0.05))
                    self.reap_expired()
            finally:
                self._create_queue.remove(ticket)
                self._create_cv.notify_all()

            if name in self._db_by_name:
                self.leases.remove(lease.lease_id)
                raise DuplicateName(name)
            txn = lease.lease_id
            db_id = self._next_db
            self._next_db += 1
            entry = DatabaseEntry(db_id, name, affinity, DbState.CREATING, time.time(), backend)

        self.crash.hit("create.before_begin")
        with self._mu:
            self.journal.append_json({"op": "db.create.begin", "txn": txn, "entry": entry.to_json()},
                                     torn=torn == "begin")
            if torn == "begin":
                self.crash.hit("create.torn_begin")
            self._dbs[db_id] = entry
            self._db_by_name[name] = db_id

            def undo():
                self._dbs.pop(db_id, None)
                self._db_by_name.pop(name, None)

            def opened():
                entry.state = DbState.OPEN

            self._record(txn, undo, opened)
        self.crash.hit("create.after_begin")
        with self._mu:
            self._live_lease(txn, holder)
            self._commit(txn, torn=torn == "commit")
            if torn == "commit":
                self.crash.hit("create.torn_commit")
        self.crash.hit("create.after_commit")
        self.release_lease(txn, holder)
        self.crash.hit("create.after_release")
        return db_id

    def database(self, db_id):
        try:
            return self._dbs[db_id]
        except KeyError:
            raise NotFound(f"no database {db_id}") from None

    def database_by_name(self, name):
        try:
            return self._dbs[self._db_by_name[name]]
        except KeyError:
            raise NotFound(f"no database named {name!r}") from None

    def databases(self):
        return list(self._dbs.values())

    def allocate_file(self, db_id):
        """Assign a new catalog-wide file id to ``db_id``."""
        with self._mu:
            self.database(db_id)
            fid = self._next_file
            self._next_file += 1
            self.journal.append_json({"op": "file.alloc", "db_id": db_id, "file_id": fid})
            self._bind_file(db_id, fid)
            return fid

    def file_database(self, file_id):
        try:
            return self._dbs[self._file_db[file_id]]
        except KeyError:
            raise NotFound(f"file {file_id} is not in the catalog") from None

    def seal_database(self, db_id, lease_id):
        with self._mu:
            self._check_stall()
            self._write_lease(lease_id, {db_resource(db_id)})
            entry = self.database(db_id)
            if entry.state is DbState.SEALED:
                return
            if entry.state is not DbState.OPEN:
                raise NotOpen(f"database {db_id} is {entry.state.value}")
            self.journal.append_json({"op": "db.seal", "txn": lease_id, "db_id": db_id})
            entry.state = DbState.SEALED

            def undo():
                entry.state = DbState.OPEN

            self._record(lease_id, undo)

    # -------------------------------------------------------------- headers

    def put_headers(self, db_id, batch, lease_id):
        with self._mu:
            self._check_stall()
            entry = self._dbs.get(db_id)
            if entry is None or entry.state is not DbState.OPEN:
                raise NotOpen(f"database {db_id} is not open")
            lease = self._write_lease(lease_id, {db_resource(db_id)})
            if not batch:
                return 0
            expected = {}
            for h in batch:
                run = h.id.run
                if run not in expected:
                    if run in self._sealed:
                        raise SequenceGap(f"run {run} is sealed")
                    owner = self._run_owner.get(run)
                    if owner is not None and owner != lease_id:
                        other = self.leases.get(owner)
                        raise Conflict(run_resource(run), other.holder if other else owner)
                    expected[run] = len(self._runs.get(run, ()))
                if h.id.event != expected[run]:
                    raise SequenceGap(f"run {run}: expected event {expected[run]}, got {h.id.event}")
                expected[run] += 1

            self.journal.append(encode_headers(lease_id, db_id, batch))
            before = {run: len(self._runs.get(run, ())) for run in expected}
            hbytes = sum(h.packed_size for h in batch)
            pbytes = sum(h.raw.length for h in batch)
            for h in batch:
                self._runs.setdefault(h.id.run, []).append(h)
            self._header_bytes += hbytes
            self._payload_bytes += pbytes
            owners_before = {run: self._run_owner.get(run) for run in expected}
            for run in expected:
                self._run_owner[run] = lease.lease_id

            def undo():
                for run, n in before.items():
                    del self._runs[run][n:]
                    if not self._runs[run]:
                        del self._runs[run]
                    if owners_before[run] is None:
                        self._run_owner.pop(run, None)
                self._header_bytes -= hbytes
                self._payload_bytes -= pbytes

            self._record(lease_id, undo)
            return len(batch)

    def get_header(self, id):
        headers = self._runs.get(id.run)
        if headers is None or id.event >= len(headers):
            raise NotFound(f"no event {id}")
        return headers[id.event]

    def headers(self, run):
        """Snapshot of a run's headers, in event order."""
        return list(self._runs.get(run, ()))

    def runs(self):
        return sorted(self._runs)

    def run_length(self, run):
        return len(self._runs.get(run, ()))

    def seal_run(self, run, holder):
        if not holder.write:
            raise PermissionDenied(f"{holder} is read-only")
        with self._mu:
            self._check_stall()
            if run in self._sealed:
                return
            if run in self._run_owner:
                raise Conflict(run_resource(run), self._run_owner[run])
            self.journal.append_json({"op": "run.seal", "run": run})
            self._sealed.add(run)

    def is_sealed(self, run):
        return run in self._sealed

    def attach_dst(self, id, version, loc, lease_id):
        with self._mu:
            self._check_stall()
            h = self.get_header(id)
            self._write_lease(lease_id, {run_resource(id.run), db_resource(self._file_db.get(h.raw.file_id))})
            if version in h.dsts:
                raise VersionAlreadyBound(f"{id} already has {version!r}")
            if len(version.encode()) > 255:
                raise ValueError("version label too long")
            self.journal.append_json({"op": "dst", "txn": lease_id, "run": id.run, "event": id.event,
                                      "version": version, "loc": loc.pack().hex()})
            new = h.with_dst(version, loc)
            run_list = self._runs[id.run]
            run_list[id.event] = new
            delta = new.packed_size - h.packed_size
            self._header_bytes += delta

            def undo():
                if run_list[id.event] is new:
                    run_list[id.event] = h
                    self._header_bytes -= delta

            self._record(lease_id, undo)

    def rebind_raw(self, run, locators, lease_id):
        """Atomically replace the RAW locator of every event of ``run``."""
        with self._mu:
            self._check_stall()
            self._write_lease(lease_id, {run_resource(run)})
            old = self._runs.get(run)
            if old is None or len(locators) != len(old):
                raise ValueError(f"run {run}: need {len(old or ())} locators, got {len(locators)}")
            for h, loc in zip(old, locators):
                if loc.length != h.raw.length or loc.checksum != h.raw.checksum:
                    raise ValueError(f"new locator for {h.id} does not describe the same payload")
            self.journal.append_json({"op": "rebind", "txn": lease_id, "run": run,
                                      "locs": b"".join(l.pack() for l in locators).hex()})
            new = [h.with_raw(loc) for h, loc in zip(old, locators)]
            self._runs[run] = new

            def undo():
                if self._runs.get(run) is new:
                    self._runs[run] = old

            self._record(lease_id, undo)

    # ---------------------------------------------------------- chunk/meta

    def chunk_result(self, run, sequence):
        return self._chunks.get((run, sequence))

    def record_chunk(self, result, lease_id):
        with self._mu:
            self._write_lease(lease_id, {db_resource(result.db_id)})
            key = (result.run, result.sequence)
            self.journal.append_json({"op": "chunk", "txn": lease_id, "result": result.__dict__})

            def publish():
                # visible only once committed, so a retry never skips rolled-back work
                self._chunks[key] = result

            self._record(lease_id, lambda: None, on_commit=publish)

    def set_meta(self, key, value):
        with self._mu:
            self.journal.append_json({"op": "meta", "key": key, "value": value})
            self.meta[key] = value

    # --------------------------------------------------------------- stats

    def catalog_stats(self):
        count = sum(len(h) for h in self._runs.values())
        ratio = self._header_bytes / self._payload_bytes if self._payload_bytes else 0.0
        return CatalogStats(count, self._header_bytes, self._payload_bytes, ratio)

    def consistency_check(self):
        """Return a list of problems; empty means consistent."""
        problems = []
        with self._mu:
            names = {}
            for e in self._dbs.values():
                if e.name in names:
                    problems.append(f"duplicate database name {e.name}")
                names[e.name] = e.db_id
                if e.state is DbState.CREATING:
                    live = [l for l in self.leases.on(CREATE_RESOURCE)
                            if l.expires_at >= self.clock.now()]
                    if not live:
                        problems.append(f"database {e.db_id} stuck in Creating")
            creating = [e for e in self._dbs.values() if e.state is DbState.CREATING]
            if len(creating) > 1:
                problems.append(f"{len(creating)} databases in Creating at once")
            hbytes = pbytes = 0
            for run, headers in self._runs.items():
                for i, h in enumerate(headers):
                    if h.id != EventId(run, i):
                        problems.append(f"run {run} position {i} holds {h.id}")
                        break
                    if h.raw.file_id not in self._file_db:
                        problems.append(f"{h.id} points at unknown file {h.raw.file_id}")
                    hbytes += h.packed_size
                    pbytes += h.raw.length
            if (hbytes, pbytes) != (self._header_bytes, self._payload_bytes):
                problems.append("byte counters disagree with header contents")
            dangling = [l for l in self.leases if l.mode is LockMode.EXCLUSIVE
                        and l.expires_at < self.clock.now()]
            problems += [f"expired exclusive lease {l.lease_id} on {l.resource}" for l in dangling]
        return problems
