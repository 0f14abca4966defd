"""Simulated hierarchical storage manager: a disk cache pool over a tape tier.

Files move through five states::

    DiskOnly -> MigratingToTape -> OnTapeCached -> TapeOnly -> Recalling
                      |  (write failed)                 ^          |
                      +-> DiskOnly                       +----------+ (recall failed)
                                       Recalling -> OnTapeCached

Tape copies hold zlib-compressed bytes and are verified (decompress + CRC)
before a file leaves MigratingToTape. Disk bytes are only ever deleted from
OnTapeCached. Timing is simulated through the injected clock: a recall costs
a mount latency plus the compressed size over the tape bandwidth; migration
progress is metered by the byte budget the caller hands to
``migrate_pending``.
"""

from __future__ import annotations

import collections
import contextlib
import enum
import logging
import os
import threading
import zlib
from dataclasses import asdict, dataclass, replace

from ._util import CrashPoints, MiB, GiB, RealClock, crc32
from .errors import (
    ChecksumMismatch,
    DuplicateName,
    NoSuchFile,
    NotEvictable,
    RangeOutOfBounds,
    RecallFailed,
    TapeWriteFailed,
)

log = logging.getLogger(__name__)


class FileState(enum.Enum):
    DISK_ONLY = "DiskOnly"
    MIGRATING = "MigratingToTape"
    ON_TAPE_CACHED = "OnTapeCached"
    TAPE_ONLY = "TapeOnly"
    RECALLING = "Recalling"


S = FileState
TRANSITIONS = frozenset({
    (S.DISK_ONLY, S.MIGRATING),
    (S.MIGRATING, S.ON_TAPE_CACHED),
    (S.MIGRATING, S.DISK_ONLY),
    (S.ON_TAPE_CACHED, S.TAPE_ONLY),
    (S.TAPE_ONLY, S.RECALLING),
    (S.RECALLING, S.ON_TAPE_CACHED),
    (S.RECALLING, S.TAPE_ONLY),
})
ON_DISK = frozenset({S.DISK_ONLY, S.MIGRATING, S.ON_TAPE_CACHED})


@dataclass
class TapeCopy:
    volume_id: int
    position: int
    stored_bytes: int
    checksum_after_decompress: int
    offset: int = 0
    verified: bool = True
    reference_bytes: int | None = None  # compressed size of the bare payloads


@dataclass
class ManagedFile:
    file_id: int
    logical_name: str
    size: int
    checksum: int
    path: str
    state: FileState = S.DISK_ONLY
    tape_copy: TapeCopy | None = None
    last_access: float = 0.0
    pinned_until: float = 0.0
    kind: str = "flat"
    seq: int = 0

    def to_json(self):
        d = asdict(self)
        d["state"] = self.state.value
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["state"] = FileState(d["state"])
        if d["tape_copy"] is not None:
            d["tape_copy"] = TapeCopy(**d["tape_copy"])
        return cls(**d)


@dataclass
class HsmConfig:
    capacity: int = 8 * GiB
    tape_bandwidth: float = 20 * MiB
    mount_latency: float = 0.2
    pin_window: float = 60.0
    volume_capacity: int = 4 * GiB
    compress_level: int = -1  # zlib default
    recall_retries: int = 2
    track_overhead: bool = True


class TapeLibrary:
    """Append-only tape volumes stored as files under ``root``."""

    def __init__(self, root, volume_capacity=4 * GiB):
        self.root = root
        self.volume_capacity = volume_capacity
        os.makedirs(root, exist_ok=True)
        self._lock = threading.Lock()
        vols = sorted(int(n[4:9]) for n in os.listdir(root) if n.startswith("vol-"))
        self.volume = vols[-1] if vols else 1
        self.positions = collections.Counter()
        self.mounts = 0

    def _path(self, volume_id):
        return os.path.join(self.root, f"vol-{volume_id:05d}.tape")

    def append(self, blob):
        with self._lock:
            path = self._path(self.volume)
            size = os.path.getsize(path) if os.path.exists(path) else 0
            if size and size + len(blob) > self.volume_capacity:
                self.volume += 1
                path, size = self._path(self.volume), 0
            with open(path, "ab") as fh:
                fh.write(blob)
            pos = self.positions[self.volume]
            self.positions[self.volume] += 1
            return self.volume, pos, size

    def read(self, copy):
        with open(self._path(copy.volume_id), "rb") as fh:
            fh.seek(copy.offset)
            return fh.read(copy.stored_bytes)

    def overwrite(self, copy, rel_offset, data):
        """Damage a stored copy in place (fault injection)."""
        with open(self._path(copy.volume_id), "r+b") as fh:
            fh.seek(copy.offset + rel_offset)
            fh.write(data)


def _flip(blob, index):
    b = bytearray(blob)
    b[index % len(b)] ^= 0xFF
    return bytes(b)


class HSM:
    def __init__(self, root, config=None, clock=None, journal=None, payload_views=None, crash=None):
        self.config = config or HsmConfig()
        self.clock = clock or RealClock()
        self.journal = journal
        self.tape = TapeLibrary(os.path.join(root, "tape"), self.config.volume_capacity)
        self.disk_root = os.path.join(root, "disk")
        os.makedirs(self.disk_root, exist_ok=True)
        self.payload_views = payload_views or {}
        self.crash = crash or CrashPoints()

        self._mu = threading.RLock()
        self._files = {}
        self._names = {}
        self._pending = collections.OrderedDict()  # DiskOnly files in FIFO order
        self._progress = {}
        self._recalls = {}
        self._readers = collections.Counter()
        self._seq = 0
        self._next_id = 1
        self.used = 0

        self.tape_stalled = False
        self.tape_slow_factor = 1.0
        self.corrupt_next_write = 0
        self.recall_count = 0
        self.failed_writes = 0
        self.tape_streamed_bytes = 0  # bytes credited to the tape stream
        self.tape_committed_bytes = 0  # file bytes with a verified copy
        self.transition_log = []

    # --------------------------------------------------------- persistence

    def _journal(self, op, **body):
        if self.journal is not None:
            self.journal.append_json({"op": op, **body})

    def load(self, records):
        """Rebuild state from journal records (the catalog ignores ``hsm.*``)."""
        for rec in records:
            op = rec["op"]
            if op in ("hsm.register", "hsm.state"):
                f = ManagedFile.from_json(rec["file"])
                old = self._files.get(f.file_id)
                if old is not None and (old.state in ON_DISK or old.state is S.RECALLING):
                    self.used -= old.size
                self._files[f.file_id] = f
                self._names[f.logical_name] = f.file_id
                if f.state in ON_DISK or f.state is S.RECALLING:
                    self.used += f.size
                self._seq = max(self._seq, f.seq + 1)
                self._next_id = max(self._next_id, f.file_id + 1)
            elif op == "hsm.unregister":
                f = self._files.pop(rec["file_id"], None)
                if f is not None:
                    self._names.pop(f.logical_name, None)
                    if f.state in ON_DISK:
                        self.used -= f.size
        # states that only exist while a worker is active fall back
        for f in sorted(self._files.values(), key=lambda f: f.seq):
            if f.state is S.MIGRATING:
                f.state = S.DISK_ONLY
                self._journal("hsm.state", file=f.to_json())
            elif f.state is S.RECALLING:
                f.state = S.TAPE_ONLY
                self.used -= f.size
                if os.path.exists(f.path):
                    os.remove(f.path)
                self._journal("hsm.state", file=f.to_json())
            if f.state is S.DISK_ONLY:
                self._pending[f.file_id] = None

    def snapshot_bodies(self):
        from .catalog.journal import encode_json

        with self._mu:
            return [encode_json({"op": "hsm.register", "file": f.to_json()})
                    for f in self._files.values()]

    # ---------------------------------------------------------- namespace

    def register_file(self, logical_name, disk_path, size, checksum, file_id=None, kind="flat"):
        actual = os.path.getsize(disk_path)
        with open(disk_path, "rb") as fh:
            got = 0
            for block in iter(lambda: fh.read(4 * MiB), b""):
                got = crc32(block, got)
        if actual != size or got != checksum:
            raise ChecksumMismatch(f"{logical_name}: disk has {actual} B crc {got:08x}, "
                                   f"caller claims {size} B crc {checksum:08x}")
        with self._mu:
            if logical_name in self._names:
                raise DuplicateName(logical_name)
            if file_id is None:
                file_id = self._next_id
            if file_id in self._files:
                raise DuplicateName(f"file id {file_id}")
            self._next_id = max(self._next_id, file_id + 1)
            now = self.clock.now()
            f = ManagedFile(file_id, logical_name, size, checksum, os.path.abspath(disk_path),
                            last_access=now, pinned_until=now + self.config.pin_window,
                            kind=kind, seq=self._seq)
            self._seq += 1
            self._files[file_id] = f
            self._names[logical_name] = file_id
            self._pending[file_id] = None
            self.used += size
            self._journal("hsm.register", file=f.to_json())
            return file_id

    def lookup(self, logical_name):
        with self._mu:
            try:
                return self._files[self._names[logical_name]].file_id
            except KeyError:
                raise NoSuchFile(logical_name) from None

    def __contains__(self, file_id):
        return file_id in self._files

    def stat(self, file_id):
        with self._mu:
            return replace(self._get(file_id))

    def files(self):
        with self._mu:
            return [replace(f) for f in self._files.values()]

    def _get(self, file_id):
        try:
            return self._files[file_id]
        except KeyError:
            raise NoSuchFile(f"file {file_id} is not managed") from None

    def _transition(self, f, new):
        if (f.state, new) not in TRANSITIONS:
            raise AssertionError(f"illegal transition {f.state.value} -> {new.value}")
        self.transition_log.append((f.file_id, f.state, new))
        if f.state in ON_DISK and new not in ON_DISK and new is not S.RECALLING:
            self.used -= f.size
        elif f.state is S.RECALLING and new is S.TAPE_ONLY:
            self.used -= f.size
        elif f.state is S.TAPE_ONLY and new is S.RECALLING:
            self.used += f.size
        f.state = new
        self._journal("hsm.state", file=f.to_json())

    # ----------------------------------------------------------- migration

    @property
    def tape_backlog_bytes(self):
        with self._mu:
            return sum(self._files[fid].size - self._progress.get(fid, 0) for fid in self._pending)

    def migrate_pending(self, max_files=None, byte_budget=None):
        """Copy DiskOnly files to tape in registration order.

        With ``byte_budget`` the call streams at most that many bytes and
        leaves a partially streamed file MigratingToTape for the next call.
        Without it, whole files are written at once. A failed tape write puts
        the file back to DiskOnly, still first in line, and raises
        ``TapeWriteFailed``.
        """
        migrated = []
        if self.tape_stalled:
            return migrated
        budget = None if byte_budget is None else byte_budget / self.tape_slow_factor
        while True:
            if max_files is not None and len(migrated) >= max_files:
                break
            with self._mu:
                if not self._pending:
                    break
                fid = next(iter(self._pending))
                f = self._files[fid]
                if f.state is S.DISK_ONLY:
                    self._transition(f, S.MIGRATING)
                if budget is not None:
                    done = self._progress.get(fid, 0)
                    take = min(f.size - done, budget)
                    budget -= take
                    self._progress[fid] = done + take
                    self.tape_streamed_bytes += take
                    if done + take < f.size:
                        break
                else:
                    self.tape_streamed_bytes += f.size - self._progress.get(fid, 0)
            try:
                self._write_copy(f)
            except TapeWriteFailed as exc:
                log.warning("%s", exc)
                with self._mu:
                    self._progress.pop(fid, None)
                    self._transition(f, S.DISK_ONLY)
                raise
            migrated.append(fid)
            if budget is not None and budget <= 0:
                break
        return migrated

    def _payload_reference(self, f):
        view = self.payload_views.get(f.kind)
        if view is None or not self.config.track_overhead:
            return None
        comp = zlib.compressobj(self.config.compress_level)
        n = 0
        for piece in view(f.path):
            n += len(comp.compress(piece))
        return n + len(comp.flush())

    def _write_copy(self, f):
        with open(f.path, "rb") as fh:
            data = fh.read()
        blob = zlib.compress(data, self.config.compress_level)
        del data
        if self.corrupt_next_write:
            self.corrupt_next_write -= 1
            blob = _flip(blob, len(blob) // 2)
        volume, position, offset = self.tape.append(blob)
        self.crash.hit("hsm.after_tape_write")
        copy = TapeCopy(volume, position, len(blob), 0, offset)
        try:
            back = zlib.decompress(self.tape.read(copy))
            copy.checksum_after_decompress = crc32(back)
        except zlib.error:
            back = None
        if back is None or copy.checksum_after_decompress != f.checksum or len(back) != f.size:
            self.failed_writes += 1
            raise TapeWriteFailed(f"{f.logical_name}: tape copy failed verification")
        del back
        copy.reference_bytes = self._payload_reference(f)
        self.crash.hit("hsm.after_verify")
        with self._mu:
            f.tape_copy = copy
            self._pending.pop(f.file_id, None)
            self._progress.pop(f.file_id, None)
            self.tape_committed_bytes += f.size
            self._transition(f, S.ON_TAPE_CACHED)

    # ------------------------------------------------------------ eviction

    def evict(self, file_id):
        with self._mu:
            f = self._get(file_id)
            now = self.clock.now()
            if f.state is not S.ON_TAPE_CACHED or f.tape_copy is None or not f.tape_copy.verified:
                raise NotEvictable(f"file {file_id} is {f.state.value}")
            if now <= f.pinned_until:
                raise NotEvictable(f"file {file_id} is pinned for {f.pinned_until - now:.1f}s more")
            if self._readers[file_id]:
                raise NotEvictable(f"file {file_id} has active readers")
            self._transition(f, S.TAPE_ONLY)
            if os.path.exists(f.path):
                os.remove(f.path)

    def cache_gc(self, target_free):
        """Evict least-recently-accessed eligible files until at least
        ``target_free`` bytes of the pool are free. Returns bytes freed."""
        freed = 0
        with self._mu:
            now = self.clock.now()
            eligible = sorted(
                (f for f in self._files.values()
                 if f.state is S.ON_TAPE_CACHED and now > f.pinned_until
                 and not self._readers[f.file_id]),
                key=lambda f: f.last_access)
            for f in eligible:
                if self.config.capacity - self.used >= target_free:
                    break
                self.evict(f.file_id)
                freed += f.size
        return freed

    @property
    def under_pressure(self):
        return self.used > self.config.capacity

    # -------------------------------------------------------------- recall

    def ensure_online(self, file_id):
        """Return a readable disk path, recalling from tape if needed."""
        path = self._acquire(file_id)
        self._release(file_id)
        return path

    @contextlib.contextmanager
    def pinned(self, file_id):
        """Disk path of the file, kept on disk for the duration of the block."""
        path = self._acquire(file_id)
        try:
            yield path
        finally:
            self._release(file_id)

    def _acquire(self, file_id):
        while True:
            with self._mu:
                f = self._get(file_id)
                if f.state in ON_DISK:
                    f.last_access = self.clock.now()
                    self._readers[file_id] += 1
                    return f.path
                if f.state is S.RECALLING:
                    waiter = self._recalls[file_id]
                    leader = False
                else:
                    waiter = self._recalls[file_id] = {"done": threading.Event(), "error": None}
                    self._transition(f, S.RECALLING)
                    leader = True
            if leader:
                self._recall(f, waiter)
            else:
                waiter["done"].wait()
            if waiter["error"] is not None:
                raise waiter["error"]

    def _release(self, file_id):
        with self._mu:
            self._readers[file_id] -= 1
            if not self._readers[file_id]:
                del self._readers[file_id]

    def _recall(self, f, waiter):
        cfg = self.config
        error = None
        try:
            for _attempt in range(cfg.recall_retries + 1):
                self.tape.mounts += 1
                self.clock.sleep(cfg.mount_latency + f.tape_copy.stored_bytes / cfg.tape_bandwidth)
                try:
                    data = zlib.decompress(self.tape.read(f.tape_copy))
                except zlib.error:
                    continue
                if crc32(data) == f.checksum:
                    tmp = f.path + ".recall"
                    with open(tmp, "wb") as fh:
                        fh.write(data)
                    os.replace(tmp, f.path)
                    break
            else:
                error = RecallFailed(f"{f.logical_name}: tape copy unreadable after "
                                     f"{cfg.recall_retries + 1} attempts")
        except OSError as exc:
            error = RecallFailed(f"{f.logical_name}: {exc}")
        with self._mu:
            self.recall_count += 1
            if error is None:
                now = self.clock.now()
                f.last_access = now
                f.pinned_until = now + cfg.pin_window
                self._transition(f, S.ON_TAPE_CACHED)
            else:
                self._transition(f, S.TAPE_ONLY)
            del self._recalls[f.file_id]
            waiter["error"] = error
        waiter["done"].set()

    def read_range(self, file_id, offset, length):
        path = self._acquire(file_id)
        try:
            f = self._files[file_id]
            if offset < 0 or length < 0 or offset + length > f.size:
                raise RangeOutOfBounds(f"[{offset}, {offset + length}) outside file {file_id} "
                                       f"of {f.size} bytes")
            with open(path, "rb") as fh:
                fh.seek(offset)
                return fh.read(length)
        finally:
            self._release(file_id)

    # ---------------------------------------------------------- observation

    def hsm_stats(self):
        with self._mu:
            per_state = {s.value: {"count": 0, "bytes": 0} for s in FileState}
            stored = raw = ref_stored = ref = 0
            by_kind = collections.defaultdict(lambda: [0, 0])
            for f in self._files.values():
                per_state[f.state.value]["count"] += 1
                per_state[f.state.value]["bytes"] += f.size
                c = f.tape_copy
                if c is not None:
                    stored += c.stored_bytes
                    raw += f.size
                    r = c.reference_bytes if c.reference_bytes is not None else (
                        c.stored_bytes if f.kind not in self.payload_views else None)
                    if r is not None:
                        ref_stored += c.stored_bytes
                        ref += r
                        by_kind[f.kind][0] += c.stored_bytes
                        by_kind[f.kind][1] += r
            return {
                "states": per_state,
                "used_bytes": self.used,
                "capacity": self.config.capacity,
                "tape_backlog_bytes": self.tape_backlog_bytes,
                "tape_stored_bytes": stored,
                "compression_ratio_observed": stored / raw if raw else 0.0,
                "overhead_on_tape": ref_stored / ref - 1 if ref else 0.0,
                "overhead_on_tape_by_kind": {k: s / r - 1 for k, (s, r) in by_kind.items() if r},
                "recalls": self.recall_count,
                "failed_tape_writes": self.failed_writes,
            }

    def verify_all(self):
        """Durability oracle: ids of files whose bytes cannot be recovered
        from disk or from a verified tape copy."""
        lost = []
        for f in self.files():
            if self._disk_ok(f):
                continue
            if f.tape_copy is not None and f.tape_copy.verified:
                try:
                    if crc32(zlib.decompress(self.tape.read(f.tape_copy))) == f.checksum:
                        continue
                except zlib.error:
                    pass
            lost.append(f.file_id)
        return lost

    @staticmethod
    def _disk_ok(f):
        if f.state not in ON_DISK or not os.path.exists(f.path):
            return False
        got = 0
        with open(f.path, "rb") as fh:
            for block in iter(lambda: fh.read(4 * MiB), b""):
                got = crc32(block, got)
        return got == f.checksum

    def has_safe_copy(self, file_id):
        with self._mu:
            f = self._files.get(file_id)
            return (f is not None and f.state in (S.ON_TAPE_CACHED, S.TAPE_ONLY)
                    and f.tape_copy is not None and f.tape_copy.verified)
