"""EventStore: one data root holding the catalog journal, disk pool and tape.

Layout under ``root``::

    catalog.evc   journal (catalog + HSM namespace)
    disk/         HSM disk pool (payload files)
    tape/         simulated tape volumes
"""

from __future__ import annotations

import logging
import os

from ._util import CrashPoints, RealClock, crc32
from .catalog import Backend, Catalog, EventId, Holder, Journal
from .catalog.catalog import DEFAULT_TTL
from .errors import ChecksumMismatch, NoSuchFile, NotFound, VersionUnbound
from .hsm import HSM, HsmConfig
from .migration import backends

log = logging.getLogger(__name__)

EXT = {Backend.CONTAINER_A: "cona", Backend.FLAT_B: "flat"}


class EventStore:
    def __init__(self, root, clock=None, hsm_config=None, ttl=DEFAULT_TTL, fsync=False, crash=None):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.clock = clock or RealClock()
        self.crash = crash or CrashPoints()
        self.journal = Journal(os.path.join(self.root, "catalog.evc"), fsync=fsync)
        records = self.journal.records()
        self.catalog = Catalog.open(self.journal, records, clock=self.clock, default_ttl=ttl,
                                    crash=self.crash)
        self.hsm = HSM(self.root, hsm_config or HsmConfig(), clock=self.clock, journal=self.journal,
                       payload_views=backends.PAYLOAD_VIEWS, crash=self.crash)
        self.hsm.load(records)
        self.admin = Holder(os.getuid(), f"store-{os.getpid()}", write=True)

    # ------------------------------------------------------------- files

    def file_path(self, db_id, file_id, backend):
        return os.path.join(self.hsm.disk_root, f"db{db_id:06d}-f{file_id:08d}.{EXT[backend]}")

    def new_file(self, db_id, backend=None):
        """Allocate a file id in ``db_id`` and open a writer for it."""
        entry = self.catalog.database(db_id)
        backend = Backend(backend or entry.backend)
        fid = self.catalog.allocate_file(db_id)
        return backends.open_writer(backend, self.file_path(db_id, fid, backend), fid, db_id)

    def register(self, writer, logical_name=None):
        """Close ``writer`` and hand the file to the HSM."""
        writer.close()
        return self.register_path(writer.path, writer.file_id, writer.backend, logical_name)

    def register_path(self, path, file_id, backend, logical_name=None):
        crc = 0
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 22), b""):
                crc = crc32(block, crc)
        name = logical_name or os.path.basename(path)
        return self.hsm.register_file(name, path, os.path.getsize(path), crc, file_id=file_id,
                                      kind=backends.KIND[Backend(backend)])

    def write_payload(self, backend, db_id, payload, writer=None):
        """Uniform backend write; ``writer`` keeps appends in one file."""
        if writer is None:
            writer = self.new_file(db_id, backend)
        return writer.append(payload)

    # ------------------------------------------------------------- reads

    def read_payload(self, loc):
        start, stop = backends.extent(loc.backend, loc.offset, loc.length)
        raw = self.hsm.read_range(loc.file_id, start, stop - start)
        payload = backends.decode_extent(loc.backend, start, raw)
        if len(payload) != loc.length or crc32(payload) != loc.checksum:
            raise ChecksumMismatch(f"file {loc.file_id} @ {loc.offset}: payload does not match locator")
        return payload

    def locator(self, id, kind="raw"):
        h = self.catalog.get_header(id)
        if kind == "raw":
            return h.raw
        try:
            return h.dsts[kind]
        except KeyError:
            raise VersionUnbound(f"{id} has no {kind!r}") from None

    def read_event(self, id, kind="raw"):
        return self.read_payload(self.locator(id, kind))

    # --------------------------------------------------------- lifecycle

    def restart_hsm(self):
        """Rebuild the HSM from the journal, as after a crash of its process."""
        old = self.hsm
        self.hsm = HSM(self.root, old.config, clock=self.clock, journal=self.journal,
                       payload_views=backends.PAYLOAD_VIEWS, crash=self.crash)
        self.hsm.load(self.journal.records())
        for attr in ("tape_stalled", "tape_slow_factor", "corrupt_next_write", "recall_count",
                     "failed_writes", "tape_streamed_bytes"):
            setattr(self.hsm, attr, getattr(old, attr))
        self.hsm.tape_committed_bytes = sum(
            f.size for f in self.hsm.files() if f.tape_copy is not None and f.tape_copy.verified)
        return self.hsm

    def checkpoint(self):
        """Compact the journal to a snapshot of the current state."""
        self.journal.rewrite(self.catalog.snapshot_bodies() + self.hsm.snapshot_bodies())

    def close(self):
        self.journal.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


__all__ = ["EventStore", "EventId", "NotFound", "NoSuchFile"]
