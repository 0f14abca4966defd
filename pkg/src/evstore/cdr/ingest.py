"""Chunk ingestion: payloads into a backend file, headers into the catalog."""

from __future__ import annotations

import logging
import os

from .._util import CrashPoints
from ..catalog import Backend, ChunkResult, DbState, EventHeader, EventId, LockMode, db_resource
from ..errors import NoSuchFile, NotFound, NotOpen
from .chunk import decode_chunk

log = logging.getLogger(__name__)


def chunk_db_name(run, sequence):
    return f"run{run:06d}-seq{sequence:05d}"


class Ingester:
    """Turns received chunks into catalog entries and HSM-managed files.

    One instance per logical ingester process. ``crash`` points:
    ``ingest.after_lease``, ``ingest.after_write``, ``ingest.after_put``,
    ``ingest.before_commit``, ``ingest.after_commit``.
    """

    CRASH_POINTS = ("ingest.after_lease", "ingest.after_write", "ingest.after_put",
                    "ingest.before_commit", "ingest.after_commit")

    def __init__(self, store, holder, backend=Backend.CONTAINER_A, affinity=None, crash=None):
        self.store = store
        self.holder = holder
        self.backend = Backend(backend)
        self.affinity = affinity or (lambda run, seq: "")
        self.crash = crash or CrashPoints()

    def ingest_chunk(self, chunk):
        if isinstance(chunk, (bytes, bytearray, memoryview)):
            chunk = decode_chunk(chunk)
        cat = self.store.catalog
        done = cat.chunk_result(chunk.run, chunk.sequence)
        if done is not None:
            self._ensure_registered(done)
            return done

        name = chunk_db_name(chunk.run, chunk.sequence)
        try:
            entry = cat.database_by_name(name)
        except NotFound:
            db_id = cat.create_database(name, self.affinity(chunk.run, chunk.sequence), self.holder,
                                        backend=self.backend)
            entry = cat.database(db_id)
        # state is only trustworthy under the lease: a dead holder's seal may still roll back
        lease = cat.acquire_lease(self.holder, db_resource(entry.db_id), LockMode.EXCLUSIVE)
        self.crash.hit("ingest.after_lease")
        done = cat.chunk_result(chunk.run, chunk.sequence)
        if done is not None:
            cat.release_lease(lease.lease_id, self.holder)
            self._ensure_registered(done)
            return done
        entry = cat.database(entry.db_id)
        if entry.state is not DbState.OPEN:
            cat.release_lease(lease.lease_id, self.holder)
            raise NotOpen(f"{name} is {entry.state.value} but has no ingest record")
        self._drop_orphans(entry)
        file_id = 0
        headers = []
        if chunk.records:
            writer = self.store.new_file(entry.db_id, entry.backend)
            now = self.store.clock.now()
            for event, payload in chunk.records:
                loc = writer.append(payload)
                headers.append(EventHeader(EventId(chunk.run, event), loc, {}, now, payload[0] & 0x0F))
            writer.close()
            file_id = writer.file_id
        self.crash.hit("ingest.after_write")
        cat.put_headers(entry.db_id, headers, lease.lease_id)
        self.crash.hit("ingest.after_put")
        result = ChunkResult(chunk.run, chunk.sequence, len(headers), entry.db_id, file_id)
        cat.record_chunk(result, lease.lease_id)
        cat.seal_database(entry.db_id, lease.lease_id)
        self.crash.hit("ingest.before_commit")
        cat.release_lease(lease.lease_id, self.holder)
        self.crash.hit("ingest.after_commit")
        self._ensure_registered(result)
        return result

    def _ensure_registered(self, result):
        if not result.file_id:
            return
        try:
            self.store.hsm.stat(result.file_id)
        except NoSuchFile:
            entry = self.store.catalog.database(result.db_id)
            path = self.store.file_path(entry.db_id, result.file_id, entry.backend)
            self.store.register_path(path, result.file_id, entry.backend,
                                     chunk_db_name(result.run, result.sequence))

    def _drop_orphans(self, entry):
        """Remove files a dead ingester left behind in this database."""
        for fid in entry.files:
            try:
                self.store.hsm.stat(fid)
            except NoSuchFile:
                path = self.store.file_path(entry.db_id, fid, entry.backend)
                if os.path.exists(path):
                    os.remove(path)
