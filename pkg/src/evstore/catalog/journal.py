"""Append-only catalog journal ("EVC1").

File layout (all integers big-endian)::

    file header : b"EVC1" | version u16 | flags u16
    record      : body_len u32 | crc32(body) u32 | body
    body        : kind u8 | payload

``kind`` 1 is a JSON object (utf-8); kind 2 is a header batch:
``txn u64 | db_id u32 | count u32 | (len u16 | packed EventHeader) * count``.
A record whose length or crc does not check out ends the journal; ``open``
truncates such a torn tail so the next append starts on a clean boundary.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib

from .types import EventHeader

MAGIC = b"EVC1"
VERSION = 1
_FILE_HDR = struct.Struct(">4sHH")
_REC = struct.Struct(">II")
_BATCH = struct.Struct(">QII")

KIND_JSON = 1
KIND_HEADERS = 2


def encode_json(obj):
    return bytes([KIND_JSON]) + json.dumps(obj, separators=(",", ":")).encode()


def encode_headers(txn, db_id, headers):
    parts = [bytes([KIND_HEADERS]), _BATCH.pack(txn, db_id, len(headers))]
    for h in headers:
        raw = h.pack()
        parts.append(struct.pack(">H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode(body):
    kind = body[0]
    if kind == KIND_JSON:
        return json.loads(body[1:])
    if kind == KIND_HEADERS:
        txn, db_id, count = _BATCH.unpack_from(body, 1)
        pos = 1 + _BATCH.size
        headers = []
        for _ in range(count):
            (n,) = struct.unpack_from(">H", body, pos)
            h, _ = EventHeader.unpack(body, pos + 2)
            headers.append(h)
            pos += 2 + n
        return {"op": "headers", "txn": txn, "db_id": db_id, "headers": headers}
    raise ValueError(f"unknown journal record kind {kind}")


class Journal:
    """Thread-safe append-only record log. ``path=None`` keeps it in memory."""

    def __init__(self, path=None, fsync=False):
        self.path = path
        self.fsync = fsync
        self._lock = threading.Lock()
        self._mem = []
        self._fh = None
        self.torn_bytes = 0
        if path is not None:
            self._open()

    def _open(self):
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            with open(self.path, "wb") as fh:
                fh.write(_FILE_HDR.pack(MAGIC, VERSION, 0))
        self._fh = open(self.path, "r+b")
        head = self._fh.read(_FILE_HDR.size)
        magic, version, _ = _FILE_HDR.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{self.path}: not an EVC1 journal")
        if version != VERSION:
            raise ValueError(f"{self.path}: unsupported journal version {version}")
        good = self._fh.tell()
        size = os.path.getsize(self.path)
        while True:
            rec = self._fh.read(_REC.size)
            if len(rec) < _REC.size:
                break
            n, crc = _REC.unpack(rec)
            body = self._fh.read(n)
            if len(body) < n or (zlib.crc32(body) & 0xFFFFFFFF) != crc:
                break
            good = self._fh.tell()
        if good < size:
            self.torn_bytes = size - good
            self._fh.truncate(good)
        self._fh.seek(0, os.SEEK_END)

    def records(self):
        """Decode every intact record, oldest first."""
        with self._lock:
            if self.path is None:
                return [decode(b) for b in self._mem]
            out = []
            with open(self.path, "rb") as fh:
                fh.seek(_FILE_HDR.size)
                while True:
                    rec = fh.read(_REC.size)
                    if len(rec) < _REC.size:
                        break
                    n, _ = _REC.unpack(rec)
                    body = fh.read(n)
                    if len(body) < n:
                        break
                    out.append(decode(body))
            return out

    def append(self, body, torn=False):
        """Append one encoded record. ``torn=True`` writes half of it and
        stops, which is what a crash in the middle of ``write`` leaves."""
        frame = _REC.pack(len(body), zlib.crc32(body) & 0xFFFFFFFF) + body
        with self._lock:
            if self.path is None:
                if not torn:
                    self._mem.append(body)
                return
            if torn:
                self._fh.write(frame[: len(frame) // 2])
                self._fh.flush()
                return
            self._fh.write(frame)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def append_json(self, obj, torn=False):
        self.append(encode_json(obj), torn=torn)

    def rewrite(self, bodies):
        """Replace the journal with ``bodies`` (compaction). Atomic on POSIX."""
        with self._lock:
            if self.path is None:
                self._mem = list(bodies)
                return
            tmp = self.path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(_FILE_HDR.pack(MAGIC, VERSION, 0))
                for body in bodies:
                    fh.write(_REC.pack(len(body), zlib.crc32(body) & 0xFFFFFFFF) + body)
                fh.flush()
                os.fsync(fh.fileno())
            self._fh.close()
            os.replace(tmp, self.path)
            self._fh = open(self.path, "r+b")
            self._fh.seek(0, os.SEEK_END)

    def size(self):
        if self.path is None:
            return sum(len(b) + _REC.size for b in self._mem)
        return os.path.getsize(self.path)

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
