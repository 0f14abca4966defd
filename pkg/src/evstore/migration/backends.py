"""Payload file formats.

FlatB
    Payloads concatenated with no framing; the catalog locator is the only
    structure. File size equals the sum of payload lengths.

ContainerA
    A page-structured container modelled on an object-database file. Each
    8 KiB page is::

        page header   32 B   magic "CAPG" | page_no u32 | db_id u32 |
                             objects_started u16 | fill u16 | lsn u64 |
                             crc32(line map + data) u32 | reserved u32
        line map     200 B   crc32 of each 128-byte line of the data region
        data region 6300 B   a continuous stream of objects
        free space  1660 B   reserved for in-place growth, zero filled

    Objects are written back to back into the data stream as a 24-byte
    descriptor (magic u16 | type u16 | oid u64 | length u32 | crc32 u32 |
    reserved u32) followed by the payload, spilling across pages. A locator
    names the file position of the first payload byte and the payload
    length; the extent it covers on disk is longer by whatever page
    structure it crosses. With 30 KiB payloads the file is about 30% larger
    than the payloads it holds, and most of that surplus (free space, page
    headers) compresses away while the line map does not.
"""

from __future__ import annotations

import os
import struct

from .._util import crc32
from ..catalog.types import Backend, StorageLocator
from ..errors import BackendWriteFailed, ChecksumMismatch, NotOpen

PAGE_SIZE = 8192
PAGE_HEADER = struct.Struct(">4sIIHHQII")
LINE_SIZE = 128
DATA_CAPACITY = 6300
LINE_COUNT = -(-DATA_CAPACITY // LINE_SIZE)
LINE_MAP_SIZE = 4 * LINE_COUNT
DATA_START = PAGE_HEADER.size + LINE_MAP_SIZE
FREE_SPACE = PAGE_SIZE - DATA_START - DATA_CAPACITY
DESCRIPTOR = struct.Struct(">HHQIII")
DESCRIPTOR_MAGIC = 0xCA01
PAGE_MAGIC = b"CAPG"
assert PAGE_HEADER.size == 32 and DESCRIPTOR.size == 24 and FREE_SPACE > 0


def stream_to_file(pos):
    """Map a position in the ContainerA object stream to a file offset."""
    page, rel = divmod(pos, DATA_CAPACITY)
    return page * PAGE_SIZE + DATA_START + rel


def file_to_stream(offset):
    page, rel = divmod(offset, PAGE_SIZE)
    if not DATA_START <= rel < DATA_START + DATA_CAPACITY:
        raise ValueError(f"file offset {offset} is not inside a data region")
    return page * DATA_CAPACITY + rel - DATA_START


def extent(backend, offset, length):
    """File byte range ``[start, stop)`` holding a payload."""
    if backend is Backend.FLAT_B:
        return offset, offset + length
    last = file_to_stream(offset) + length - 1
    return offset, stream_to_file(last) + 1


def decode_extent(backend, offset, data):
    """Payload bytes from the raw extent read at ``offset``."""
    if backend is Backend.FLAT_B:
        return bytes(data)
    out = []
    pos = 0
    abs_off = offset
    while pos < len(data):
        rel = abs_off % PAGE_SIZE
        if rel < DATA_START:
            skip = DATA_START - rel
        elif rel >= DATA_START + DATA_CAPACITY:
            skip = PAGE_SIZE - rel
        else:
            take = min(DATA_START + DATA_CAPACITY - rel, len(data) - pos)
            out.append(data[pos:pos + take])
            pos += take
            abs_off += take
            continue
        pos += skip
        abs_off += skip
    return b"".join(out)


class FlatWriter:
    backend = Backend.FLAT_B

    def __init__(self, path, file_id, db_id=0):
        self.path = path
        self.file_id = file_id
        self.db_id = db_id
        self._fh = open(path, "wb")
        self.size = 0
        self.payload_bytes = 0
        self.closed = False

    def append(self, payload):
        if self.closed:
            raise NotOpen(f"{self.path} is closed")
        if not payload:
            raise BackendWriteFailed("zero-length payload")
        offset = self.size
        try:
            self._fh.write(payload)
        except OSError as exc:
            raise BackendWriteFailed(str(exc)) from exc
        self.size += len(payload)
        self.payload_bytes += len(payload)
        return StorageLocator(self.backend, self.file_id, offset, len(payload), crc32(payload))

    def close(self):
        if not self.closed:
            self._fh.close()
            self.closed = True
        return self.size


class ContainerWriter:
    """Streams objects into ContainerA pages; ``close`` flushes the last page."""

    backend = Backend.CONTAINER_A

    def __init__(self, path, file_id, db_id=0):
        self.path = path
        self.file_id = file_id
        self.db_id = db_id
        self._fh = open(path, "wb")
        self._page = bytearray(DATA_CAPACITY)
        self._fill = 0
        self._page_no = 0
        self._objects_started = 0
        self._oid = 0
        self.payload_bytes = 0
        self.closed = False

    @property
    def stream_pos(self):
        return self._page_no * DATA_CAPACITY + self._fill

    @property
    def size(self):
        return self._page_no * PAGE_SIZE + (PAGE_SIZE if self._fill else 0)

    def _put(self, data):
        view = memoryview(data)
        while view:
            take = min(DATA_CAPACITY - self._fill, len(view))
            self._page[self._fill:self._fill + take] = view[:take]
            self._fill += take
            view = view[take:]
            if self._fill == DATA_CAPACITY:
                self._flush_page()

    def _flush_page(self):
        data = bytes(self._page[:self._fill]) + bytes(DATA_CAPACITY - self._fill)
        lines = b"".join(struct.pack(">I", crc32(data[i:i + LINE_SIZE]))
                         for i in range(0, DATA_CAPACITY, LINE_SIZE))
        header = PAGE_HEADER.pack(PAGE_MAGIC, self._page_no, self.db_id, self._objects_started,
                                  self._fill, self._page_no + 1, crc32(data, crc32(lines)), 0)
        try:
            self._fh.write(header + lines + data + bytes(FREE_SPACE))
        except OSError as exc:
            raise BackendWriteFailed(str(exc)) from exc
        self._page_no += 1
        self._fill = 0
        self._objects_started = 0

    def append(self, payload, type_id=1):
        if self.closed:
            raise NotOpen(f"{self.path} is closed")
        if not payload:
            raise BackendWriteFailed("zero-length payload")
        checksum = crc32(payload)
        self._oid += 1
        oid = (self.db_id << 32) | self._oid
        self._objects_started += 1
        self._put(DESCRIPTOR.pack(DESCRIPTOR_MAGIC, type_id, oid, len(payload), checksum, 0))
        start = stream_to_file(self.stream_pos)
        self._put(payload)
        self.payload_bytes += len(payload)
        return StorageLocator(self.backend, self.file_id, start, len(payload), checksum)

    def close(self):
        if not self.closed:
            if self._fill:
                self._flush_page()
            self._fh.close()
            self.closed = True
        return self.size


WRITERS = {Backend.CONTAINER_A: ContainerWriter, Backend.FLAT_B: FlatWriter}


def open_writer(backend, path, file_id, db_id=0):
    return WRITERS[backend](path, file_id, db_id)


def read_local(path, loc):
    """Read and verify one payload straight from a local file."""
    start, stop = extent(loc.backend, loc.offset, loc.length)
    with open(path, "rb") as fh:
        fh.seek(start)
        raw = fh.read(stop - start)
    payload = decode_extent(loc.backend, start, raw)
    if len(payload) != loc.length or crc32(payload) != loc.checksum:
        raise ChecksumMismatch(f"file {loc.file_id} @ {loc.offset}: payload does not match locator")
    return payload


def container_payloads(path):
    """Yield the bare payloads stored in a ContainerA file, in order.

    The HSM uses this to size what the payloads alone would occupy on tape.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        stream = bytearray()
        for _ in range(size // PAGE_SIZE):
            page = fh.read(PAGE_SIZE)
            magic, _no, _db, _objs, fill, _lsn, _crc, _ = PAGE_HEADER.unpack_from(page)
            if magic != PAGE_MAGIC:
                raise ValueError(f"{path}: bad page magic")
            stream += page[DATA_START:DATA_START + fill]
            pos = 0
            while len(stream) - pos >= DESCRIPTOR.size:
                dmagic, _t, _oid, length, _c, _r = DESCRIPTOR.unpack_from(stream, pos)
                if dmagic != DESCRIPTOR_MAGIC:
                    raise ValueError(f"{path}: bad object descriptor")
                if len(stream) - pos - DESCRIPTOR.size < length:
                    break
                start = pos + DESCRIPTOR.size
                yield bytes(stream[start:start + length])
                pos = start + length
            del stream[:pos]


def flat_payloads(path):
    with open(path, "rb") as fh:
        yield from iter(lambda: fh.read(1 << 20), b"")


PAYLOAD_VIEWS = {"container-a": container_payloads}
KIND = {Backend.CONTAINER_A: "container-a", Backend.FLAT_B: "flat-b"}
