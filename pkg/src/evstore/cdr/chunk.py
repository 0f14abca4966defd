"""Chunk file format written by the on-line system.

Bit-exact layout, all integers big-endian::

    "CDR1" | version u16 | run u32 | sequence u32
    record* : payload_len u32 | event_number u64 | payload | crc32(payload) u32
    "1RDC" | record_count u32 | crc32(everything before this field) u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .._util import crc32
from ..errors import FrameCorrupt

MAGIC = b"CDR1"
TRAILER_MAGIC = b"1RDC"
VERSION = 1
HEAD = struct.Struct(">4sHII")
REC = struct.Struct(">IQ")
TAIL = struct.Struct(">4sI")
HEAD_SIZE = HEAD.size
TRAILER_SIZE = TAIL.size + 4
RECORD_OVERHEAD = REC.size + 4


@dataclass
class ChunkFile:
    run: int
    sequence: int
    records: list  # [(event_number, payload bytes)]
    size: int = 0
    checksum: int = 0

    @property
    def key(self):
        return (self.run, self.sequence)


def chunk_size(payload_lengths):
    return HEAD_SIZE + sum(RECORD_OVERHEAD + n for n in payload_lengths) + TRAILER_SIZE


def events_per_chunk(max_chunk_size, payload_size):
    return (max_chunk_size - HEAD_SIZE - TRAILER_SIZE) // (RECORD_OVERHEAD + payload_size)


def encode_chunk(run, sequence, records, max_size=None):
    parts = [HEAD.pack(MAGIC, VERSION, run, sequence)]
    for event, payload in records:
        parts.append(REC.pack(len(payload), event))
        parts.append(payload)
        parts.append(struct.pack(">I", crc32(payload)))
    parts.append(TAIL.pack(TRAILER_MAGIC, len(records)))
    body = b"".join(parts)
    out = body + struct.pack(">I", crc32(body))
    if max_size is not None and len(out) > max_size:
        raise ValueError(f"chunk of {len(out)} bytes exceeds max_chunk_size {max_size}")
    return out


def chunk_checksum(data):
    """The whole-body crc carried in the trailer."""
    return struct.unpack_from(">I", data, len(data) - 4)[0]


def decode_chunk(data):
    """Parse and validate a chunk; raise FrameCorrupt on any damage."""
    data = memoryview(data)
    if len(data) < HEAD_SIZE + TRAILER_SIZE:
        raise FrameCorrupt(f"chunk too short ({len(data)} bytes)")
    (body_crc,) = struct.unpack_from(">I", data, len(data) - 4)
    if crc32(data[:-4]) != body_crc:
        raise FrameCorrupt("whole-chunk checksum mismatch")
    magic, version, run, seq = HEAD.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise FrameCorrupt(f"bad chunk header {bytes(magic)!r} v{version}")
    tmagic, count = TAIL.unpack_from(data, len(data) - TRAILER_SIZE)
    if tmagic != TRAILER_MAGIC:
        raise FrameCorrupt("bad trailer magic")
    pos = HEAD_SIZE
    end = len(data) - TRAILER_SIZE
    records = []
    while pos < end:
        if end - pos < RECORD_OVERHEAD:
            raise FrameCorrupt("truncated record")
        n, event = REC.unpack_from(data, pos)
        pos += REC.size
        if pos + n + 4 > end:
            raise FrameCorrupt(f"record for event {event} overruns the chunk")
        payload = bytes(data[pos:pos + n])
        (rcrc,) = struct.unpack_from(">I", data, pos + n)
        if crc32(payload) != rcrc:
            raise FrameCorrupt(f"record checksum mismatch for event {event}")
        records.append((event, payload))
        pos += n + 4
    if len(records) != count:
        raise FrameCorrupt(f"trailer says {count} records, found {len(records)}")
    return ChunkFile(run, seq, records, len(data), body_crc)
