"""Byte-range wire protocol. All integers big-endian.

Request::

    "EVRD" | verb u8 | file_id u64 | offset u64 | length u32 | uid u32

Response::

    status u8 | length u32 | payload | crc32(payload) u32

Verbs: 1 READ returns ``length`` bytes at ``offset``; 2 STAT returns
``size u64 | state u8 | checksum u32``; 3 WRITE is followed by ``length``
payload bytes and stores them at ``offset`` in a scratch file (uid checked).
"""

from __future__ import annotations

import struct

from .._util import crc32
from ..errors import (EvStoreError, NoSuchFile, PermissionDenied, RangeOutOfBounds, RecallFailed,
                      TransportError)

MAGIC = b"EVRD"
REQUEST = struct.Struct(">4sBQQII")
RESPONSE = struct.Struct(">BI")
CRC = struct.Struct(">I")
STAT_BODY = struct.Struct(">QBI")

READ = 1
STAT = 2
WRITE = 3

OK = 0
NO_SUCH_FILE = 1
OUT_OF_RANGE = 2
RECALL_FAILED = 3
PERMISSION = 4
BAD_REQUEST = 5
SERVER_ERROR = 6

_ERRORS = {NO_SUCH_FILE: NoSuchFile, OUT_OF_RANGE: RangeOutOfBounds, RECALL_FAILED: RecallFailed,
           PERMISSION: PermissionDenied}
_STATUS = {cls: code for code, cls in _ERRORS.items()}


class BadRequest(EvStoreError):
    pass


def status_of(exc):
    for cls, code in _STATUS.items():
        if isinstance(exc, cls):
            return code
    return BAD_REQUEST if isinstance(exc, BadRequest) else SERVER_ERROR


def raise_for(status, message):
    if status == OK:
        return
    cls = _ERRORS.get(status)
    if cls is not None:
        raise cls(message)
    if status == BAD_REQUEST:
        raise BadRequest(message)
    raise TransportError(f"server error: {message}")


def read_exact(rfile, n):
    buf = rfile.read(n)
    if len(buf) == n:
        return buf
    parts = [buf]
    got = len(buf)
    while got < n:
        piece = rfile.read(n - got)
        if not piece:
            raise EOFError(f"connection closed after {got} of {n} bytes")
        parts.append(piece)
        got += len(piece)
    return b"".join(parts)


def pack_request(verb, file_id, offset, length, uid):
    return REQUEST.pack(MAGIC, verb, file_id, offset, length, uid)


def unpack_request(data):
    magic, verb, file_id, offset, length, uid = REQUEST.unpack(data)
    if magic != MAGIC:
        raise BadRequest(f"bad magic {magic!r}")
    return verb, file_id, offset, length, uid


def pack_response(status, payload=b""):
    return RESPONSE.pack(status, len(payload)) + payload + CRC.pack(crc32(payload))


def read_response(rfile):
    """Return ``(status, payload)``; a crc mismatch is a transport error."""
    status, n = RESPONSE.unpack(read_exact(rfile, RESPONSE.size))
    payload = read_exact(rfile, n)
    (crc,) = CRC.unpack(read_exact(rfile, CRC.size))
    if crc32(payload) != crc:
        raise TransportError("response checksum mismatch")
    return status, payload
