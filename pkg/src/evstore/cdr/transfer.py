"""Chunk push protocol between the on-line and off-line sides.

Sender: ``length u64 | chunk bytes``. Receiver answers with an 8-byte ack:
``crc32 of the bytes it received u32 | status u8 | 3 zero bytes``. Works on
any pair of binary file-like objects (socket makefiles, pipes, BytesIO).
"""

from __future__ import annotations

import socketserver
import struct
import threading
from dataclasses import dataclass

from .._util import crc32
from ..errors import BufferFull, FrameCorrupt
from .chunk import decode_chunk

LEN = struct.Struct(">Q")
ACK = struct.Struct(">IB3x")

OK = 0
CORRUPT = 1
BUSY = 2


@dataclass(frozen=True)
class Ack:
    crc: int
    status: int


def _read_exact(rfile, n):
    buf = bytearray()
    while len(buf) < n:
        piece = rfile.read(n - len(buf))
        if not piece:
            raise EOFError(f"stream closed after {len(buf)} of {n} bytes")
        buf += piece
    return bytes(buf)


def push_chunk(wfile, data):
    wfile.write(LEN.pack(len(data)))
    wfile.write(data)
    wfile.flush()


def read_ack(rfile):
    crc, status = ACK.unpack(_read_exact(rfile, ACK.size))
    return Ack(crc, status)


def send_ack(wfile, crc, status):
    wfile.write(ACK.pack(crc, status))
    wfile.flush()


def receive_frame(rfile):
    """Read one pushed chunk; ``None`` on a clean end of stream."""
    head = rfile.read(LEN.size)
    if not head:
        return None
    if len(head) < LEN.size:
        head += _read_exact(rfile, LEN.size - len(head))
    (n,) = LEN.unpack(head)
    return _read_exact(rfile, n)


def transfer_chunk(rfile, wfile, buffer):
    """Receive one chunk from the stream into ``buffer`` and ack it.

    Returns the decoded ChunkFile. A damaged chunk is acked CORRUPT and
    raises FrameCorrupt; a full buffer is acked BUSY and raises BufferFull
    (the sender keeps its copy and retries either way).
    """
    data = receive_frame(rfile)
    if data is None:
        raise EOFError("stream closed")
    crc = crc32(data)
    try:
        chunk = decode_chunk(data)
    except FrameCorrupt:
        send_ack(wfile, crc, CORRUPT)
        raise
    try:
        buffer.put(chunk.key, data)
    except BufferFull:
        send_ack(wfile, crc, BUSY)
        raise
    send_ack(wfile, crc, OK)
    return chunk


class ChunkReceiver(socketserver.ThreadingTCPServer):
    """Off-line receiving end: one thread per incoming stream."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, buffer, on_chunk=None):
        self.buffer = buffer
        self.on_chunk = on_chunk
        self.received = []
        self.corrupt = 0
        self.busy = 0
        self._lock = threading.Lock()
        super().__init__(address, _StreamHandler)

    @property
    def address(self):
        return self.server_address


class _StreamHandler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        while True:
            try:
                chunk = transfer_chunk(self.rfile, self.wfile, srv.buffer)
            except EOFError:
                return
            except FrameCorrupt:
                with srv._lock:
                    srv.corrupt += 1
                continue
            except BufferFull:
                with srv._lock:
                    srv.busy += 1
                continue
            with srv._lock:
                srv.received.append(chunk.key)
            if srv.on_chunk is not None:
                srv.on_chunk(chunk)


def send_over(sock_file_r, sock_file_w, data, retries=5, corrupt=None):
    """Client side: push ``data`` until acked OK. ``corrupt(attempt, data)``
    may return damaged bytes for fault injection. Returns the attempt count."""
    want = crc32(data)
    for attempt in range(1, retries + 1):
        wire = corrupt(attempt, data) if corrupt else data
        push_chunk(sock_file_w, wire)
        ack = read_ack(sock_file_r)
        if ack.status == OK and ack.crc == want:
            return attempt
    raise FrameCorrupt(f"chunk not accepted after {retries} attempts")
