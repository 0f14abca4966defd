"""Client library: byte-range reads, event reads and run scans."""

from __future__ import annotations

import os
import socket
import threading
import time
from dataclasses import dataclass, field

from .._util import Pacer, crc32
from ..errors import ChecksumMismatch, EvStoreError, TransportError, VersionUnbound
from ..migration import backends
from . import protocol as P
from .balance import ClientLibrary, Endpoint
from .server import DEFAULT_MAX_READ

_TRANSPORT = (OSError, EOFError, TransportError)


@dataclass
class ScanResult:
    run: int
    records: int = 0
    payload_bytes: int = 0
    wire_bytes: int = 0
    elapsed: float = 0.0
    errors: int = 0
    error_list: list = field(default_factory=list)
    started: float = 0.0


class DataClient:
    """One logical client. Keeps a persistent connection per endpoint used;
    a failed endpoint is dropped and the request retried on the next one."""

    def __init__(self, endpoints, uid=None, strategy=None, bandwidth=None, timeout=30.0,
                 retries=None, max_single_read=DEFAULT_MAX_READ, down_for=2.0):
        self.endpoints = [e if isinstance(e, Endpoint) else Endpoint(e) for e in endpoints]
        self.uid = os.getuid() if uid is None else uid
        self.strategy = strategy or ClientLibrary()
        self.pacer = Pacer(bandwidth) if bandwidth else None
        self.timeout = timeout
        self.retries = len(self.endpoints) if retries is None else retries
        self.max_single_read = max_single_read
        self.down_for = down_for
        self._conns = {}
        self._down = {}
        self._lock = threading.Lock()
        self.retried = 0
        self.fallbacks = 0
        self.wire_bytes = 0

    # -------------------------------------------------------- connections

    def _conn(self, ep):
        c = self._conns.get(ep.address)
        if c is None:
            sock = socket.create_connection(ep.address, timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            c = (sock, sock.makefile("rb"))
            self._conns[ep.address] = c
        return c

    def _drop(self, ep):
        c = self._conns.pop(ep.address, None)
        if c is not None:
            for part in reversed(c):
                try:
                    part.close()
                except OSError:
                    pass
        self._down[ep.address] = time.monotonic() + self.down_for

    def _usable(self):
        now = time.monotonic()
        live = [e for e in self.endpoints if self._down.get(e.address, 0) <= now]
        return live or self.endpoints

    def close(self):
        for ep in list(self.endpoints):
            c = self._conns.pop(ep.address, None)
            if c is not None:
                for part in reversed(c):
                    part.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ----------------------------------------------------------- requests

    def _once(self, ep, verb, file_id, offset, length, body=b""):
        sock, rfile = self._conn(ep)
        sock.sendall(P.pack_request(verb, file_id, offset, length, self.uid) + body)
        status, payload = P.read_response(rfile)
        P.raise_for(status, payload.decode(errors="replace"))
        return payload

    def request(self, verb, file_id, offset=0, length=0, body=b""):
        """Send one request, retrying transport failures on other endpoints."""
        usable = self._usable()
        choice = self.strategy.choose(file_id, usable)
        if choice.fallback:
            self.fallbacks += 1
        order = [choice.endpoint] + [e for e in usable if e is not choice.endpoint]
        order += [e for e in self.endpoints if e not in order]
        last = None
        for attempt in range(self.retries + 1):
            ep = order[attempt % len(order)]
            ep.begin()
            n = 0
            try:
                payload = self._once(ep, verb, file_id, offset, length, body)
                n = len(payload)
                return payload
            except _TRANSPORT as exc:
                last = exc
                self._drop(ep)
                self.retried += 1
            finally:
                ep.end(n)
        raise TransportError(f"file {file_id}: {last}", retries=self.retries)

    def read(self, file_id, offset, length):
        parts = []
        pos, end = offset, offset + length
        while pos < end:
            n = min(self.max_single_read, end - pos)
            # the transfer occupies the client's link for at least n / bandwidth
            deadline = self.pacer.reserve(n) if self.pacer is not None else None
            parts.append(self.request(P.READ, file_id, pos, n))
            if deadline is not None:
                self.pacer.wait_until(deadline)
            pos += n
        data = b"".join(parts)
        self.wire_bytes += len(data)
        return data

    def stat(self, file_id):
        return P.STAT_BODY.unpack(self.request(P.STAT, file_id))

    def write(self, file_id, offset, data):
        deadline = self.pacer.reserve(len(data)) if self.pacer is not None else None
        reply = self.request(P.WRITE, file_id, offset, len(data), data)
        if deadline is not None:
            self.pacer.wait_until(deadline)
        if P.CRC.unpack(reply)[0] != crc32(data):
            raise TransportError("write echo mismatch", retries=0)
        return len(data)

    # ------------------------------------------------------------- events

    def read_locator(self, loc):
        start, stop = backends.extent(loc.backend, loc.offset, loc.length)
        raw = self.read(loc.file_id, start, stop - start)
        payload = backends.decode_extent(loc.backend, start, raw)
        if len(payload) != loc.length or crc32(payload) != loc.checksum:
            raise ChecksumMismatch(f"file {loc.file_id} @ {loc.offset}: payload does not match locator")
        return payload

    def read_event(self, catalog, id, kind="raw"):
        h = catalog.get_header(id)
        if kind == "raw":
            loc = h.raw
        elif kind in h.dsts:
            loc = h.dsts[kind]
        else:
            raise VersionUnbound(f"{id} has no {kind!r}")
        return self.read_locator(loc)

    def scan(self, catalog, run, kind="raw", first=0, stop=None, headers=None):
        """Read events ``first .. stop-1`` of ``run`` in locator order.

        Per-event failures are counted and listed, never dropped silently.
        """
        res = ScanResult(run)
        if headers is None:
            headers = catalog.headers(run)[first:stop]
        locs = []
        for h in headers:
            if kind == "raw":
                locs.append((h.id, h.raw))
            elif kind in h.dsts:
                locs.append((h.id, h.dsts[kind]))
            else:
                res.errors += 1
                res.error_list.append((h.id, "VersionUnbound"))
        locs.sort(key=lambda x: (x[1].file_id, x[1].offset))
        wire0 = self.wire_bytes
        t0 = res.started = time.monotonic()
        for id, loc in locs:
            try:
                res.payload_bytes += len(self.read_locator(loc))
                res.records += 1
            except EvStoreError as exc:
                res.errors += 1
                res.error_list.append((id, type(exc).__name__))
        res.elapsed = time.monotonic() - t0
        res.wire_bytes = self.wire_bytes - wire0
        return res
