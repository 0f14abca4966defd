"""Stateless byte-range data servers.

Each request is self-contained; a connection may carry many requests but
the handler keeps nothing between them. A server process runs one thread per
open connection and holds at most one ``max_single_read`` buffer per
in-flight request.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import subprocess
import sys
import threading
import time
from multiprocessing.connection import Connection

from .._util import MiB, Pacer, crc32
from ..errors import EvStoreError, PermissionDenied
from . import protocol as P
from .balance import Endpoint
from .resolvers import HSMResolver, ResolverService

log = logging.getLogger(__name__)

DEFAULT_MAX_READ = 8 * MiB


class ServerMetrics:
    def __init__(self):
        self._lock = threading.Lock()
        self.open_handlers = 0
        self.peak_open_handlers = 0
        self.connections = 0
        self.requests = 0
        self.errors = 0
        self.bytes_served = 0
        self.bytes_written = 0
        self.started = time.monotonic()

    def begin(self):
        with self._lock:
            self.open_handlers += 1
            self.requests += 1
            self.peak_open_handlers = max(self.peak_open_handlers, self.open_handlers)

    def end(self, served=0, written=0, error=False):
        with self._lock:
            self.open_handlers -= 1
            self.bytes_served += served
            self.bytes_written += written
            self.errors += int(error)

    def snapshot(self):
        with self._lock:
            return {"open_handlers": self.open_handlers, "peak_open_handlers": self.peak_open_handlers,
                    "connections": self.connections, "requests": self.requests,
                    "errors": self.errors, "bytes_served": self.bytes_served,
                    "bytes_written": self.bytes_written,
                    "uptime": time.monotonic() - self.started}


class DataServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 1024

    def __init__(self, address, resolver, bandwidth=None, max_single_read=DEFAULT_MAX_READ,
                 write_root=None, write_uids=None, name=None):
        self.resolver = resolver
        self.pacer = Pacer(bandwidth) if bandwidth else None
        self.max_single_read = max_single_read
        self.write_root = write_root
        self.write_uids = {os.getuid()} if write_uids is None else set(write_uids)
        self.metrics = ServerMetrics()
        self.name = name
        if write_root:
            os.makedirs(write_root, exist_ok=True)
        super().__init__(address, _Handler)

    @property
    def address(self):
        return self.server_address[:2]

    def start(self):
        """Serve from a background thread."""
        self.thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                       daemon=True)
        self.thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()

    # ------------------------------------------------------------- verbs

    def do_read(self, file_id, offset, length):
        if length <= 0 or length > self.max_single_read:
            raise P.BadRequest(f"read length {length} not in (0, {self.max_single_read}]")
        data = self.resolver.read(file_id, offset, length)
        if self.pacer is not None:
            self.pacer.consume(len(data))
        return data

    def do_stat(self, file_id):
        size, state, checksum = self.resolver.stat(file_id)
        return P.STAT_BODY.pack(size, state, checksum)

    def do_write(self, file_id, offset, data, uid):
        if uid not in self.write_uids:
            raise PermissionDenied(f"uid {uid} may not write")
        if not self.write_root:
            raise PermissionDenied("this server is read-only")
        if self.pacer is not None:
            self.pacer.consume(len(data))
        path = os.path.join(self.write_root, f"scratch-f{file_id:08d}.dat")
        fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
        try:
            os.pwrite(fd, data, offset)
        finally:
            os.close(fd)
        return P.CRC.pack(crc32(data))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        with srv.metrics._lock:
            srv.metrics.connections += 1
        while True:
            try:
                head = self.rfile.read(P.REQUEST.size)
            except OSError:
                return
            if len(head) < P.REQUEST.size:
                return
            srv.metrics.begin()
            served = written = 0
            error = False
            try:
                verb, file_id, offset, length, uid = P.unpack_request(head)
                if verb == P.READ:
                    body = srv.do_read(file_id, offset, length)
                    served = len(body)
                elif verb == P.STAT:
                    body = srv.do_stat(file_id)
                elif verb == P.WRITE:
                    if length > srv.max_single_read:
                        raise P.BadRequest(f"write of {length} bytes too large")
                    data = P.read_exact(self.rfile, length)
                    body = srv.do_write(file_id, offset, data, uid)
                    written = length
                else:
                    raise P.BadRequest(f"unknown verb {verb}")
                reply = P.pack_response(P.OK, body)
            except (EvStoreError, ValueError) as exc:
                error = True
                reply = P.pack_response(P.status_of(exc), str(exc).encode())
                if isinstance(exc, P.BadRequest) and "magic" in str(exc):
                    self._send(reply)
                    srv.metrics.end(error=True)
                    return
            except EOFError:
                srv.metrics.end(error=True)
                return
            except Exception as exc:  # keep serving other requests
                log.exception("request failed")
                error = True
                reply = P.pack_response(P.SERVER_ERROR, repr(exc).encode())
            ok = self._send(reply)
            srv.metrics.end(served, written, error)
            if not ok:
                return

    def _send(self, reply):
        try:
            self.wfile.write(reply)
            self.wfile.flush()
            return True
        except OSError:
            return False


# ---------------------------------------------------------------- processes

class ServerProcess:
    """A data server in its own OS process, resolving files through the
    parent's HSM over a socket pair."""

    def __init__(self, hsm_owner, name, bandwidth=None, max_single_read=DEFAULT_MAX_READ,
                 write_root=None, write_uids=None, start_timeout=60):
        kwargs = {"bandwidth": bandwidth, "max_single_read": max_single_read,
                  "write_root": write_root, "write_uids": sorted(write_uids) if write_uids else None,
                  "name": name}
        self.name = name
        res_parent, res_child = socket.socketpair()
        ctl_parent, ctl_child = socket.socketpair()
        fds = (res_child.fileno(), ctl_child.fileno())
        self.process = subprocess.Popen(
            [sys.executable, "-m", "evstore.dataserver._worker", str(fds[0]), str(fds[1]),
             json.dumps(kwargs)], pass_fds=fds)
        res_child.close()
        ctl_child.close()
        self._control = Connection(ctl_parent.detach())
        self._service = ResolverService(hsm_owner, Connection(res_parent.detach()))
        self._control_lock = threading.Lock()
        if not self._control.poll(start_timeout):
            self.kill()
            raise RuntimeError(f"server {name} did not start")
        _tag, address = self._control.recv()
        self.address = tuple(address)

    def metrics(self):
        with self._control_lock:
            try:
                self._control.send("metrics")
                return self._control.recv()
            except (EOFError, OSError):
                return None

    def alive(self):
        return self.process.poll() is None

    def kill(self):
        self.process.kill()
        self.process.wait(5)

    def stop(self):
        if self.alive():
            try:
                self._control.send("stop")
                self.process.wait(5)
            except (OSError, subprocess.TimeoutExpired):
                self.kill()
        self._control.close()


class _LocalServer:
    def __init__(self, hsm_owner, name, **kw):
        self.name = name
        self.server = DataServer(("127.0.0.1", 0), HSMResolver(hsm_owner), name=name, **kw).start()
        self.address = self.server.address

    def metrics(self):
        return self.server.metrics.snapshot()

    def alive(self):
        return True

    def kill(self):
        self.server.stop()

    stop = kill


class ServerFarm:
    """``count`` data servers sharing ``total_bandwidth`` equally.

    With ``processes`` each server is a separate OS process; otherwise the
    servers are threads of this process.
    """

    def __init__(self, hsm_owner, count=2, total_bandwidth=None, processes=True,
                 max_single_read=DEFAULT_MAX_READ, write_root=None, write_uids=None, prefix="srv"):
        per = total_bandwidth / count if total_bandwidth else None
        kind = ServerProcess if processes else _LocalServer
        self.servers = []
        try:
            for i in range(count):
                self.servers.append(kind(hsm_owner, f"{prefix}{i + 1}", bandwidth=per,
                                         max_single_read=max_single_read, write_root=write_root,
                                         write_uids=write_uids))
        except Exception:
            self.stop()
            raise

    def endpoints(self):
        return [Endpoint(s.address, name=s.name) for s in self.servers]

    def metrics(self):
        return {s.name: s.metrics() for s in self.servers}

    def kill(self, index):
        self.servers[index].kill()

    def stop(self):
        for s in self.servers:
            s.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
