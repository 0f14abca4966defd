"""How a data server finds file bytes.

HSMResolver asks an in-process HSM. ProxyResolver is used inside server
processes: it asks the process that owns the HSM (over a pipe) where a file
lives and to stage it from tape, then reads the disk file itself.
"""

from __future__ import annotations

import os
import threading

from ..errors import NoSuchFile, RangeOutOfBounds, RecallFailed
from ..hsm import FileState

STATE_CODES = {s: i for i, s in enumerate(FileState)}


class HSMResolver:
    def __init__(self, hsm_owner):
        # either an HSM or anything with an ``hsm`` attribute (an EventStore,
        # whose HSM may be replaced after a restart)
        self._owner = hsm_owner

    @property
    def hsm(self):
        return getattr(self._owner, "hsm", self._owner)

    def read(self, file_id, offset, length):
        return self.hsm.read_range(file_id, offset, length)

    def stat(self, file_id):
        f = self.hsm.stat(file_id)
        return f.size, STATE_CODES[f.state], f.checksum


def _check_range(file_id, size, offset, length):
    if offset < 0 or length < 0 or offset + length > size:
        raise RangeOutOfBounds(f"[{offset}, {offset + length}) outside file {file_id} of {size} bytes")


class ResolverService:
    """Owner side of a ProxyResolver pipe; one thread per server process."""

    ERRORS = {"NoSuchFile": NoSuchFile, "RecallFailed": RecallFailed}

    def __init__(self, hsm_owner, conn):
        self.resolver = HSMResolver(hsm_owner)
        self.conn = conn
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            try:
                op, file_id = self.conn.recv()
            except (EOFError, OSError):
                return
            try:
                hsm = self.resolver.hsm
                if op == "stage":
                    hsm.ensure_online(file_id)
                f = hsm.stat(file_id)
                reply = ("ok", f.path, f.size, STATE_CODES[f.state], f.checksum)
            except (NoSuchFile, RecallFailed) as exc:
                reply = ("err", type(exc).__name__, str(exc))
            try:
                self.conn.send(reply)
            except (BrokenPipeError, OSError):
                return


class ProxyResolver:
    def __init__(self, conn):
        self.conn = conn
        self._lock = threading.Lock()
        self._cache = {}

    def _ask(self, op, file_id):
        with self._lock:
            self.conn.send((op, file_id))
            reply = self.conn.recv()
        if reply[0] == "err":
            raise ResolverService.ERRORS.get(reply[1], NoSuchFile)(reply[2])
        _, path, size, state, crc = reply
        self._cache[file_id] = (path, size)
        return path, size, state, crc

    def read(self, file_id, offset, length):
        info = self._cache.get(file_id)
        if info is None:
            info = self._ask("lookup", file_id)[:2]
        _check_range(file_id, info[1], offset, length)
        for attempt in range(2):
            path = info[0]
            try:
                fd = os.open(path, os.O_RDONLY)
            except FileNotFoundError:
                info = self._ask("stage", file_id)[:2]
                continue
            try:
                return os.pread(fd, length, offset)
            finally:
                os.close(fd)
        raise RecallFailed(f"file {file_id} vanished from disk while being served")

    def stat(self, file_id):
        return self._ask("lookup", file_id)[1:]
