"""Buffer areas on the on-line and off-line sides, and the tape rate controller."""

from __future__ import annotations

import enum
import os
import threading
from dataclasses import dataclass

from ..errors import BufferFull, EvStoreError


class ChunkStatus(enum.Enum):
    RECEIVED = "Received"
    INGESTED = "Ingested"
    SAFE_ON_TAPE = "SafeOnTape"


class PrematureDelete(EvStoreError):
    """A buffer copy was about to be deleted before its data was safe on tape."""


class BufferArea:
    """Chunk files kept on one side until their data is safe on tape."""

    def __init__(self, side, root, capacity):
        self.side = side
        self.root = root
        self.capacity = capacity
        os.makedirs(root, exist_ok=True)
        self._lock = threading.Lock()
        self._sizes = {}
        self.status = {}
        self.used = 0
        self.peak = 0

    def _path(self, key):
        run, seq = key
        return os.path.join(self.root, f"run{run:06d}-seq{seq:05d}.cdr")

    def __contains__(self, key):
        return key in self._sizes

    def keys(self):
        return list(self._sizes)

    def has_room(self, nbytes, reserved=0):
        return self.used + reserved + nbytes <= self.capacity

    def put(self, key, data, status=ChunkStatus.RECEIVED):
        with self._lock:
            if key in self._sizes:
                return self._path(key)
            if self.used + len(data) > self.capacity:
                raise BufferFull(f"{self.side} buffer: {self.used}+{len(data)} > {self.capacity}")
            path = self._path(key)
            with open(path, "wb") as fh:
                fh.write(data)
            self._sizes[key] = len(data)
            self.status[key] = status
            self.used += len(data)
            self.peak = max(self.peak, self.used)
            return path

    def get(self, key):
        with open(self._path(key), "rb") as fh:
            return fh.read()

    def mark(self, key, status):
        if key in self._sizes:
            self.status[key] = status

    def delete(self, key):
        with self._lock:
            if self.status.get(key) is not ChunkStatus.SAFE_ON_TAPE:
                raise PrematureDelete(f"{self.side} copy of {key} is {self.status.get(key)}")
            os.remove(self._path(key))
            self.used -= self._sizes.pop(key)
            del self.status[key]


@dataclass
class RateController:
    """Tape stream rate: nominal while the backlog is within ``allowance``
    (one file's worth of normal in-flight data), up to ``catchup_factor``
    times nominal while there is a backlog beyond it."""

    nominal_rate: float
    catchup_factor: float = 2.0
    allowance: float = 0.0

    def __post_init__(self):
        if self.catchup_factor < 1:
            raise ValueError("catchup_factor must be >= 1")

    def rate(self, backlog):
        if backlog > self.allowance:
            return self.nominal_rate * self.catchup_factor
        return self.nominal_rate
