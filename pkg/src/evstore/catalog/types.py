"""Catalog domain records and their binary encodings."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field


class Backend(enum.IntEnum):
    CONTAINER_A = 1
    FLAT_B = 2


class DbState(enum.Enum):
    CREATING = "creating"
    OPEN = "open"
    SEALED = "sealed"


class LockMode(enum.Enum):
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


@dataclass(frozen=True, order=True)
class EventId:
    run: int
    event: int

    def __post_init__(self):
        if self.run <= 0:
            raise ValueError(f"run number must be positive, got {self.run}")
        if self.event < 0:
            raise ValueError(f"event number must be non-negative, got {self.event}")

    def __str__(self):
        return f"{self.run}:{self.event}"

    @classmethod
    def parse(cls, text):
        run, event = text.split(":")
        return cls(int(run), int(event))


_LOC = struct.Struct(">BQQII")


@dataclass(frozen=True)
class StorageLocator:
    """Payload address: ``length`` is the payload length, ``offset`` the
    file position of its first byte. For ContainerA the bytes in between may
    be interleaved with page structure; see ``evstore.migration.backends``."""

    backend: Backend
    file_id: int
    offset: int
    length: int
    checksum: int

    SIZE = _LOC.size

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if self.length <= 0:
            raise ValueError("length must be > 0")

    def pack(self):
        return _LOC.pack(int(self.backend), self.file_id, self.offset, self.length, self.checksum)

    @classmethod
    def unpack(cls, data, pos=0):
        b, fid, off, length, crc = _LOC.unpack_from(data, pos)
        return cls(Backend(b), fid, off, length, crc)


_HDR = struct.Struct(">IQ")
_HDR_TAIL = struct.Struct(">dHB")


@dataclass(frozen=True)
class EventHeader:
    id: EventId
    raw: StorageLocator
    dsts: dict = field(default_factory=dict)
    ingest_time: float = 0.0
    trigger_tag: int = 0

    def with_dst(self, version, loc):
        dsts = dict(self.dsts)
        dsts[version] = loc
        return EventHeader(self.id, self.raw, dsts, self.ingest_time, self.trigger_tag)

    def with_raw(self, loc):
        return EventHeader(self.id, loc, self.dsts, self.ingest_time, self.trigger_tag)

    def pack(self):
        parts = [_HDR.pack(self.id.run, self.id.event), self.raw.pack(),
                 _HDR_TAIL.pack(self.ingest_time, self.trigger_tag, len(self.dsts))]
        for version, loc in sorted(self.dsts.items()):
            label = version.encode()
            parts.append(bytes([len(label)]) + label + loc.pack())
        return b"".join(parts)

    @property
    def packed_size(self):
        return BASE_HEADER_SIZE + sum(1 + len(v.encode()) + StorageLocator.SIZE for v in self.dsts)

    @classmethod
    def unpack(cls, data, pos=0):
        run, event = _HDR.unpack_from(data, pos)
        pos += _HDR.size
        raw = StorageLocator.unpack(data, pos)
        pos += StorageLocator.SIZE
        t, tag, ndst = _HDR_TAIL.unpack_from(data, pos)
        pos += _HDR_TAIL.size
        dsts = {}
        for _ in range(ndst):
            n = data[pos]
            version = bytes(data[pos + 1:pos + 1 + n]).decode()
            pos += 1 + n
            dsts[version] = StorageLocator.unpack(data, pos)
            pos += StorageLocator.SIZE
        return cls(EventId(run, event), raw, dsts, t, tag), pos


BASE_HEADER_SIZE = _HDR.size + StorageLocator.SIZE + _HDR_TAIL.size
MAX_BASE_HEADER_SIZE = 128
assert BASE_HEADER_SIZE <= MAX_BASE_HEADER_SIZE


@dataclass
class DatabaseEntry:
    db_id: int
    name: str
    server_affinity: str
    state: DbState
    created_at: float
    backend: Backend = Backend.CONTAINER_A
    files: list = field(default_factory=list)

    def to_json(self):
        return {"db_id": self.db_id, "name": self.name, "affinity": self.server_affinity,
                "state": self.state.value, "created_at": self.created_at,
                "backend": int(self.backend), "files": list(self.files)}

    @classmethod
    def from_json(cls, d):
        return cls(d["db_id"], d["name"], d["affinity"], DbState(d["state"]), d["created_at"],
                   Backend(d["backend"]), list(d["files"]))


@dataclass(frozen=True)
class Holder:
    """Client identity: a uid plus a process tag. Writes need ``write=True``."""

    uid: int
    tag: str
    write: bool = False

    def same_client(self, other):
        return self.uid == other.uid and self.tag == other.tag

    def __str__(self):
        return f"uid={self.uid}/{self.tag}"


@dataclass
class LockLease:
    lease_id: int
    holder: Holder
    resource: str
    mode: LockMode
    expires_at: float


@dataclass(frozen=True)
class ChunkResult:
    """What ``ingest_chunk`` returned for one (run, sequence)."""

    run: int
    sequence: int
    events: int
    db_id: int
    file_id: int


def db_resource(db_id):
    return f"db/{db_id}"


def run_resource(run):
    return f"run/{run}"


CREATE_RESOURCE = "federation/create"
