"""Synthetic on-line system: deterministic event payloads grouped into chunks.

Every payload is a pure function of (seed, run, event), so the manifest can
be built without materialising the chunk stream and the two always agree.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .._util import KiB, MiB, crc32
from ..cdr.chunk import HEAD_SIZE, RECORD_OVERHEAD, TRAILER_SIZE, encode_chunk

BLOCK = 256


@dataclass
class GeneratorProfile:
    seed: int = 0
    runs: int = 1
    events_per_run: int = 100
    payload_size: int = 30 * KiB
    size_jitter: float = 0.0  # uniform +/- fraction of payload_size
    compressibility: float = 0.4  # fraction of low-entropy 256-byte blocks
    max_chunk_size: int = 64 * MiB
    first_run: int = 1

    def __post_init__(self):
        if not 0.0 <= self.compressibility <= 1.0:
            raise ValueError("compressibility must be within [0, 1]")
        if self.payload_size <= 0 or self.events_per_run < 0 or self.runs < 0:
            raise ValueError("sizes and counts must be positive")
        largest = int(self.payload_size * (1 + self.size_jitter)) + 1
        if HEAD_SIZE + TRAILER_SIZE + RECORD_OVERHEAD + largest > self.max_chunk_size:
            raise ValueError("max_chunk_size cannot hold a single event")

    @property
    def run_numbers(self):
        return list(range(self.first_run, self.first_run + self.runs))


def _rng(profile, run, event):
    return np.random.default_rng([profile.seed, run, event])


def event_size(profile, run, event):
    if not profile.size_jitter:
        return profile.payload_size
    u = np.random.default_rng([profile.seed, run, event, 1]).random()
    return max(1, int(profile.payload_size * (1 + profile.size_jitter * (2 * u - 1))))


def event_payload(profile, run, event):
    """Detector-like payload: random blocks interleaved with pedestal blocks."""
    n = event_size(profile, run, event)
    rng = _rng(profile, run, event)
    nb = -(-n // BLOCK)
    data = np.frombuffer(rng.bytes(nb * BLOCK), dtype=np.uint8).reshape(nb, BLOCK).copy()
    quiet = rng.random(nb) < profile.compressibility
    pedestal = rng.integers(0, 16, size=(nb, 1), dtype=np.uint8)
    data[quiet] = pedestal[quiet]
    return data.reshape(-1)[:n].tobytes()


def trigger_tag(profile, run, event):
    return int(np.random.default_rng([profile.seed, run, event, 2]).integers(0, 16))


def plan_chunks(profile):
    """[(run, sequence, first_event, stop_event)] honouring max_chunk_size."""
    plan = []
    budget = profile.max_chunk_size - HEAD_SIZE - TRAILER_SIZE
    for run in profile.run_numbers:
        seq, first, used = 0, 0, 0
        for event in range(profile.events_per_run):
            need = RECORD_OVERHEAD + event_size(profile, run, event)
            if used + need > budget:
                plan.append((run, seq, first, event))
                seq, first, used = seq + 1, event, 0
            used += need
        if profile.events_per_run and (first < profile.events_per_run):
            plan.append((run, seq, first, profile.events_per_run))
    return plan


@dataclass
class Manifest:
    """Oracle for every downstream check: what the generator produced."""

    profile: dict
    events: dict = field(default_factory=dict)  # (run, event) -> (crc32, length)
    chunks: dict = field(default_factory=dict)  # (run, seq) -> (first, stop, size, crc)

    @property
    def payload_bytes(self):
        return sum(length for _, length in self.events.values())

    def run_chunk_counts(self):
        counts = {}
        for run, _seq in self.chunks:
            counts[run] = counts.get(run, 0) + 1
        return counts

    def save(self, path):
        doc = {"profile": self.profile,
               "events": [[r, e, c, n] for (r, e), (c, n) in sorted(self.events.items())],
               "chunks": [[r, s, *v] for (r, s), v in sorted(self.chunks.items())]}
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        m = cls(doc["profile"])
        m.events = {(r, e): (c, n) for r, e, c, n in doc["events"]}
        m.chunks = {(r, s): tuple(v) for r, s, *v in doc["chunks"]}
        return m


class Generator:
    def __init__(self, profile):
        self.profile = profile
        self.plan = plan_chunks(profile)

    def chunk(self, run, seq, first, stop):
        records = [(e, event_payload(self.profile, run, e)) for e in range(first, stop)]
        return encode_chunk(run, seq, records, self.profile.max_chunk_size)

    def chunks(self, manifest=None):
        """Yield ``(run, sequence, chunk bytes)`` in production order.

        With ``manifest`` every produced event and chunk is recorded in it
        as it is generated, saving a second pass over the payloads.
        """
        for run, seq, first, stop in self.plan:
            records = [(e, event_payload(self.profile, run, e)) for e in range(first, stop)]
            data = encode_chunk(run, seq, records, self.profile.max_chunk_size)
            if manifest is not None:
                for e, p in records:
                    manifest.events[(run, e)] = (crc32(p), len(p))
                manifest.chunks[(run, seq)] = (first, stop, len(data), crc32(data[:-4]))
            del records
            yield run, seq, data

    def empty_manifest(self):
        return Manifest(asdict(self.profile))

    def manifest(self, with_chunk_crc=True):
        m = Manifest(asdict(self.profile))
        for run, seq, first, stop in self.plan:
            for e in range(first, stop):
                p = event_payload(self.profile, run, e)
                m.events[(run, e)] = (crc32(p), len(p))
            if with_chunk_crc:
                data = self.chunk(run, seq, first, stop)
                m.chunks[(run, seq)] = (first, stop, len(data), crc32(data[:-4]))
            else:
                m.chunks[(run, seq)] = (first, stop, None, None)
        return m


def generate(profile):
    """Return (chunk stream, manifest)."""
    gen = Generator(profile)
    return gen.chunks(), gen.manifest()
