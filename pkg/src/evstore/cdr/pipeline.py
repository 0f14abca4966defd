"""Tick-driven central data recording pipeline.

Every tick runs the same sub-steps in order: produce, transfer, ingest,
tape, cache gc, prune, reap. An auditor checks the late-deletion invariant
after each sub-step. Bytes are real (chunks are written, ingested, compressed
and verified); time is whatever clock the store was built with, normally a
SimClock advanced by ``tick`` per step.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

from .._util import MiB, CrashPoints, crc32
from ..catalog import Backend, Holder
from ..errors import (BufferFull, Conflict, Expired, FrameCorrupt, InjectedCrash, NoSuchFile,
                      NotHolder, SequenceGap, ServiceStalled, TapeWriteFailed)
from ..hsm import ON_DISK
from .buffers import BufferArea, ChunkStatus, RateController
from .chunk import decode_chunk
from .ingest import Ingester
from .transfer import OK, push_chunk, read_ack, transfer_chunk

log = logging.getLogger(__name__)

SERIES_FIELDS = ["t", "bytes_produced", "bytes_received", "bytes_ingested", "tape_streamed_bytes",
                 "tape_committed_bytes", "tape_rate", "tape_backlog_bytes", "online_buffer_bytes",
                 "offline_buffer_bytes", "source_waiting"]


@dataclass
class CdrConfig:
    streams: int = 4
    link_bandwidth: float = 32 * MiB
    source_rate: float = 8 * MiB
    nominal_rate: float = 8 * MiB
    catchup_factor: float = 2.0
    ingest_rate: float = 64 * MiB
    max_chunk_size: int = 64 * MiB
    buffer_capacity: int = 0  # 0 means 8 x max_chunk_size
    high_watermark: float = 0.75
    low_watermark: float = 0.50
    reorder_window: int = 16
    prune_interval: float = 2.0
    tick: float = 0.25
    backend: Backend = Backend.CONTAINER_A
    gc_high: float = 0.90
    gc_target_free: float = 0.25
    catchup_allowance: float = 0.0  # 0 means one chunk's worth of file bytes

    def __post_init__(self):
        self.backend = Backend(self.backend)
        if not self.buffer_capacity:
            self.buffer_capacity = 8 * self.max_chunk_size
        if not self.catchup_allowance:
            self.catchup_allowance = 1.35 * self.max_chunk_size


@dataclass
class _Stream:
    key: tuple = None
    sent: float = 0.0
    attempts: int = 0


@dataclass
class CdrReport:
    bytes_in: int
    bytes_to_tape: int
    peak_buffer_bytes: int
    max_catchup_rate: float
    peak_online_bytes: int
    peak_offline_bytes: int
    chunks: int
    events: int
    corrupt_transfers: int
    ingester_kills: int
    hsm_restarts: int
    buffer_full: int
    source_wait_seconds: float
    audit_violations: list
    elapsed: float
    series: list = field(default_factory=list, repr=False)

    def series_csv(self):
        out = io.StringIO()
        w = csv.DictWriter(out, fieldnames=SERIES_FIELDS)
        w.writeheader()
        for row in self.series:
            w.writerow(row)
        return out.getvalue()

    def summary(self):
        return {k: v for k, v in self.__dict__.items() if k != "series"}


def directory_source(path):
    """Chunk files from a directory, in name order."""
    for name in sorted(os.listdir(path)):
        if name.endswith(".cdr"):
            with open(os.path.join(path, name), "rb") as fh:
                data = fh.read()
            chunk = decode_chunk(data)
            yield chunk.run, chunk.sequence, data


class CdrPipeline:
    def __init__(self, store, config=None, source=(), root=None):
        self.store = store
        self.cfg = config or CdrConfig()
        self.clock = store.clock
        root = root or os.path.join(store.root, "cdr")
        cap = self.cfg.buffer_capacity
        self.online = BufferArea("online", os.path.join(root, "online"), cap)
        self.offline = BufferArea("offline", os.path.join(root, "offline"), cap)
        self.controller = RateController(self.cfg.nominal_rate, self.cfg.catchup_factor,
                                         self.cfg.catchup_allowance)
        self.crash = CrashPoints()
        self._source = iter(source)
        self._next_chunk = None
        self.source_done = False
        self._credit = 0.0
        self._ingest_credit = 0.0
        self.streams = [_Stream() for _ in range(self.cfg.streams)]
        self._transfer_queue = []  # chunk keys waiting on the online side
        self._in_flight = set()
        self._backpressure = False
        self.sizes = {}
        self.produced = []
        self.results = {}
        self._next_seq = {}
        self._ingesters = {}
        self._generation = 0
        self.runs_expected = {}
        self.corrupt_plan = {}  # chunk key -> byte offset to flip on the next transfer
        self.pending_kills = []
        self.pending_hsm_crash = []
        self.ingester_kills = 0
        self.hsm_restarts = 0
        self.corrupt_transfers = 0
        self.buffer_full = 0
        self.gap_errors = 0
        self.source_wait = 0.0
        self.violations = []
        self.series = []
        self.max_tape_rate = 0.0
        self.tape_rates = []
        self._last_prune = float("-inf")
        self._last_transitions = 0
        self._counters = {"bytes_produced": 0, "bytes_received": 0, "bytes_ingested": 0}
        self.events = 0
        self.hooks = []  # callables(pipeline) run at the start of every tick
        self.t0 = self.clock.now()

    # ------------------------------------------------------------- faults

    def kill_ingester(self, point="ingest.after_put"):
        """The next ingest dies at ``point`` and its process is replaced."""
        self.pending_kills.append(point)
        self.crash.arm(point)

    def corrupt_stream(self, key, offset):
        self.corrupt_plan[key] = offset

    def crash_tape_migrator(self, point="hsm.after_tape_write"):
        self.store.crash.arm(point)
        self.pending_hsm_crash.append(point)

    def stall_lock_service(self, duration):
        self.store.catalog.stall(duration)

    def stall_tape(self, stalled=True):
        self.store.hsm.tape_stalled = stalled

    def slow_tape(self, factor):
        self.store.hsm.tape_slow_factor = factor

    # ------------------------------------------------------------ produce

    def _produce(self, dt):
        if self.source_done:
            return
        self._credit += self.cfg.source_rate * dt
        waited = False
        while True:
            if self._next_chunk is None:
                try:
                    self._next_chunk = next(self._source)
                except StopIteration:
                    self.source_done = True
                    self._credit = 0.0
                    return
            run, seq, data = self._next_chunk
            if self._credit < len(data):
                break
            if not self.online.has_room(len(data)):
                waited = True  # the on-line side blocks; nothing is dropped
                self._credit = min(self._credit, float(len(data)))
                break
            key = (run, seq)
            self.online.put(key, data)
            self.sizes[key] = len(data)
            self.produced.append(key)
            self._transfer_queue.append(key)
            self.runs_expected[run] = max(self.runs_expected.get(run, 0), seq + 1)
            self._counters["bytes_produced"] += len(data)
            self._credit -= len(data)
            self._next_chunk = None
        if waited:
            self.source_wait += dt

    # ----------------------------------------------------------- transfer

    def _transfer(self, dt):
        off = self.offline
        if off.used >= self.cfg.high_watermark * off.capacity:
            self._backpressure = True
        elif off.used <= self.cfg.low_watermark * off.capacity:
            self._backpressure = False
        for s in self.streams:
            if s.key is None and self._transfer_queue and not self._backpressure:
                s.key = self._transfer_queue.pop(0)
                s.sent = 0.0
                s.attempts = 0
                self._in_flight.add(s.key)
        active = [s for s in self.streams if s.key is not None]
        if not active:
            return
        share = self.cfg.link_bandwidth * dt / len(active)
        for s in active:
            s.sent += share
            if s.sent < self.sizes[s.key]:
                continue
            s.attempts += 1
            if self._wire(s.key):
                self._counters["bytes_received"] += self.sizes[s.key]
                self._in_flight.discard(s.key)
                s.key = None
            else:
                s.sent = 0.0

    def _wire(self, key):
        """One push over an in-memory stream; True when acked OK."""
        data = self.online.get(key)
        wire = data
        if key in self.corrupt_plan:
            pos = self.corrupt_plan.pop(key) % len(data)
            wire = bytearray(data)
            wire[pos] ^= 0x40
            wire = bytes(wire)
        down = io.BytesIO()
        push_chunk(down, wire)
        down.seek(0)
        up = io.BytesIO()
        try:
            transfer_chunk(down, up, self.offline)
        except FrameCorrupt:
            self.corrupt_transfers += 1
        except BufferFull:
            self.buffer_full += 1
        up.seek(0)
        ack = read_ack(up)
        return ack.status == OK and ack.crc == crc32(data)

    # ------------------------------------------------------------- ingest

    def _ingester(self, run):
        ing = self._ingesters.get(run)
        if ing is None:
            self._generation += 1
            holder = Holder(os.getuid(), f"ingest-r{run}-g{self._generation}", write=True)
            ing = Ingester(self.store, holder, self.cfg.backend, crash=self.crash)
            self._ingesters[run] = ing
        return ing

    def _ingest(self, dt):
        self._ingest_credit = min(self._ingest_credit + self.cfg.ingest_rate * dt,
                                  self.cfg.ingest_rate * dt + self.cfg.max_chunk_size)
        if self.source_done:
            for run in self.runs_expected:
                self._maybe_seal(run)
        ready = {}
        for key in self.offline.keys():
            if self.offline.status.get(key) is ChunkStatus.RECEIVED:
                ready.setdefault(key[0], set()).add(key[1])
        for run in sorted(ready):
            seqs = ready[run]
            while True:
                nxt = self._next_seq.get(run, 0)
                if self._ingest_credit <= 0:
                    return
                beyond = [s for s in seqs if s >= nxt + self.cfg.reorder_window]
                if beyond:
                    self.gap_errors += 1
                    log.warning("%s", SequenceGap(f"run {run}: chunk {min(beyond)} arrived while "
                                                  f"waiting for {nxt}"))
                if nxt not in seqs:
                    break
                key = (run, nxt)
                try:
                    result = self._ingester(run).ingest_chunk(self.offline.get(key))
                except ServiceStalled:
                    return
                except (Conflict, Expired, NotHolder):
                    break  # a dead ingester's lease has not expired yet
                except InjectedCrash as exc:
                    log.info("ingester for run %d killed at %s", run, exc)
                    self.ingester_kills += 1
                    if exc.args and exc.args[0] in self.pending_kills:
                        self.pending_kills.remove(exc.args[0])
                    self._ingesters.pop(run, None)
                    break
                self._ingest_credit -= self.sizes.get(key, 0)
                self.results[key] = result
                self.events += result.events
                self._counters["bytes_ingested"] += self.sizes.get(key, 0)
                self.offline.mark(key, ChunkStatus.INGESTED)
                self.online.mark(key, ChunkStatus.INGESTED)
                self._next_seq[run] = nxt + 1
                seqs.discard(nxt)
                self._maybe_seal(run)

    def _maybe_seal(self, run):
        if not self.source_done or self._next_chunk is not None:
            return
        cat = self.store.catalog
        if self._next_seq.get(run, 0) == self.runs_expected.get(run) and not cat.is_sealed(run):
            try:
                cat.seal_run(run, self._ingester(run).holder)
            except (ServiceStalled, Conflict):
                pass  # retried next tick, after the reaper

    # --------------------------------------------------------------- tape

    def _tape(self, dt):
        hsm = self.store.hsm
        backlog = hsm.tape_backlog_bytes
        rate = min(self.controller.rate(backlog), hsm.config.tape_bandwidth)
        before = hsm.tape_streamed_bytes
        try:
            hsm.migrate_pending(byte_budget=rate * dt)
        except TapeWriteFailed:
            pass  # back to DiskOnly; rewritten on a later tick
        except InjectedCrash as exc:
            log.info("tape migrator crashed at %s; restarting from the journal", exc)
            self.hsm_restarts += 1
            streamed = hsm.tape_streamed_bytes
            hsm = self.store.restart_hsm()
            hsm.tape_streamed_bytes = streamed
            self._last_transitions = 0
        moved = hsm.tape_streamed_bytes - before
        measured = moved / dt
        self.tape_rates.append((self.clock.now(), measured, backlog))
        self.max_tape_rate = max(self.max_tape_rate, measured)

    def _gc(self):
        hsm = self.store.hsm
        if hsm.used > self.cfg.gc_high * hsm.config.capacity:
            hsm.cache_gc(self.cfg.gc_target_free * hsm.config.capacity)

    # -------------------------------------------------------------- prune

    def chunk_safe(self, key):
        result = self.results.get(key) or self.store.catalog.chunk_result(*key)
        if result is None:
            return False
        if not result.file_id:
            return True
        return self.store.hsm.has_safe_copy(result.file_id)

    def confirm_and_prune(self):
        pruned_on = pruned_off = 0
        for key in set(self.online.keys()) | set(self.offline.keys()):
            if key in self._in_flight or not self.chunk_safe(key):
                continue
            for buf in (self.online, self.offline):
                if key in buf:
                    buf.mark(key, ChunkStatus.SAFE_ON_TAPE)
            # the explicit ack back to the on-line side
            if key in self.offline:
                self.offline.delete(key)
                pruned_off += 1
            if key in self.online:
                self.online.delete(key)
                pruned_on += 1
        self._last_prune = self.clock.now()
        return {"pruned_online": pruned_on, "pruned_offline": pruned_off}

    def _prune(self):
        log_len = len(self.store.hsm.transition_log)
        if (self.clock.now() - self._last_prune >= self.cfg.prune_interval
                or log_len != self._last_transitions):
            self._last_transitions = log_len
            self.confirm_and_prune()

    # -------------------------------------------------------------- audit

    def copies(self, key):
        """Live copies of a chunk's data among both buffers, the disk file and tape."""
        n = int(key in self.online) + int(key in self.offline)
        result = self.results.get(key)
        if result is not None:
            if not result.file_id:
                return n + 1
            hsm = self.store.hsm
            try:
                f = hsm.stat(result.file_id)
            except NoSuchFile:
                entry = self.store.catalog.database(result.db_id)
                if os.path.exists(self.store.file_path(entry.db_id, result.file_id, entry.backend)):
                    n += 1
            else:
                if f.state in ON_DISK and os.path.exists(f.path):
                    n += 1
                if hsm.has_safe_copy(result.file_id):
                    n += 1
        return n

    def audit(self, step):
        for key in self.produced:
            if key in self.online and key in self.offline:
                continue
            if self.copies(key) == 0:
                self.violations.append((self.clock.now(), step, key))

    # --------------------------------------------------------------- loop

    def step(self):
        dt = self.cfg.tick
        for hook in self.hooks:
            hook(self)
        for name, fn in (("produce", lambda: self._produce(dt)),
                         ("transfer", lambda: self._transfer(dt)),
                         ("ingest", lambda: self._ingest(dt)),
                         ("tape", lambda: self._tape(dt)),
                         ("gc", self._gc),
                         ("prune", self._prune),
                         ("reap", lambda: self.store.catalog.reap_expired())):
            try:
                fn()
            except ServiceStalled:
                pass
            self.audit(name)
        self.clock.sleep(dt)
        self._sample()

    def _sample(self):
        hsm = self.store.hsm
        last = self.tape_rates[-1][1] if self.tape_rates else 0.0
        self.series.append({
            "t": round(self.clock.now() - self.t0, 6),
            **self._counters,
            "tape_streamed_bytes": int(hsm.tape_streamed_bytes),
            "tape_committed_bytes": hsm.tape_committed_bytes,
            "tape_rate": round(last, 3),
            "tape_backlog_bytes": int(hsm.tape_backlog_bytes),
            "online_buffer_bytes": self.online.used,
            "offline_buffer_bytes": self.offline.used,
            "source_waiting": int(self.source_wait > 0),
        })

    def drained(self):
        return (self.source_done and self._next_chunk is None and not self.online.keys()
                and not self.offline.keys() and self.store.hsm.tape_backlog_bytes == 0)

    def run(self, duration=None, drain=True, max_time=None):
        """Step for ``duration`` (or until the source ends), then stop the
        source and, with ``drain``, keep stepping until every chunk is safe
        on tape. ``max_time`` bounds the whole call."""
        start = self.clock.now()
        limit = start + (max_time if max_time is not None else float("inf"))

        def more():
            return self.clock.now() < limit

        while more() and not self.source_done:
            if duration is not None and self.clock.now() - start >= duration:
                break
            self.step()
        self.stop_source()
        while drain and more() and not self.drained():
            self.step()
        return self.report()

    def stop_source(self):
        """Stop accepting new chunks (the rest of the source is not produced)."""
        self.source_done = True
        self._next_chunk = None

    def report(self):
        safe = sum(self.sizes[k] for k in self.produced if self.chunk_safe(k))
        return CdrReport(
            bytes_in=self._counters["bytes_received"],
            bytes_to_tape=safe,
            peak_buffer_bytes=max(self.online.peak, self.offline.peak),
            max_catchup_rate=self.max_tape_rate,
            peak_online_bytes=self.online.peak,
            peak_offline_bytes=self.offline.peak,
            chunks=len(self.produced),
            events=self.events,
            corrupt_transfers=self.corrupt_transfers,
            ingester_kills=self.ingester_kills,
            hsm_restarts=self.hsm_restarts,
            buffer_full=self.buffer_full,
            source_wait_seconds=self.source_wait,
            audit_violations=list(self.violations),
            elapsed=self.clock.now() - self.t0,
            series=self.series,
        )


def cdr_run(store, source, duration=None, config=None):
    """Run a pipeline over ``source`` and return its report."""
    return CdrPipeline(store, config, source).run(duration)
