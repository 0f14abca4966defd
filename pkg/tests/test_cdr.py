import io
import os
import socket
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evstore._util import KiB, MiB, crc32
from evstore.catalog import EventId, Holder
from evstore.cdr import CdrConfig, CdrPipeline, cdr_run
from evstore.cdr.buffers import BufferArea, ChunkStatus, PrematureDelete, RateController
from evstore.cdr.chunk import (HEAD_SIZE, RECORD_OVERHEAD, TRAILER_SIZE, decode_chunk, encode_chunk,
                               events_per_chunk)
from evstore.cdr.ingest import Ingester
from evstore.cdr.transfer import (BUSY, CORRUPT, OK, ChunkReceiver, push_chunk, read_ack, send_over,
                                  transfer_chunk)
from evstore.errors import BufferFull, FrameCorrupt
from evstore.harness.generator import Generator

from conftest import small_profile


def records(n, size=100, first=0):
    return [(e, bytes([e & 0xFF]) * size) for e in range(first, first + n)]


# -------------------------------------------------------------- chunk format

def test_chunk_layout_bit_exact():
    data = encode_chunk(22018, 3, [(5, b"abc")])
    body = (b"CDR1" + struct.pack(">HII", 1, 22018, 3)
            + struct.pack(">IQ", 3, 5) + b"abc" + struct.pack(">I", crc32(b"abc"))
            + b"1RDC" + struct.pack(">I", 1))
    assert data == body + struct.pack(">I", crc32(body))


def test_chunk_round_trip():
    recs = records(10)
    c = decode_chunk(encode_chunk(1, 0, recs))
    assert (c.run, c.sequence, c.records) == (1, 0, recs)


def test_empty_chunk():
    data = encode_chunk(1, 0, [])
    assert len(data) == HEAD_SIZE + TRAILER_SIZE
    assert decode_chunk(data).records == []


def test_chunk_size_limit():
    with pytest.raises(ValueError):
        encode_chunk(1, 0, records(10, 1000), max_size=5000)


def test_64mib_chunk_holds_about_2180_events():
    n = events_per_chunk(64 * MiB, 30 * KiB)
    # oracle: plain division of the chunk budget by the record footprint
    assert n == (64 * MiB - HEAD_SIZE - TRAILER_SIZE) // (30 * KiB + RECORD_OVERHEAD)
    assert 2170 <= n <= 2190


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 400), st.integers(0, 7))
def test_any_bit_flip_is_detected(pos, bit):
    data = bytearray(encode_chunk(2, 1, records(4, 90)))
    data[pos % len(data)] ^= 1 << bit
    with pytest.raises(FrameCorrupt):
        decode_chunk(bytes(data))


# ------------------------------------------------------------------ buffers

def test_buffer_delete_only_when_safe(tmp_path):
    b = BufferArea("online", str(tmp_path), 10 * KiB)
    b.put((1, 0), b"x" * 100)
    with pytest.raises(PrematureDelete):
        b.delete((1, 0))
    b.mark((1, 0), ChunkStatus.INGESTED)
    with pytest.raises(PrematureDelete):
        b.delete((1, 0))
    b.mark((1, 0), ChunkStatus.SAFE_ON_TAPE)
    b.delete((1, 0))
    assert b.used == 0 and (1, 0) not in b


def test_buffer_full(tmp_path):
    b = BufferArea("offline", str(tmp_path), 1000)
    b.put((1, 0), b"x" * 800)
    with pytest.raises(BufferFull):
        b.put((1, 1), b"x" * 300)
    assert b.used == 800 and b.peak == 800


def test_rate_controller():
    rc = RateController(8 * MiB, 2.0)
    assert rc.rate(0) == 8 * MiB
    assert rc.rate(1) == 16 * MiB
    with pytest.raises(ValueError):
        RateController(1, 0.5)


# ----------------------------------------------------------------- transfer

def _push(data, buffer):
    down = io.BytesIO()
    push_chunk(down, data)
    down.seek(0)
    up = io.BytesIO()
    err = None
    try:
        transfer_chunk(down, up, buffer)
    except (FrameCorrupt, BufferFull) as exc:
        err = exc
    up.seek(0)
    return read_ack(up), err


def test_transfer_ack_ok(tmp_path):
    buf = BufferArea("offline", str(tmp_path), 1 * MiB)
    data = encode_chunk(1, 0, records(3))
    ack, err = _push(data, buf)
    assert err is None and ack.status == OK and ack.crc == crc32(data)
    assert buf.get((1, 0)) == data and buf.status[(1, 0)] is ChunkStatus.RECEIVED


def test_transfer_corrupt_and_busy(tmp_path):
    buf = BufferArea("offline", str(tmp_path), 500)
    data = bytearray(encode_chunk(1, 0, records(3)))
    data[40] ^= 1
    ack, err = _push(bytes(data), buf)
    assert ack.status == CORRUPT and isinstance(err, FrameCorrupt)
    ack, err = _push(encode_chunk(1, 0, records(3, 300)), buf)
    assert ack.status == BUSY and isinstance(err, BufferFull)
    assert buf.keys() == []


def test_four_streams_over_tcp(tmp_path):
    buf = BufferArea("offline", str(tmp_path), 64 * MiB)
    srv = ChunkReceiver(("127.0.0.1", 0), buf)
    threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True).start()
    attempts = []

    def stream(s):
        flip_once = (lambda attempt, d: d[:50] + bytes([d[50] ^ 1]) + d[51:] if attempt == 1 else d) \
            if s == 0 else None
        with socket.create_connection(srv.address) as sock:
            r, w = sock.makefile("rb"), sock.makefile("wb")
            for seq in range(10):
                data = encode_chunk(s + 1, seq, records(5, 1000))
                attempts.append(send_over(r, w, data, corrupt=flip_once))
            r.close()
            w.close()

    threads = [threading.Thread(target=stream, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    srv.shutdown()
    srv.server_close()
    assert len(buf.keys()) == 40
    assert srv.corrupt == 10 and sum(attempts) == 50
    for run, seq in buf.keys():
        assert decode_chunk(buf.get((run, seq))).records == records(5, 1000)


# ------------------------------------------------------------------- ingest

def test_ingest_round_trip_and_idempotence(store):
    recs = [(e, os.urandom(3000)) for e in range(200)]
    ing = Ingester(store, Holder(os.getuid(), "ing", write=True))
    data = encode_chunk(1, 0, recs)
    first = ing.ingest_chunk(data)
    stats = store.catalog.catalog_stats()
    assert first.events == 200
    assert ing.ingest_chunk(data) == first
    assert store.catalog.catalog_stats() == stats
    for e, payload in recs:
        loc = store.catalog.get_header(EventId(1, e)).raw
        assert loc.file_id == first.file_id
        assert store.read_event(EventId(1, e)) == payload


def test_ingest_empty_chunk(store):
    ing = Ingester(store, Holder(os.getuid(), "ing", write=True))
    assert ing.ingest_chunk(encode_chunk(1, 0, [])).events == 0
    assert store.catalog.run_length(1) == 0


@pytest.mark.parametrize("point", Ingester.CRASH_POINTS)
def test_killed_ingester_is_replaced(store, point):
    from evstore.errors import Conflict, InjectedCrash
    data = encode_chunk(1, 0, records(20, 500))
    dead = Ingester(store, Holder(os.getuid(), "g1", write=True))
    dead.crash.arm(point)
    with pytest.raises(InjectedCrash):
        dead.ingest_chunk(data)
    fresh = Ingester(store, Holder(os.getuid(), "g2", write=True))
    try:
        result = fresh.ingest_chunk(data)
    except Conflict:
        store.clock.advance(store.catalog.default_ttl + 1)
        store.catalog.reap_expired()
        result = fresh.ingest_chunk(data)
    assert result.events == 20
    assert [store.read_event(EventId(1, e)) for e in range(20)] == [p for _e, p in records(20, 500)]
    assert store.catalog.consistency_check() == []


# ----------------------------------------------------------------- pipeline

def cfg(**kw):
    base = dict(max_chunk_size=40 * KiB, source_rate=200 * KiB, nominal_rate=200 * KiB,
                link_bandwidth=1 * MiB, ingest_rate=2 * MiB, tick=0.1, prune_interval=0.5)
    base.update(kw)
    return CdrConfig(**base)


def run_pipe(store, profile, config, hook=None, **kw):
    gen = Generator(profile)
    manifest = gen.empty_manifest()
    pipe = CdrPipeline(store, config, gen.chunks(manifest=manifest))
    if hook:
        pipe.hooks.append(hook)
    return pipe, manifest, pipe.run(**kw)


def test_steady_run_conserves_bytes(store):
    pipe, manifest, rep = run_pipe(store, small_profile(), cfg())
    assert rep.bytes_to_tape == rep.bytes_in == sum(pipe.sizes.values())
    assert rep.audit_violations == []
    assert pipe.online.used == pipe.offline.used == 0
    assert rep.events == len(manifest.events)
    for (run, e), (crc, _n) in manifest.events.items():
        assert crc32(store.read_event(EventId(run, e))) == crc
    assert rep.series and set(rep.series[0]) >= {"t", "tape_streamed_bytes", "online_buffer_bytes"}
    assert all(a["tape_streamed_bytes"] <= b["tape_streamed_bytes"]
               for a, b in zip(rep.series, rep.series[1:]))


def test_prune_waits_for_tape(store):
    gen = Generator(small_profile(runs=1, events_per_run=8))
    pipe = CdrPipeline(store, cfg(), gen.chunks())
    pipe.stall_tape(True)
    for _ in range(30):
        pipe.step()
    assert pipe.results  # ingested, still DiskOnly
    assert pipe.confirm_and_prune() == {"pruned_online": 0, "pruned_offline": 0}
    pipe.stall_tape(False)
    rep = pipe.run()
    assert pipe.online.keys() == [] and rep.audit_violations == []


def test_corruption_is_retried(store):
    def corrupt_first(p, done=[]):
        if not done:
            p.corrupt_stream((1, 0), 123)
            done.append(1)

    pipe, manifest, rep = run_pipe(store, small_profile(), cfg(), hook=corrupt_first)
    assert rep.corrupt_transfers == 1
    assert rep.events == len(manifest.events)
    for (run, e), (crc, _n) in manifest.events.items():
        assert crc32(store.read_event(EventId(run, e))) == crc


def test_tape_stall_backpressure_and_catchup(store):
    c = cfg(buffer_capacity=400 * KiB)
    stall = {"on": 3.0, "off": 8.0}

    def hook(p):
        t = p.clock.now() - p.t0
        p.stall_tape(stall["on"] <= t < stall["off"])

    profile = small_profile(runs=1, events_per_run=300)
    pipe, manifest, rep = run_pipe(store, profile, c, hook=hook)
    assert rep.peak_offline_bytes <= c.buffer_capacity
    assert rep.source_wait_seconds > 0
    assert rep.audit_violations == []
    assert c.nominal_rate < rep.max_catchup_rate <= c.nominal_rate * c.catchup_factor + 1e-6
    assert store.hsm.tape_backlog_bytes == 0
    assert rep.events == len(manifest.events)


def test_cdr_run_duration_stops_source(store):
    gen = Generator(small_profile(events_per_run=200))
    rep = cdr_run(store, gen.chunks(), duration=1.0, config=cfg())
    assert 0 < rep.chunks < len(gen.plan)
    assert rep.bytes_to_tape == rep.bytes_in


def test_directory_source(store, tmp_path):
    from evstore.cdr import directory_source
    d = tmp_path / "chunks"
    d.mkdir()
    for run, seq, data in Generator(small_profile()).chunks():
        (d / f"run{run:06d}-seq{seq:05d}.cdr").write_bytes(data)
    rep = cdr_run(store, directory_source(str(d)), config=cfg())
    assert rep.events == 48
