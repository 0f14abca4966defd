import collections
import os
import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evstore._util import KiB, MiB, crc32
from evstore.catalog import Backend, EventId
from evstore.dataserver import (CatalogAffinity, ClientLibrary, DataClient, DataServer, ServerFarm,
                                choose_server)
from evstore.dataserver import protocol as P
from evstore.dataserver.balance import Endpoint
from evstore.dataserver.query import EventRange, split_query
from evstore.dataserver.resolvers import HSMResolver
from evstore.errors import (NoEndpoints, NoSuchFile, PermissionDenied, RangeOutOfBounds,
                            TransportError, VersionUnbound)
from evstore.hsm import FileState

from conftest import ingest_all, small_profile


@pytest.fixture
def loaded(store):
    manifest, results = ingest_all(store, small_profile())
    store.hsm.migrate_pending()
    return store, manifest, results


@pytest.fixture
def server(loaded):
    store = loaded[0]
    srv = DataServer(("127.0.0.1", 0), HSMResolver(store), write_root=os.path.join(store.root, "scratch"),
                     name="srv1").start()
    yield srv
    srv.stop()


def file_bytes(store, fid):
    with open(store.hsm.stat(fid).path, "rb") as fh:
        return fh.read()


# ----------------------------------------------------------------- protocol

def test_request_layout():
    raw = P.pack_request(P.READ, 7, 1 << 33, 4096, 1000)
    assert raw == b"EVRD" + struct.pack(">BQQII", 1, 7, 1 << 33, 4096, 1000)
    assert P.unpack_request(raw) == (1, 7, 1 << 33, 4096, 1000)


def test_response_layout():
    raw = P.pack_response(P.OK, b"hello")
    assert raw == struct.pack(">BI", 0, 5) + b"hello" + struct.pack(">I", crc32(b"hello"))


def test_bad_magic():
    with pytest.raises(P.BadRequest):
        P.unpack_request(b"XXXX" + bytes(P.REQUEST.size - 4))


def test_status_mapping_round_trip():
    for exc in (NoSuchFile("x"), RangeOutOfBounds("x"), PermissionDenied("x")):
        with pytest.raises(type(exc)):
            P.raise_for(P.status_of(exc), "x")


# ------------------------------------------------------------------ serving

def _raw(srv, verb, fid, off, n, uid=0, body=b""):
    with socket.create_connection(srv.address) as s:
        s.sendall(P.pack_request(verb, fid, off, n, uid) + body)
        return P.read_response(s.makefile("rb"))


def test_full_file_read(loaded, server):
    store, _m, results = loaded
    fid = results[0].file_id
    data = file_bytes(store, fid)
    with DataClient([server.address]) as c:
        assert c.read(fid, 0, len(data)) == data


def test_read_larger_than_single_cap_is_split(loaded):
    store, _m, results = loaded
    srv = DataServer(("127.0.0.1", 0), HSMResolver(store), max_single_read=4 * KiB).start()
    try:
        fid = results[0].file_id
        data = file_bytes(store, fid)
        with DataClient([srv.address], max_single_read=4 * KiB) as c:
            assert c.read(fid, 0, len(data)) == data
        status, _ = _raw(srv, P.READ, fid, 0, 8 * KiB)
        assert status == P.BAD_REQUEST
        status, _ = _raw(srv, P.READ, fid, 0, 0)
        assert status == P.BAD_REQUEST
    finally:
        srv.stop()


def test_error_statuses(loaded, server):
    _store, _m, results = loaded
    assert _raw(server, P.READ, 99999, 0, 10)[0] == P.NO_SUCH_FILE
    assert _raw(server, P.READ, results[0].file_id, 1 << 40, 10)[0] == P.OUT_OF_RANGE
    assert _raw(server, 9, 1, 0, 1)[0] == P.BAD_REQUEST


def test_stat(loaded, server):
    store, _m, results = loaded
    f = store.hsm.stat(results[0].file_id)
    with DataClient([server.address]) as c:
        size, state, crc = c.stat(f.file_id)
    assert (size, crc) == (f.size, f.checksum)
    assert list(FileState)[state] is f.state


def test_write_uid_check(loaded, server):
    with DataClient([server.address]) as c:
        assert c.write(5, 0, b"abc") == 3
    with open(os.path.join(server.write_root, "scratch-f00000005.dat"), "rb") as fh:
        assert fh.read() == b"abc"
    with DataClient([server.address], uid=os.getuid() + 1) as c:
        with pytest.raises(PermissionDenied):
            c.write(5, 0, b"abc")


def test_transparency_across_states(loaded, server):
    store, manifest, _r = loaded
    clock = store.clock
    ev = EventId(1, 3)
    crc, _n = manifest.events[(1, 3)]
    with DataClient([server.address]) as c:
        cached = c.read_event(store.catalog, ev)
        clock.advance(store.hsm.config.pin_window + 1)
        store.hsm.cache_gc(store.hsm.config.capacity)
        loc = store.catalog.get_header(ev).raw
        assert store.hsm.stat(loc.file_id).state is FileState.TAPE_ONLY
        t = clock.now()
        recalled = c.read_event(store.catalog, ev)
        assert clock.now() - t >= store.hsm.config.mount_latency
        t = clock.now()
        again = c.read_event(store.catalog, ev)
        assert clock.now() == t
    assert crc32(cached) == crc32(recalled) == crc32(again) == crc


def test_header_needs_no_recall(loaded):
    store, _m, _r = loaded
    before = [store.catalog.get_header(EventId(1, e)) for e in range(24)]
    store.clock.advance(store.hsm.config.pin_window + 1)
    store.hsm.cache_gc(store.hsm.config.capacity)
    after = [store.catalog.get_header(EventId(1, e)) for e in range(24)]
    assert [h.pack() for h in after] == [h.pack() for h in before]
    assert store.hsm.recall_count == 0


def test_read_event_unbound_version(loaded, server):
    with DataClient([server.address]) as c:
        with pytest.raises(VersionUnbound):
            c.read_event(loaded[0].catalog, EventId(1, 0), "dst-v1")


def test_scan_run_and_empty(loaded, server):
    store, manifest, _r = loaded
    with DataClient([server.address]) as c:
        r = c.scan(store.catalog, 2)
        empty = c.scan(store.catalog, 77)
    assert r.records == 24 and r.errors == 0
    assert r.payload_bytes == sum(n for (run, _e), (_c, n) in manifest.events.items() if run == 2)
    assert empty.records == 0 and empty.elapsed < 0.05


def test_scan_time_tracks_bandwidth(loaded, server):
    store = loaded[0]
    bw = 1 * MiB
    with DataClient([server.address], bandwidth=bw) as c:
        r = c.scan(store.catalog, 1)
    assert r.elapsed == pytest.approx(r.wire_bytes / bw, rel=0.25)


# ---------------------------------------------------------------- balancing

def _eps(n):
    return [Endpoint(("127.0.0.1", 9000 + i), name=f"srv{i + 1}") for i in range(n)]


def test_round_robin_counts():
    eps = _eps(3)
    lib = ClientLibrary()
    counts = collections.Counter(choose_server(i, lib, eps).endpoint.name for i in range(300))
    assert all(80 <= counts[e.name] <= 120 for e in eps)


def test_least_loaded_prefers_idle():
    eps = _eps(3)
    eps[0].open_requests = 5
    eps[1].open_requests = 5
    assert ClientLibrary("least-loaded").choose(1, eps).endpoint is eps[2]


def test_no_endpoints():
    with pytest.raises(NoEndpoints):
        ClientLibrary().choose(1, [])


def test_affinity_deterministic_and_fallback(loaded):
    store, _m, results = loaded
    cat = store.catalog
    entry = cat.file_database(results[0].file_id)
    entry.server_affinity = "srv2"
    eps = _eps(3)
    aff = CatalogAffinity(cat)
    assert {aff.choose(results[0].file_id, eps).endpoint.name for _ in range(20)} == {"srv2"}
    eps[1].alive = False
    choice = aff.choose(results[0].file_id, eps)
    assert choice.fallback and choice.warning and choice.endpoint.name != "srv2"


def test_strategy_equivalence(loaded):
    store, _m, _r = loaded
    with ServerFarm(store, count=2, processes=False) as farm:
        eps = farm.endpoints()
        with DataClient(eps, strategy=ClientLibrary()) as a, \
                DataClient(eps, strategy=CatalogAffinity(store.catalog)) as b:
            got_a = [a.read_event(store.catalog, EventId(1, e)) for e in range(24)]
            got_b = [b.read_event(store.catalog, EventId(1, e)) for e in range(24)]
    assert got_a == got_b


# ------------------------------------------------------ processes and retry

def test_server_processes_and_kill(loaded):
    store, manifest, _r = loaded
    with ServerFarm(store, count=2, processes=True) as farm:
        eps = farm.endpoints()
        with DataClient(eps, strategy=ClientLibrary()) as c:
            first = c.read_event(store.catalog, EventId(1, 0))
            farm.kill(0)
            rest = [c.read_event(store.catalog, EventId(1, e)) for e in range(1, 24)]
            assert c.retried >= 1
        assert farm.servers[1].metrics()["requests"] > 0
    got = [first] + rest
    assert [crc32(p) for p in got] == [manifest.events[(1, e)][0] for e in range(24)]


def test_all_servers_dead_surfaces_retries(loaded):
    store = loaded[0]
    farm = ServerFarm(store, count=2, processes=False)
    eps = farm.endpoints()
    farm.stop()
    with DataClient(eps, timeout=1.0) as c:
        with pytest.raises(TransportError) as err:
            c.read_event(store.catalog, EventId(1, 0))
    assert err.value.retries == 2


def test_container_and_flat_read_identically(loaded, server):
    from evstore.migration.migrate import Migrator
    store, manifest, _r = loaded
    with DataClient([server.address]) as c:
        before = [c.read_event(store.catalog, EventId(1, e)) for e in range(24)]
        Migrator(store).migrate_run(1, 1.0)
        assert store.catalog.get_header(EventId(1, 0)).raw.backend is Backend.FLAT_B
        after = [c.read_event(store.catalog, EventId(1, e)) for e in range(24)]
    assert before == after


# -------------------------------------------------------------- split_query

def test_split_million():
    parts = split_query(EventRange(1, 0, 10 ** 6), 10 ** 5)
    assert len(parts) == 10 and all(len(p) == 10 ** 5 for p in parts)
    assert all(a.stop == b.first for a, b in zip(parts, parts[1:]))


def test_split_small_and_empty():
    r = EventRange(3, 5, 9)
    assert split_query(r, 100) == [r]
    assert split_query(EventRange(3, 5, 5), 100) == []
    with pytest.raises(ValueError):
        split_query(r, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.integers(0, 500), st.integers(0, 500)), max_size=6),
       st.integers(1, 120))
def test_split_flatten_identity(ranges, k):
    sel = [EventRange(run, a, a + n) for run, a, n in ranges]
    parts = split_query(sel, k)
    assert all(0 < len(p) <= k for p in parts)
    assert [e for p in parts for e in p.events()] == [e for r in sel for e in r.events()]


def test_server_metrics_track_handlers(loaded, server):
    store = loaded[0]
    with DataClient([server.address]) as c:
        c.scan(store.catalog, 1)
    m = server.metrics.snapshot()
    assert m["requests"] >= 24 and m["open_handlers"] == 0 and m["peak_open_handlers"] >= 1
