import os

import pytest

from evstore._util import KiB, SimClock
from evstore.catalog import Catalog, Holder
from evstore.cdr.ingest import Ingester
from evstore.harness.generator import Generator, GeneratorProfile
from evstore.hsm import HsmConfig
from evstore.store import EventStore


@pytest.fixture
def clock():
    return SimClock()


@pytest.fixture
def catalog(clock):
    return Catalog(clock=clock, create_timeout=2.0)


@pytest.fixture
def writer():
    return Holder(os.getuid(), "writer", write=True)


@pytest.fixture
def store(tmp_path, clock):
    s = EventStore(str(tmp_path / "store"), clock=clock, hsm_config=HsmConfig(pin_window=60.0))
    yield s
    s.close()


def small_profile(**kw):
    base = dict(seed=7, runs=2, events_per_run=24, payload_size=4 * KiB, max_chunk_size=40 * KiB)
    base.update(kw)
    return GeneratorProfile(**base)


def ingest_all(store, profile, backend=None, holder=None):
    """Ingest every chunk of ``profile`` directly (no transfer stage)."""
    gen = Generator(profile)
    manifest = gen.empty_manifest()
    kw = {"backend": backend} if backend is not None else {}
    ing = Ingester(store, holder or Holder(os.getuid(), "ingest", write=True), **kw)
    results = [ing.ingest_chunk(data) for _run, _seq, data in gen.chunks(manifest=manifest)]
    for run in profile.run_numbers:
        store.catalog.seal_run(run, ing.holder)
    return manifest, results


ACCEPTANCE = []  # one "criterion N ... PASS|FAIL" line per acceptance check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
