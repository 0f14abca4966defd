"""Migrate ten runs from the container backend to flat files while a reader
keeps fetching events, then show what verification looked at.

    python3 scripts/live_migration.py
"""

import os
import random
import sys
import tempfile
import threading

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

from conftest import ingest_all  # noqa: E402

from evstore._util import KiB, SimClock, crc32  # noqa: E402
from evstore.catalog import Backend, EventId  # noqa: E402
from evstore.harness.generator import GeneratorProfile  # noqa: E402
from evstore.hsm import HsmConfig  # noqa: E402
from evstore.migration.migrate import Migrator, overhead_report  # noqa: E402
from evstore.store import EventStore  # noqa: E402


def main():
    store = EventStore(tempfile.mkdtemp(prefix="evstore-migr-"), clock=SimClock(),
                       hsm_config=HsmConfig(pin_window=1e9))
    manifest, _ = ingest_all(store, GeneratorProfile(seed=2, runs=10, events_per_run=300, payload_size=30 * KiB))
    before = overhead_report(store, Backend.CONTAINER_A)
    stop = threading.Event()
    reads = [0, 0]

    def reader():
        rng = random.Random(0)
        keys = sorted(manifest.events)
        while not stop.is_set():
            key = rng.choice(keys)
            reads[0] += 1
            reads[1] += crc32(store.read_event(EventId(*key))) != manifest.events[key][0]

    t = threading.Thread(target=reader)
    t.start()
    rep = Migrator(store).migrate_runs(store.catalog.runs())
    stop.set()
    t.join()
    after = overhead_report(store, Backend.FLAT_B)
    print(rep.to_text(), end="")
    print(f"reader: {reads[0]} reads during migration, {reads[1]} wrong")
    print(f"container files {before['file_bytes'] / 2**20:.1f} MiB -> flat files {after['file_bytes'] / 2**20:.1f} MiB "
          f"for {after['payload_bytes'] / 2**20:.1f} MiB of payload")
    store.close()


if __name__ == "__main__":
    main()
