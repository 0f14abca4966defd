"""Scan scalability for both payload backends against two server processes;
writes scan_scaling.csv with one curve per backend.

    python3 scripts/scan_curves.py [outdir]
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

from conftest import ingest_all  # noqa: E402

from evstore._util import KiB, MiB  # noqa: E402
from evstore.catalog import Backend  # noqa: E402
from evstore.dataserver import ServerFarm  # noqa: E402
from evstore.harness.generator import GeneratorProfile  # noqa: E402
from evstore.harness.report import emit_report  # noqa: E402
from evstore.harness.stress import stress_scan  # noqa: E402
from evstore.hsm import HsmConfig  # noqa: E402
from evstore.store import EventStore  # noqa: E402


def main(outdir):
    base = tempfile.mkdtemp(prefix="evstore-scan-")
    profile = GeneratorProfile(seed=3, runs=2, events_per_run=1024, payload_size=30 * KiB)
    rows = []
    for backend in (Backend.CONTAINER_A, Backend.FLAT_B):
        store = EventStore(os.path.join(base, backend.name), hsm_config=HsmConfig(pin_window=1e9))
        ingest_all(store, profile, backend=backend)
        with ServerFarm(store, count=2, total_bandwidth=16 * MiB) as farm:
            curve = stress_scan(store.catalog, farm.endpoints(), [1, 2, 4, 8, 16, 32, 64, 128], [1, 2], 32,
                                label=backend.name, client_bandwidth=2 * MiB, farm=farm)
        for r in curve:
            print(f"{backend.name:12s} N={r.clients:4d}  {r.aggregate_payload_bytes_per_s / MiB:6.2f} MiB/s payload  "
                  f"mean scan {r.scan_mean_s:5.2f}s")
        rows += curve
        store.close()
    print("wrote", emit_report(outdir, stress_rows=rows)["scan_scaling"])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else os.getcwd())
