"""Scan scalability experiment: N clients started together, each scanning an
equal-sized share of the data, one CSV row per (label, strategy, N)."""

from __future__ import annotations

import csv
import os
import statistics
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np

from .._util import KiB
from ..dataserver import ClientLibrary, DataClient
from ..errors import EvStoreError

STRESS_FIELDS = ["label", "strategy", "clients", "scan_mean_s", "scan_p95_s", "aggregate_bytes_per_s",
                 "aggregate_payload_bytes_per_s", "records", "failures", "start_spread_s",
                 "wall_s", "wire_bytes", "payload_bytes", "write_bytes", "server_peak_open_handlers",
                 "server_bytes_served"]


@dataclass
class StressResult:
    label: str
    strategy: str
    clients: int
    scan_mean_s: float
    scan_p95_s: float
    aggregate_bytes_per_s: float
    aggregate_payload_bytes_per_s: float
    records: int
    failures: int
    start_spread_s: float
    wall_s: float
    wire_bytes: int
    payload_bytes: int
    write_bytes: int = 0
    server_peak_open_handlers: int = 0
    server_bytes_served: int = 0

    def row(self):
        return asdict(self)


def write_rows(path, rows):
    """Append rows to a CSV file, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STRESS_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r.row() if isinstance(r, StressResult) else r)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _shares(headers, clients, per_client):
    n = len(headers)
    if not n:
        return [[] for _ in range(clients)]
    out = []
    for i in range(clients):
        start = (i * per_client) % n
        idx = [(start + k) % n for k in range(min(per_client, n))]
        out.append([headers[j] for j in idx])
    return out


class _Writers:
    """Background write traffic held at ``ratio`` of the bytes read so far."""

    def __init__(self, endpoints, readers, ratio, count, block=64 * KiB, base_file=1 << 40):
        self.readers = readers
        self.ratio = ratio
        self.block = block
        self.written = 0
        self._lock = threading.Lock()
        self.stop = threading.Event()
        self.failures = 0
        self.threads = [threading.Thread(target=self._loop, args=(endpoints, base_file + i), daemon=True)
                        for i in range(count)]

    def read_bytes(self):
        return sum(c.wire_bytes for c in self.readers)

    def _loop(self, endpoints, file_id):
        data = np.random.default_rng(file_id).bytes(self.block)
        offset = 0
        with DataClient(endpoints) as client:
            while not self.stop.is_set():
                with self._lock:
                    go = self.written + self.block <= self.ratio * self.read_bytes()
                    if go:
                        self.written += self.block
                if not go:
                    time.sleep(0.005)
                    continue
                try:
                    client.write(file_id, offset, data)
                    offset += self.block
                except EvStoreError:
                    self.failures += 1

    def start(self):
        for t in self.threads:
            t.start()

    def finish(self):
        # let the writers catch up with the final read total
        deadline = time.monotonic() + 5
        while self.written + self.block <= self.ratio * self.read_bytes() and time.monotonic() < deadline:
            time.sleep(0.01)
        self.stop.set()
        for t in self.threads:
            t.join(10)


def stress_cell(catalog, endpoints, clients, runs, events_per_client, strategy=None, label="",
                client_bandwidth=None, kind="raw", farm=None, write_ratio=0.0, writers=0,
                start_window=0.1):
    """One (strategy, N) measurement."""
    headers = [h for run in runs for h in catalog.headers(run)]
    shares = _shares(headers, clients, events_per_client)
    make_strategy = strategy or ClientLibrary
    conns = [DataClient(endpoints, strategy=make_strategy(), bandwidth=client_bandwidth)
             for _ in range(clients)]
    results = [None] * clients
    failures = [0] * clients
    barrier = threading.Barrier(clients + 1)

    def work(i):
        barrier.wait()
        try:
            results[i] = conns[i].scan(catalog, shares[i][0].id.run if shares[i] else 0, kind,
                                       headers=shares[i])
        except EvStoreError:
            failures[i] += 1
        except OSError:
            failures[i] += 1

    base = farm.metrics() if farm is not None else {}
    threads = [threading.Thread(target=work, args=(i,), daemon=True) for i in range(clients)]
    for t in threads:
        t.start()
    wr = None
    if write_ratio and writers:
        wr = _Writers(endpoints, conns, write_ratio, writers)
        wr.start()
    barrier.wait()
    t0 = time.monotonic()
    for t in threads:
        t.join()
    wall = time.monotonic() - t0
    if wr is not None:
        wr.finish()
    after = farm.metrics() if farm is not None else {}
    for c in conns:
        c.close()

    done = [r for r in results if r is not None]
    times = sorted(r.elapsed for r in done)
    starts = [r.started for r in done]
    wire = sum(r.wire_bytes for r in done)
    payload = sum(r.payload_bytes for r in done)
    ends = [r.started + r.elapsed for r in done]
    span = (max(ends) - min(starts)) if done else wall
    peak = served = 0
    for name, m in after.items():
        if m:
            peak = max(peak, m["peak_open_handlers"])
            served += m["bytes_served"] - (base.get(name) or {}).get("bytes_served", 0)
    return StressResult(
        label=label,
        strategy=make_strategy().name if callable(make_strategy) else str(make_strategy),
        clients=clients,
        scan_mean_s=statistics.fmean(times) if times else 0.0,
        scan_p95_s=times[min(len(times) - 1, int(0.95 * len(times)))] if times else 0.0,
        aggregate_bytes_per_s=wire / span if span > 0 else 0.0,
        aggregate_payload_bytes_per_s=payload / span if span > 0 else 0.0,
        records=sum(r.records for r in done),
        failures=sum(failures) + sum(r.errors for r in done) + (wr.failures if wr is not None else 0),
        start_spread_s=(max(starts) - min(starts)) if starts else 0.0,
        wall_s=wall,
        wire_bytes=wire,
        payload_bytes=payload,
        write_bytes=wr.written if wr is not None else 0,
        server_peak_open_handlers=peak,
        server_bytes_served=served,
    )


def stress_scan(catalog, endpoints, client_counts, runs, events_per_client, strategy=None, label="",
                client_bandwidth=None, farm=None, csv_path=None, **kw):
    """Run one cell per client count; rows are appended to ``csv_path``."""
    rows = []
    for n in client_counts:
        row = stress_cell(catalog, endpoints, n, runs, events_per_client, strategy, label,
                          client_bandwidth, farm=farm, **kw)
        rows.append(row)
        if csv_path:
            write_rows(csv_path, [row])
    return rows
