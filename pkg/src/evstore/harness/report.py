"""Plot-ready CSV data: cumulative tape volume over time and scan scalability.

``tape_volume.csv``: ``t_s, tape_committed_bytes, tape_streamed_bytes,
tape_rate_bytes_per_s, tape_backlog_bytes, online_buffer_bytes,
offline_buffer_bytes`` (one row per pipeline tick; cumulative columns are
non-decreasing).

``scan_scaling.csv``: ``label, strategy, clients, scan_mean_s, scan_p95_s,
aggregate_bytes_per_s, aggregate_payload_bytes_per_s, failures`` (one row
per stress cell).
"""

from __future__ import annotations

import csv
import os

TAPE_FIELDS = ["t_s", "tape_committed_bytes", "tape_streamed_bytes", "tape_rate_bytes_per_s",
               "tape_backlog_bytes", "online_buffer_bytes", "offline_buffer_bytes"]
SCAN_FIELDS = ["label", "strategy", "clients", "scan_mean_s", "scan_p95_s", "aggregate_bytes_per_s",
               "aggregate_payload_bytes_per_s", "failures"]

TAPE_GP = """set datafile separator ','
set key autotitle columnhead
set xlabel 'time [s]'
set ylabel 'cumulative bytes on tape [GiB]'
plot 'tape_volume.csv' using 1:($2/1073741824) with lines title 'committed', \\
     '' using 1:($3/1073741824) with lines title 'streamed'
"""

SCAN_GP = """set datafile separator ','
set key autotitle columnhead
set logscale x 2
set xlabel 'concurrent clients'
set ylabel 'aggregate rate [MiB/s]'
plot for [L in "{labels}"] 'scan_scaling.csv' using 3:(strcol(1) eq L ? $6/1048576 : 1/0) \\
     with linespoints title L
"""


def _tape_row(r):
    return {"t_s": r["t"], "tape_committed_bytes": r["tape_committed_bytes"],
            "tape_streamed_bytes": r["tape_streamed_bytes"], "tape_rate_bytes_per_s": r["tape_rate"],
            "tape_backlog_bytes": r["tape_backlog_bytes"],
            "online_buffer_bytes": r["online_buffer_bytes"],
            "offline_buffer_bytes": r["offline_buffer_bytes"]}


def _scan_row(r):
    r = r.row() if hasattr(r, "row") else r
    return {k: r[k] for k in SCAN_FIELDS}


def emit_report(outdir, cdr_series=(), stress_rows=(), scripts=True):
    """Write tape_volume.csv / scan_scaling.csv (and gnuplot scripts) under ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    paths = {"tape_volume": os.path.join(outdir, "tape_volume.csv"),
             "scan_scaling": os.path.join(outdir, "scan_scaling.csv")}
    with open(paths["tape_volume"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TAPE_FIELDS)
        w.writeheader()
        for r in cdr_series:
            w.writerow(_tape_row(r))
    labels = []
    with open(paths["scan_scaling"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCAN_FIELDS)
        w.writeheader()
        for r in stress_rows:
            row = _scan_row(r)
            if row["label"] not in labels:
                labels.append(row["label"])
            w.writerow(row)
    if scripts:
        for name, text in (("tape_volume.gp", TAPE_GP),
                           ("scan_scaling.gp", SCAN_GP.format(labels=" ".join(labels) or "none"))):
            path = os.path.join(outdir, name)
            with open(path, "w") as fh:
                fh.write(text)
            paths[name] = path
    return paths
