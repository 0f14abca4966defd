"""Record a data set through the CDR pipeline while the lock service stalls
for 10 s, then write the tape-volume series as tape_volume.csv.

    python3 scripts/lock_stall_demo.py [outdir]
"""

import os
import sys
import tempfile

from evstore._util import KiB, MiB, SimClock
from evstore.cdr import CdrConfig, CdrPipeline
from evstore.harness.generator import Generator, GeneratorProfile
from evstore.harness.report import emit_report
from evstore.hsm import HsmConfig
from evstore.store import EventStore


def main(outdir):
    root = tempfile.mkdtemp(prefix="evstore-demo-")
    store = EventStore(root, clock=SimClock(), hsm_config=HsmConfig(capacity=256 * MiB, track_overhead=False))
    cfg = CdrConfig(max_chunk_size=8 * MiB, buffer_capacity=128 * MiB)
    gen = Generator(GeneratorProfile(seed=1, runs=2, events_per_run=3000, payload_size=30 * KiB,
                                     max_chunk_size=8 * MiB))
    pipe = CdrPipeline(store, cfg, gen.chunks())
    stalled = []

    def stall(p):
        if not stalled and p.clock.now() - p.t0 >= 5.0:
            p.stall_lock_service(10.0)
            stalled.append(p.clock.now())

    pipe.hooks.append(stall)
    rep = pipe.run()
    print(f"lock service stalled at t={stalled[0] - pipe.t0:.1f}s for 10s")
    for row in rep.series[::10]:
        print(f"t={row['t']:6.1f}s  on tape {row['tape_committed_bytes'] / MiB:7.1f} MiB  "
              f"offline buffer {row['offline_buffer_bytes'] / MiB:6.1f} MiB  "
              f"backlog {row['tape_backlog_bytes'] / MiB:6.1f} MiB")
    print(f"{rep.events} events, {rep.bytes_to_tape / MiB:.0f} MiB on tape, "
          f"peak buffer {rep.peak_buffer_bytes / MiB:.0f} MiB, audit violations {len(rep.audit_violations)}")
    paths = emit_report(outdir, cdr_series=rep.series)
    print("wrote", paths["tape_volume"])
    store.close()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else os.getcwd())
