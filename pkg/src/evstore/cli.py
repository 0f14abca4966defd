"""``evstore`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from ._util import SimClock, crc32
from .catalog import Backend, EventId
from .errors import TapeWriteFailed
from .store import EventStore

log = logging.getLogger("evstore")


def _root(args):
    return args.data_root or os.environ.get("EVSTORE_ROOT") or "evstore-data"


def _cfg(args):
    from .harness.config import load_config
    return load_config(args.config)


def _open(args, clock=None):
    from .harness.config import hsm_config
    cfg = _cfg(args)
    return EventStore(_root(args), clock=clock, hsm_config=hsm_config(cfg),
                      ttl=cfg["catalog"]["lease_ttl"])


def _addr(text):
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def _print(obj):
    print(json.dumps(obj, indent=1, default=str))


# ------------------------------------------------------------------ commands

def cmd_gen(args):
    from .harness.config import generator_profile
    from .harness.generator import Generator
    cfg = _cfg(args)
    for key in ("seed", "runs", "events_per_run", "payload_size"):
        if getattr(args, key) is not None:
            cfg["generator"][key] = getattr(args, key)
    gen = Generator(generator_profile(cfg))
    os.makedirs(args.out, exist_ok=True)
    manifest = gen.empty_manifest()
    for run, seq, data in gen.chunks(manifest=manifest):
        with open(os.path.join(args.out, f"run{run:06d}-seq{seq:05d}.cdr"), "wb") as fh:
            fh.write(data)
    manifest.save(os.path.join(args.out, "manifest.json"))
    print(f"{len(manifest.chunks)} chunks, {len(manifest.events)} events, "
          f"{manifest.payload_bytes} payload bytes -> {args.out}")


def cmd_cdr(args):
    from .cdr import CdrPipeline, directory_source
    from .harness.config import cdr_config, generator_profile
    from .harness.generator import Generator
    cfg = _cfg(args)
    if args.streams:
        cfg["cdr"]["streams"] = args.streams
    store = _open(args, clock=SimClock())
    if args.source == "gen":
        source = Generator(generator_profile(cfg)).chunks()
    else:
        source = directory_source(args.source)
    pipe = CdrPipeline(store, cdr_config(cfg), source)
    rep = pipe.run(args.duration)
    with open(os.path.join(store.root, "cdr_series.csv"), "w") as fh:
        fh.write(rep.series_csv())
    _print(rep.summary())


def cmd_serve(args):
    from .dataserver import DataServer
    from .dataserver.resolvers import HSMResolver
    store = _open(args)
    srv = DataServer(_addr(args.listen), HSMResolver(store), bandwidth=args.bandwidth,
                     write_root=os.path.join(store.root, "scratch"))
    print(f"serving {store.root} on {srv.address[0]}:{srv.address[1]}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()


def _client(args, store):
    from .dataserver import CatalogAffinity, ClientLibrary, DataClient
    strategy = CatalogAffinity(store.catalog) if args.strategy == "affinity" else ClientLibrary()
    return DataClient([_addr(s) for s in args.server], strategy=strategy)


def cmd_read(args):
    store = _open(args)
    id = EventId.parse(args.event)
    if args.server:
        with _client(args, store) as c:
            data = c.read_event(store.catalog, id, args.kind)
    else:
        data = store.read_event(id, args.kind)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(data)
    print(f"{id.run}:{id.event} {args.kind} {len(data)} bytes crc32 {crc32(data):08x}")


def cmd_scan(args):
    store = _open(args)
    if not args.server:
        sys.exit("scan needs at least one --server")
    with _client(args, store) as c:
        r = c.scan(store.catalog, args.run, args.kind)
    _print({"run": r.run, "records": r.records, "payload_bytes": r.payload_bytes,
            "wire_bytes": r.wire_bytes, "elapsed": r.elapsed, "errors": r.errors})


def cmd_stress(args):
    from .dataserver import CatalogAffinity, ClientLibrary, ServerFarm
    from .harness.report import emit_report
    from .harness.stress import stress_scan
    cfg = _cfg(args)["dataserver"]
    store = _open(args)
    counts = [int(x) for x in args.clients.split(",")]
    runs = [int(x) for x in args.runs.split(",")] if args.runs else store.catalog.runs()
    strategy = (lambda: CatalogAffinity(store.catalog)) if args.strategy == "affinity" else ClientLibrary
    with ServerFarm(store, count=args.servers or cfg["servers"], total_bandwidth=cfg["total_bandwidth"],
                    processes=cfg["processes"]) as farm:
        rows = stress_scan(store.catalog, farm.endpoints(), counts, runs, args.events_per_client,
                           strategy=strategy, label=args.label, client_bandwidth=cfg["client_bandwidth"],
                           farm=farm, csv_path=args.out)
    emit_report(os.path.dirname(os.path.abspath(args.out)), stress_rows=rows)
    for r in rows:
        print(f"N={r.clients:4d} aggregate {r.aggregate_bytes_per_s / 2**20:8.2f} MiB/s "
              f"scan {r.scan_mean_s:7.2f}s failures {r.failures}")


def cmd_migrate(args):
    from .migration.migrate import Migrator
    store = _open(args)
    m = Migrator(store)
    rep = m.migrate_run(args.run, args.fraction, args.seed)
    sys.stdout.write(rep.to_text())
    if rep.mismatches:
        sys.stdout.write(rep.to_csv())


def cmd_verify(args):
    from .migration.migrate import Migrator, VerificationReport
    store = _open(args)
    m = Migrator(store)
    runs = [args.run] if args.run else [r for r in store.catalog.runs() if m.job(r)]
    total = VerificationReport(seed=args.seed, sample_fraction=args.fraction, phase="Verify")
    for run in runs:
        total.merge(m.verify_sample(run, args.fraction, args.seed))
    sys.stdout.write(total.to_text())
    if total.mismatches:
        sys.stdout.write(total.to_csv())
        sys.exit(1)


def cmd_fault(args):
    from .harness.config import cdr_config, generator_profile, hsm_config
    from .harness.faults import FaultPlan, run_fault_scenario
    from .harness.generator import plan_chunks
    cfg = _cfg(args)
    profile = generator_profile(cfg)
    if args.plan:
        plan = FaultPlan.load(args.plan)
    else:
        horizon = profile.runs * profile.events_per_run * profile.payload_size / cfg["cdr"]["source_rate"]
        plan = FaultPlan.generate(args.seed, horizon, len(plan_chunks(profile)), kills=args.kills)
    rep = run_fault_scenario(plan, profile, _root(args), cdr_config(cfg), hsm_config(cfg),
                             migrate_runs=args.migrate_runs, check=False)
    _print({"verdict": rep.verdict(), "ok": rep.ok, "events": rep.events_found,
            "faults": rep.faults_applied, "cdr": rep.cdr})
    if not rep.ok:
        sys.exit(1)


def cmd_report(args):
    from .harness.report import emit_report
    series, rows = [], []
    cdr = os.path.join(args.run_dir, "cdr_series.csv")
    stress = os.path.join(args.run_dir, "stress.csv")
    if os.path.exists(cdr):
        with open(cdr, newline="") as fh:
            series = list(csv.DictReader(fh))
    if os.path.exists(stress):
        with open(stress, newline="") as fh:
            rows = list(csv.DictReader(fh))
    paths = emit_report(args.out or args.run_dir, series, rows)
    _print(paths)


def cmd_catalog(args):
    store = _open(args)
    if args.action == "stats":
        _print(store.catalog.catalog_stats().__dict__)
    else:
        problems = store.catalog.consistency_check()
        for p in problems:
            print(p)
        print("consistent" if not problems else f"{len(problems)} problems")
        if problems:
            sys.exit(1)


def cmd_lease(args):
    store = _open(args)
    if args.action == "list":
        for l in store.catalog.leases:
            print(f"{l.lease_id}\t{l.mode.value}\t{l.resource}\t{l.holder}\texpires {l.expires_at:.1f}")
    else:
        print("reaped:", store.catalog.reap_expired())


def cmd_hsm(args):
    store = _open(args)
    hsm = store.hsm
    if args.action == "migrate":
        try:
            print("migrated:", hsm.migrate_pending(args.max_files))
        except TapeWriteFailed as exc:
            sys.exit(f"tape write failed: {exc}")
    elif args.action == "gc":
        print("freed bytes:", hsm.cache_gc(args.target_free))
    elif args.action == "stat":
        _print(hsm.hsm_stats())
    else:
        fid = int(args.file) if args.file.isdigit() else hsm.lookup(args.file)
        print(hsm.ensure_online(fid))


def cmd_overhead(args):
    from .migration.migrate import overhead_report
    store = _open(args)
    for b in ([Backend[args.backend]] if args.backend else list(Backend)):
        _print(overhead_report(store, b))


# ---------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="evstore", description=__doc__)
    p.add_argument("--data-root", help="store directory (env EVSTORE_ROOT)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic chunk stream and its manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--runs", type=int)
    g.add_argument("--events-per-run", type=int)
    g.add_argument("--payload-size", type=int)
    g.set_defaults(fn=cmd_gen)

    c = sub.add_parser("cdr", help="central data recording pipeline")
    csub = c.add_subparsers(dest="action", required=True)
    cr = csub.add_parser("run")
    cr.add_argument("--source", default="gen", help="chunk directory, or 'gen'")
    cr.add_argument("--streams", type=int)
    cr.add_argument("--duration", type=float)
    cr.set_defaults(fn=cmd_cdr)

    s = sub.add_parser("serve", help="run a data server")
    s.add_argument("--listen", default="127.0.0.1:7070")
    s.add_argument("--bandwidth", type=float)
    s.set_defaults(fn=cmd_serve)

    for name, fn in (("read", cmd_read), ("scan", cmd_scan)):
        r = sub.add_parser(name)
        if name == "read":
            r.add_argument("--event", required=True, help="run:event")
            r.add_argument("--out")
        else:
            r.add_argument("--run", type=int, required=True)
        r.add_argument("--kind", default="raw")
        r.add_argument("--server", action="append", default=[], help="host:port (repeatable)")
        r.add_argument("--strategy", choices=["library", "affinity"], default="library")
        r.set_defaults(fn=fn)

    st = sub.add_parser("stress", help="scan scalability experiment")
    st.add_argument("--clients", default="1,2,4,8,16,32,64,128")
    st.add_argument("--servers", type=int)
    st.add_argument("--runs")
    st.add_argument("--events-per-client", type=int, default=64)
    st.add_argument("--strategy", choices=["library", "affinity"], default="library")
    st.add_argument("--label", default="")
    st.add_argument("--out", default="stress.csv")
    st.set_defaults(fn=cmd_stress)

    m = sub.add_parser("migrate", help="migrate RAW payloads to the flat backend")
    msub = m.add_subparsers(dest="action", required=True)
    mr = msub.add_parser("run")
    mr.add_argument("run", type=int)
    mr.add_argument("--fraction", type=float, default=0.05)
    mr.add_argument("--seed", type=int, default=0)
    mr.set_defaults(fn=cmd_migrate)

    v = sub.add_parser("verify", help="re-check migrated runs against their source")
    v.add_argument("--fraction", type=float, default=0.05)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--run", type=int)
    v.set_defaults(fn=cmd_verify)

    f = sub.add_parser("fault", help="end-to-end fault scenario")
    f.add_argument("--plan")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--kills", type=int, default=10)
    f.add_argument("--migrate-runs", type=int, default=1)
    f.set_defaults(fn=cmd_fault)

    rp = sub.add_parser("report", help="plot-ready CSV data from a run directory")
    rp.add_argument("--run-dir", default=".")
    rp.add_argument("--out")
    rp.set_defaults(fn=cmd_report)

    cat = sub.add_parser("catalog")
    cat.add_argument("action", choices=["stats", "verify"])
    cat.set_defaults(fn=cmd_catalog)

    le = sub.add_parser("lease")
    le.add_argument("action", choices=["list", "reap"])
    le.set_defaults(fn=cmd_lease)

    h = sub.add_parser("hsm")
    h.add_argument("action", choices=["migrate", "gc", "stat", "recall"])
    h.add_argument("file", nargs="?")
    h.add_argument("--max-files", type=int)
    h.add_argument("--target-free", type=int, default=0)
    h.set_defaults(fn=cmd_hsm)

    o = sub.add_parser("overhead-report")
    o.add_argument("--backend", choices=[b.name for b in Backend])
    o.set_defaults(fn=cmd_overhead)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "action", None) == "recall" and not args.file:
        sys.exit("hsm recall needs a file id or logical name")
    return args.fn(args)


if __name__ == "__main__":
    main()
