import csv
import json
import os

import pytest

from evstore._util import KiB, crc32
from evstore.catalog import EventId
from evstore.dataserver import ServerFarm
from evstore.harness.config import cdr_config, generator_profile, hsm_config, load_config
from evstore.harness.faults import FaultEvent, FaultPlan, run_client_kill_scenario, run_fault_scenario
from evstore.harness.generator import Generator, event_payload, plan_chunks
from evstore.harness.report import TAPE_FIELDS, SCAN_FIELDS, emit_report
from evstore.harness.stress import STRESS_FIELDS, read_rows, stress_cell, write_rows
from evstore.hsm import HsmConfig

from conftest import ingest_all, small_profile


# ---------------------------------------------------------------- generator

def test_generator_is_deterministic():
    p = small_profile()
    a = [crc32(d) for _r, _s, d in Generator(p).chunks()]
    b = [crc32(d) for _r, _s, d in Generator(p).chunks()]
    assert a == b
    assert event_payload(p, 1, 3) != event_payload(small_profile(seed=8), 1, 3)


def test_manifest_matches_stream(tmp_path):
    gen = Generator(small_profile(size_jitter=0.3))
    m = gen.manifest()
    streamed = gen.empty_manifest()
    list(gen.chunks(manifest=streamed))
    assert m.events == streamed.events and m.chunks == streamed.chunks
    assert len(m.events) == 48
    path = str(tmp_path / "m.json")
    m.save(path)
    assert type(m).load(path).events == m.events


def test_chunks_respect_size_limit():
    p = small_profile(events_per_run=100)
    plan = plan_chunks(p)
    assert [stop - first for _r, _s, first, stop in plan if _r == 1] and \
        sum(stop - first for _r, _s, first, stop in plan) == 200
    assert all(len(d) <= p.max_chunk_size for _r, _s, d in Generator(p).chunks())


def test_profile_validation():
    with pytest.raises(ValueError):
        small_profile(compressibility=1.5)
    with pytest.raises(ValueError):
        small_profile(payload_size=100 * KiB)


# --------------------------------------------------------------- fault plan

def test_fault_plan_deterministic_and_json(tmp_path):
    a = FaultPlan.generate(4, 100.0, 30)
    b = FaultPlan.generate(4, 100.0, 30)
    assert a == b and a != FaultPlan.generate(5, 100.0, 30)
    assert len(a.of("kill_client")) == 10 and len(a.of("crash_migrator")) == 1
    assert all(10.0 <= e.t <= 70.0 for e in a.of("kill_client"))
    path = str(tmp_path / "plan.json")
    a.save(path)
    assert FaultPlan.load(path) == a


def test_unknown_fault_kind():
    with pytest.raises(ValueError):
        FaultEvent("meteor")


def _cdr(profile):
    from evstore.cdr import CdrConfig
    return CdrConfig(max_chunk_size=profile.max_chunk_size, source_rate=200 * KiB, nominal_rate=200 * KiB,
                     link_bandwidth=1 << 20, ingest_rate=2 << 20, tick=0.1, prune_interval=0.5)


def test_empty_plan_is_clean(tmp_path):
    p = small_profile()
    rep = run_fault_scenario(FaultPlan(), p, str(tmp_path / "s"), _cdr(p), HsmConfig(pin_window=60.0))
    assert rep.ok and rep.events_found == rep.events_expected == 48
    assert rep.verdict() == {k: 0 for k in rep.verdict()}


def test_faulty_plan_loses_nothing(tmp_path):
    p = small_profile(runs=3, events_per_run=40)
    horizon = p.runs * p.events_per_run * p.payload_size / (200 * KiB)
    plan = FaultPlan.generate(1, horizon, len(plan_chunks(p)), kills=4, stall_seconds=1.0)
    rep = run_fault_scenario(plan, p, str(tmp_path / "s"), _cdr(p), HsmConfig(pin_window=60.0),
                             migrate_runs=2)
    assert rep.ok and rep.events_found == 120
    assert rep.migration_crashes == 1 and rep.migration_runs == [1, 2]
    assert rep.reader_failures == 0


def test_client_kill_scenario(store):
    ingest_all(store, small_profile())
    r = run_client_kill_scenario(store, clients=20, kill_fraction=0.1, seed=2)
    assert len(r["killed"]) == 2 and r["reaped"] == r["killed"]
    assert r["completed"] == 18 and r["resources_free"]


# ------------------------------------------------------------------- report

def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_emit_report_empty(tmp_path):
    paths = emit_report(str(tmp_path))
    assert _header(paths["tape_volume"]) == TAPE_FIELDS
    assert _header(paths["scan_scaling"]) == SCAN_FIELDS
    assert os.path.exists(paths["tape_volume.gp"])


def test_stress_cell_and_rows(store, tmp_path):
    ingest_all(store, small_profile())
    with ServerFarm(store, count=2, processes=False) as farm:
        r = stress_cell(store.catalog, farm.endpoints(), 4, [1, 2], 8, farm=farm, label="t")
    assert r.failures == 0 and r.records == 32
    assert r.aggregate_bytes_per_s > 0 and r.server_bytes_served >= r.wire_bytes
    path = str(tmp_path / "stress.csv")
    write_rows(path, [r])
    write_rows(path, [r])
    rows = read_rows(path)
    assert len(rows) == 2 and list(rows[0]) == STRESS_FIELDS
    paths = emit_report(str(tmp_path / "rep"), stress_rows=rows)
    with open(paths["scan_scaling"], newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2


# ------------------------------------------------------------------- config

def test_config_file_and_env(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"hsm": {"pin_window": 5.0}, "generator": {"runs": 3}}))
    cfg = load_config(str(path), env={"EVSTORE_HSM_PIN_WINDOW": "7", "EVSTORE_CDR_BACKEND": "FLAT_B",
                                      "EVSTORE_DATASERVER_PROCESSES": "no"})
    assert hsm_config(cfg).pin_window == 7.0
    assert generator_profile(cfg).runs == 3
    assert cdr_config(cfg).backend.name == "FLAT_B"
    assert cfg["dataserver"]["processes"] is False
    path.write_text(json.dumps({"hsm": {"bogus": 1}}))
    with pytest.raises(KeyError):
        load_config(str(path), env={})


# ---------------------------------------------------------------------- cli

def test_cli_end_to_end(tmp_path, capsys):
    from evstore.cli import main
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({
        "generator": {"seed": 7, "runs": 2, "events_per_run": 24, "payload_size": 4096,
                      "max_chunk_size": 40960},
        "cdr": {"max_chunk_size": 40960, "source_rate": 204800, "nominal_rate": 204800,
                "link_bandwidth": 1048576, "ingest_rate": 2097152},
        "hsm": {"pin_window": 60.0},
    }))
    root = str(tmp_path / "root")
    base = ["--data-root", root, "--config", str(conf)]
    main(base + ["gen", "--out", str(tmp_path / "chunks")])
    assert "48 events" in capsys.readouterr().out
    main(base + ["cdr", "run", "--source", str(tmp_path / "chunks")])
    assert json.loads(capsys.readouterr().out)["events"] == 48
    assert os.path.exists(os.path.join(root, "cdr_series.csv"))
    main(base + ["catalog", "verify"])
    assert "consistent" in capsys.readouterr().out
    main(base + ["read", "--event", "1:3"])
    crc = crc32(event_payload(small_profile(), 1, 3))
    assert f"crc32 {crc:08x}" in capsys.readouterr().out
    main(base + ["migrate", "run", "1", "--fraction", "1.0"])
    main(base + ["verify", "--fraction", "0.5"])
    capsys.readouterr()
    main(base + ["overhead-report", "--backend", "FLAT_B"])
    assert json.loads(capsys.readouterr().out)["files"] == 1
    main(base + ["report", "--run-dir", root])
    assert os.path.exists(os.path.join(root, "tape_volume.csv"))
    capsys.readouterr()
    main(base + ["hsm", "migrate"])
    capsys.readouterr()
    main(base + ["hsm", "stat"])
    stats = json.loads(capsys.readouterr().out)
    assert stats["tape_backlog_bytes"] == 0 and set(stats["overhead_on_tape_by_kind"]) == {"container-a", "flat-b"}
    from evstore.store import EventStore
    again = EventStore(root)
    assert again.read_event(EventId(1, 3)) == event_payload(small_profile(), 1, 3)
    again.close()
