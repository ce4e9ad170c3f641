import copy
import json

import pytest

from cxlpool.cli import CSV_COLUMNS, main, run_scenario
from cxlpool.errors import ParseError, ValidationError
from cxlpool.scenario import load_scenario, parse_scenario, shipped_scenario_path

GOLDEN_HEADERS = {
    "feasibility.csv": "kind,id,required_lanes,lanes,cxl_bw_gbs,pool_single,harvest_lanes,harvest",
    "channel_bench.csv": "iter,oneway_ns",
    "udp_bench_1500.csv": "offered_gbps,achieved_gbps,p50_us,p99_us,placement",
    "failover_timeline.csv": "time,event,workload,device",
    "stranding.csv": "N,resource,mean_stranded,stddev,analytic_sqrt_prediction",
}

SMALL = {
    "seed": 3,
    "topology": {
        "hosts": [{"id": 0}, {"id": 1}, {"id": 2}],
        "mhds": [{"id": 0, "port_count": 4}],
        "links": [{"host_id": h, "mhd_id": 0, "lane_width": 8} for h in range(3)],
        "devices": [{"id": 0, "attached_host_id": 0}, {"id": 1, "attached_host_id": 1}],
    },
    "workload": {
        "channel_bench": {"capacity": 8, "iters": 300, "mode": "sim"},
        "udp_bench": {"pkt_sizes": [1500], "requests": 200, "warmup": 20, "load_step": 0.5},
        "failover": {"duration_ms": 12, "workloads": [
            {"host": 2, "id": 0, "io_bytes": 9000, "rate_gbps": 2.0},
            {"host": 0, "id": 0, "io_bytes": 9000, "rate_gbps": 2.0}]},
    },
    "stranding": {"host_count": 16, "group_sizes": [1, 2], "seeds": 2},
    "faults": [{"at_ms": 4.5, "event": "fail_device", "device": 0}],
}


@pytest.fixture
def small_path(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_shipped_scenario_parses():
    sc = load_scenario(shipped_scenario_path())
    assert len(sc.topology.hosts) == 8 and len(sc.topology.mhds) == 4
    assert sc.failover and sc.stranding and sc.udp_bench and sc.channel_bench


def test_missing_file():
    with pytest.raises(ParseError):
        load_scenario("/nonexistent/scenario.json")


def test_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    with pytest.raises(ParseError):
        load_scenario(p)


def test_all_violations_are_listed():
    d = copy.deepcopy(SMALL)
    d["topology"]["links"][1]["lane_width"] = 3
    d["colour"] = "blue"
    d["stranding"]["group_sizes"] = [1, 3]
    with pytest.raises(ValidationError) as exc:
        parse_scenario(d)
    v = exc.value.violations
    assert len(v) == 3
    assert any("link 1" in x and "lane_width 3" in x for x in v)
    assert any("colour" in x for x in v)
    assert any("group size 3" in x for x in v)


def test_unknown_nested_key():
    d = copy.deepcopy(SMALL)
    d["topology"]["hosts"][0]["gpus"] = 4
    with pytest.raises(ValidationError) as exc:
        parse_scenario(d)
    assert "gpus" in str(exc.value)


def test_fault_target_checked():
    d = copy.deepcopy(SMALL)
    d["faults"] = [{"at_ms": 1, "event": "fail_device", "device": 42}]
    with pytest.raises(ValidationError):
        parse_scenario(d)


def test_run_writes_golden_headers(small_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(small_path), "--csv-dir", str(out), "--quiet"]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == sorted(GOLDEN_HEADERS)
    for name, header in GOLDEN_HEADERS.items():
        lines = (out / name).read_text().splitlines()
        assert lines[0] == header
        assert len(lines) > 1


def test_column_table_matches_golden():
    assert ",".join(CSV_COLUMNS["udp_bench"]) == GOLDEN_HEADERS["udp_bench_1500.csv"]
    assert ",".join(CSV_COLUMNS["stranding"]) == GOLDEN_HEADERS["stranding.csv"]


def test_run_is_deterministic(small_path, tmp_path):
    digests = []
    for i in range(2):
        d = tmp_path / f"r{i}"
        assert main(["run", str(small_path), "--csv-dir", str(d), "--trace",
                     str(tmp_path / f"t{i}.jsonl"), "--quiet"]) == 0
        digests.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert digests[0] == digests[1]
    assert (tmp_path / "t0.jsonl").read_bytes() == (tmp_path / "t1.jsonl").read_bytes()


def test_failover_outputs_conserve(small_path):
    sc = load_scenario(small_path)
    outs = run_scenario(sc)
    fo = [o for o in outs if o.name == "failover_timeline"][0]
    assert fo.ok
    events = [r[1] for r in fo.rows]
    assert "device_failed" in events and "failover_command" in events


def test_exit_codes(small_path, tmp_path, capsys):
    assert main(["feasibility", "--scenario", "/no/such/file.json"]) == 2
    bad = copy.deepcopy(SMALL)
    bad["topology"]["links"][0]["lane_width"] = 3
    bad["extra"] = 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["run", str(p)]) == 2
    err = capsys.readouterr().err
    assert "2 problems" in err and "lane_width 3" in err and "extra" in err
    assert main(["stranding", "--scenario", str(small_path), "--group-sizes", "1,5"]) == 2
    assert main(["failover-demo", "--scenario", str(small_path), "--fail-device", "9"]) == 2
    assert main(["feasibility", "--scenario", str(small_path), "--quiet"]) == 0


def test_runtime_error_exit_code(tmp_path):
    # a directory where the CSV file should go is an OS error at write time
    target = tmp_path / "taken"
    (target / "x.csv").mkdir(parents=True)
    assert main(["channel-bench", "--iters", "10", "--csv", str(target / "x.csv"), "--quiet"]) == 3


def test_subcommand_csv_and_global_flags(tmp_path, capsys):
    csv = tmp_path / "cb.csv"
    assert main(["--seed", "2", "channel-bench", "--iters", "200", "--poll-interval-ns", "0",
                 "--csv", str(csv)]) == 0
    rows = csv.read_text().splitlines()[1:]
    assert len(rows) == 200 and all(r.endswith(",550.0") or r.endswith(",550") for r in rows)
    assert "trace sha256" in capsys.readouterr().out


def test_udp_bench_one_csv_per_size(tmp_path):
    target = tmp_path / "udp.csv"
    assert main(["udp-bench", "--pkt-size", "75", "--pkt-size", "9000", "--requests", "100",
                 "--load-step", "0.5", "--csv", str(target), "--quiet"]) == 0
    assert (tmp_path / "udp_75.csv").exists() and (tmp_path / "udp_9000.csv").exists()


def test_empty_device_list_feasibility(tmp_path):
    d = {"topology": {"hosts": [{"id": 0}], "mhds": [{"id": 0}],
                      "links": [{"host_id": 0, "mhd_id": 0}]}}
    p = tmp_path / "empty.json"
    p.write_text(json.dumps(d))
    out = tmp_path / "f.csv"
    assert main(["feasibility", "--scenario", str(p), "--csv", str(out), "--quiet"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == GOLDEN_HEADERS["feasibility.csv"] and len(lines) == 2
