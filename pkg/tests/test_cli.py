import json
import os

from scalegraph.cli import main

from conftest import scenario_path


def read(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def test_shard_size_csv_and_rerun_identical(tmp_path):
    out1 = str(tmp_path / "a.csv")
    out2 = str(tmp_path / "b.csv")
    args = ["shard-size", "--nodes", "125", "--byzantine-fraction", "1/5",
            "--repetitions", "5", "--iterations", "200", "--seed", "9"]
    assert main(args + ["--out", out1]) == 0
    assert main(args + ["--out", out2]) == 0
    assert read(out1) == read(out2)
    header, row = read(out1).strip().splitlines()
    assert header == "N,m,F,f,iterations,r,status,seed"
    fields = row.split(",")
    assert fields[0] == "125" and fields[6] == "ok"
    assert int(fields[5]) % 20 == 1


def test_shard_size_infeasible_row_continues(tmp_path):
    out = str(tmp_path / "c.csv")
    code = main(["shard-size", "--nodes", "99,125", "--byzantine-fraction", "1/3",
                 "--tolerance", "1/3", "--repetitions", "2", "--iterations", "50",
                 "--seed", "1", "--out", out])
    assert code == 0
    rows = read(out).strip().splitlines()[1:]
    assert len(rows) == 2
    assert all("infeasible" in row for row in rows)


def test_failure_prob_r_sweep_columns(tmp_path):
    out = str(tmp_path / "d.csv")
    code = main(["failure-prob", "--nodes", "60", "--shards", "30",
                 "--byzantine-fraction", "1/4", "--shard-sizes", "3,5",
                 "--repetitions", "2", "--iterations", "300", "--seed", "5",
                 "--out", out])
    assert code == 0
    lines = read(out).strip().splitlines()
    assert lines[0] == ("N,m,r,F,f,iterations,compromised,probability,stderr,seed,"
                       "analytic_at_m,analytic_at_n,analytic_at_n_over_r")
    assert len(lines) == 3


def test_failure_prob_m_sweep(tmp_path):
    out = str(tmp_path / "e.csv")
    code = main(["failure-prob", "--nodes", "60", "--shards", "30",
                 "--byzantine-fraction", "1/4", "--shard-counts", "10,30",
                 "--shard-size", "5", "--repetitions", "2", "--iterations", "300",
                 "--seed", "5", "--out", out])
    assert code == 0
    rows = [line.split(",") for line in read(out).strip().splitlines()[1:]]
    assert [r[1] for r in rows] == ["10", "30"]


def test_single_point_sweep(tmp_path):
    out = str(tmp_path / "single.csv")
    assert main(["failure-prob", "--nodes", "40", "--shards", "20",
                 "--byzantine-fraction", "1/4", "--shard-sizes", "5",
                 "--repetitions", "2", "--iterations", "100", "--seed", "3",
                 "--out", out]) == 0
    assert len(read(out).strip().splitlines()) == 2


def test_protocol_command_bundled_scenario(tmp_path, capsys):
    out = str(tmp_path / "trace.jsonl")
    code = main(["protocol", scenario_path("three_cycle.json"), "--out", out])
    assert code == 0
    assert os.path.exists(out)
    assert os.path.exists(out + ".report.txt")
    report = read(out + ".report.txt")
    assert "[PASS] all_committed" in report


def test_protocol_command_failing_assertions(tmp_path):
    doc = json.load(open(scenario_path("three_cycle.json")))
    doc["assertions"]["committed_count"] = 99
    path = tmp_path / "impossible.json"
    path.write_text(json.dumps(doc))
    out = str(tmp_path / "trace.jsonl")
    assert main(["protocol", str(path), "--out", out]) == 1


def test_protocol_malformed_json_schema_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"seed": 1,,}')
    out = str(tmp_path / "t.jsonl")
    assert main(["protocol", str(path), "--out", out]) == 2
    err = capsys.readouterr().err
    assert "schema error" in err and "broken.json:1" in err


def test_protocol_missing_field_schema_error(tmp_path, capsys):
    path = tmp_path / "nofield.json"
    path.write_text(json.dumps({"seed": 1}))
    out = str(tmp_path / "t.jsonl")
    assert main(["protocol", str(path), "--out", out]) == 2
    assert "scenario.r" in capsys.readouterr().err


def test_replay_reproduces_csv_byte_identical(tmp_path):
    out = str(tmp_path / "orig.csv")
    assert main(["failure-prob", "--nodes", "60", "--shards", "30",
                 "--byzantine-fraction", "1/4", "--shard-sizes", "3",
                 "--repetitions", "2", "--iterations", "200", "--seed", "8",
                 "--out", out]) == 0
    original = read(out)
    os.remove(out)
    assert main(["replay", out + ".manifest.json"]) == 0
    assert read(out) == original


def test_replay_reproduces_trace_byte_identical(tmp_path):
    out = str(tmp_path / "trace.jsonl")
    assert main(["protocol", scenario_path("crash_leader.json"), "--out", out]) == 0
    original = read(out)
    os.remove(out)
    assert main(["replay", out + ".manifest.json"]) == 0
    assert read(out) == original


def test_manifest_contents(tmp_path):
    out = str(tmp_path / "m.csv")
    main(["shard-size", "--nodes", "125", "--byzantine-fraction", "1/5",
          "--repetitions", "2", "--iterations", "100", "--seed", "4", "--out", out])
    manifest = json.loads(read(out + ".manifest.json"))
    assert manifest["command"] == "shard-size"
    assert manifest["params"]["seed"] == 4
    assert manifest["outputs"] == [out]
    assert "duration_seconds" in manifest


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SCALEGRAPH_SEED", "77")
    out = str(tmp_path / "env.csv")
    main(["shard-size", "--nodes", "125", "--byzantine-fraction", "1/5",
          "--repetitions", "2", "--iterations", "100", "--out", out])
    manifest = json.loads(read(out + ".manifest.json"))
    assert manifest["params"]["seed"] == 77
