import csv
import json
import os

import pytest

from xchange import cli

TWO_PEER = "scenarios/two_peer.yaml"
SMALL = "scenarios/synthetic_small.yaml"


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_every_output(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", TWO_PEER, "--out", str(out)]) == cli.EXIT_OK
    names = sorted(os.listdir(out))
    assert names == ["chains-1.jsonl", "checks.json", "ledger-1.dump", "manifest.json", "orders.csv",
                     "summary.csv", "timing.json", "trace-1.jsonl", "trades.csv"]
    summary = _csv(out / "summary.csv")
    assert summary[0]["trades_completed"] == "1" and summary[0]["checks_ok"] == "1"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "run" and manifest["seed"] == 7 and len(manifest["trace_hashes"]) == 1
    assert "trades_completed=1" in capsys.readouterr().out


def test_bad_scenario_exits_2_without_outputs(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("peers: 3\nfanout: 0\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", str(bad), "--out", str(out)]) == cli.EXIT_CONFIG
    assert not out.exists()
    assert [p for p in os.listdir(tmp_path) if p.startswith(".xchange-")] == []
    assert "bad.yaml:2" in capsys.readouterr().err


def test_missing_scenario_and_unknown_flag_exit_2(tmp_path):
    assert cli.main(["run", "--scenario", str(tmp_path / "none.yaml")]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--scenario", TWO_PEER, "--frobnicate"])
    assert info.value.code == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == cli.EXIT_CONFIG


def test_invalid_policy_and_reps_exit_2():
    assert cli.main(["run", "--scenario", TWO_PEER, "--policy", "restrict=0"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--scenario", TWO_PEER, "--policy", "bogus=1"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--scenario", TWO_PEER, "--reps", "0"]) == cli.EXIT_CONFIG


def test_reps_report_each_rep_and_aggregate(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", TWO_PEER, "--reps", "5", "--out", str(out)]) == cli.EXIT_OK
    rows = _csv(out / "summary.csv")
    assert [r["rep"] for r in rows] == ["1", "2", "3", "4", "5", "mean", "stddev"]
    assert [r["seed"] for r in rows[:5]] == ["7", "8", "9", "10", "11"]
    assert float(rows[5]["trades_completed"]) == 1.0 and float(rows[6]["trades_completed"]) == 0.0
    assert len(capsys.readouterr().out.splitlines()) == 7


def test_manifest_reproduces_outputs(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--scenario", SMALL, "--reps", "2", "--out", str(first)]) == cli.EXIT_OK
    assert cli.main(["run", "--scenario", str(first / "manifest.json"), "--out", str(second)]) == cli.EXIT_OK
    names = sorted(os.listdir(first))
    assert names == sorted(os.listdir(second))
    for name in names:
        if name != "timing.json":
            assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_verify_honest_and_tampered_dumps(tmp_path, capsys):
    out = tmp_path / "out"
    cli.main(["run", "--scenario", TWO_PEER, "--out", str(out)])
    dump = out / "ledger-1.dump"
    assert cli.main(["verify", str(dump)]) == cli.EXIT_OK
    assert capsys.readouterr().out.strip().endswith(": ok")
    lines = dump.read_text().splitlines()
    (tmp_path / "missing.dump").write_text("\n".join(lines[:2] + lines[3:]) + "\n")
    assert cli.main(["verify", str(tmp_path / "missing.dump")]) == cli.EXIT_VIOLATION
    (tmp_path / "junk.dump").write_text("zz-not-hex\n")
    assert cli.main(["verify", str(tmp_path / "junk.dump")]) == cli.EXIT_VIOLATION
    assert cli.main(["verify", str(tmp_path / "absent.dump")]) == cli.EXIT_CONFIG


def test_single_point_sweep_equals_run(tmp_path):
    sweep_out, run_out = tmp_path / "sweep", tmp_path / "run"
    assert cli.main(["sweep", "--scenario", SMALL, "--load", "8", "--policy-grid", "restrict1",
                     "--out", str(sweep_out)]) == cli.EXIT_OK
    assert cli.main(["run", "--scenario", SMALL, "--load", "8", "--policy", "restrict=1", "--policy", "incset=1",
                     "--out", str(run_out)]) == cli.EXIT_OK
    point = _csv(sweep_out / "sweep.csv")[0]
    ran = _csv(run_out / "summary.csv")[0]
    assert point["peers"] == "4"
    for key in ("trades_completed", "throughput", "mean_latency", "p95_latency", "blocks", "messages",
                "orders_created", "orders_fulfilled"):
        assert float(point[key]) == pytest.approx(float(ran[key]), abs=1e-6), key


def test_sweep_manifest_replays_to_identical_table(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["sweep", "--scenario", SMALL, "--load", "4,6", "--policy-grid", "none,both",
                     "--out", str(a)]) == cli.EXIT_OK
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["command"] == "sweep" and manifest["sweep"] == {"loads": [4.0, 6.0],
                                                                    "policies": ["none", "both"]}
    assert cli.main(["sweep", "--scenario", str(a / "manifest.json"), "--out", str(b)]) == cli.EXIT_OK
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    assert len(_csv(a / "sweep.csv")) == 4


def test_sweep_rejects_bad_points_before_running(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["sweep", "--scenario", SMALL, "--load", "4,-1", "--out", str(out)]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", "--scenario", SMALL, "--load", "x"]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", "--scenario", SMALL, "--load", "4", "--policy-grid", "nope"]) == cli.EXIT_CONFIG
    assert not out.exists()


def test_replay_summary_and_errors(tmp_path, capsys):
    out = tmp_path / "out"
    cli.main(["run", "--scenario", TWO_PEER, "--out", str(out)])
    capsys.readouterr()
    trace = out / "trace-1.jsonl"
    assert cli.main(["replay", str(trace)]) == cli.EXIT_OK
    text = capsys.readouterr().out
    assert "trades_completed=1" in text
    assert cli.main(["replay", str(trace), "--json"]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["summary"]["trades_completed"] == 1
    lines = trace.read_text().splitlines()
    short = tmp_path / "short.jsonl"
    short.write_text("\n".join(lines[: len(lines) // 2]) + "\n")
    assert cli.main(["replay", str(short)]) == cli.EXIT_CONFIG
    assert "truncated" in capsys.readouterr().err
    assert cli.main(["replay", str(tmp_path / "absent.jsonl")]) == cli.EXIT_CONFIG


def test_violation_exit_code(tmp_path, monkeypatch):
    from xchange.simnet import runner
    real = runner.run_checks

    def broken(world, metrics):
        return real(world, metrics) + [runner.Check("synthetic-failure", False, "forced")]

    monkeypatch.setattr(runner, "run_checks", broken)
    assert cli.main(["run", "--scenario", TWO_PEER]) == cli.EXIT_VIOLATION
