import json

import pytest

from minicar.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, UsageError, build_config, main, parse_override


@pytest.fixture(scope="module")
def logs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--out", str(d / "log.jsonl"), "--dataset", str(d / "ds.jsonl"),
                 "--duration", "2", "--seed", "1"]) == EXIT_OK
    return d


def test_parse_override():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("name=oval") == (["name"], "oval")
    assert parse_override("x=[1, 2]") == (["x"], [1, 2])
    with pytest.raises(UsageError):
        parse_override("novalue")


def test_build_config_merges_file_and_overrides(tmp_path):
    (tmp_path / "c.json").write_text('{"mhe": {"M": 10, "eta": 0.9}}')
    cfg = build_config(tmp_path / "c.json", ["mhe.M=20", "seed=4"])
    assert cfg == {"mhe": {"M": 20, "eta": 0.9}, "seed": 4}


def test_simulate_writes_both_files(logs):
    assert (logs / "log.jsonl").exists() and (logs / "ds.jsonl").exists()


def test_estimate_then_evaluate(logs, capsys):
    assert main(["estimate", "--data", str(logs / "log.jsonl"), "--estimator", "ekf",
                 "--out", str(logs / "est.jsonl")]) == EXIT_OK
    rows = [json.loads(l) for l in (logs / "est.jsonl").read_text().splitlines()]
    assert len(rows[0]["x"]) == 6
    capsys.readouterr()
    assert main(["evaluate", "--estimates", str(logs / "est.jsonl"), "--data", str(logs / "log.jsonl")]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert "rmse" in out


def test_calibrate_synthetic(tmp_path):
    out = tmp_path / "cal.json"
    assert main(["calibrate-lh", "--synthetic", "6", "--out", str(out)]) == EXIT_OK
    res = json.loads(out.read_text())
    assert res["status"] == "converged" and len(res["angles"]) == 3


def test_diff_of_a_report_with_itself(tmp_path, capsys):
    rep = {"experiment": "x", "metrics": {"a": 1.0, "b": [1, 2]}}
    other = {"experiment": "x", "metrics": {"a": 1.5, "b": [1, 2]}}
    (tmp_path / "a.json").write_text(json.dumps(rep))
    (tmp_path / "b.json").write_text(json.dumps(other))
    assert main(["diff", str(tmp_path / "a.json"), str(tmp_path / "a.json")]) == EXIT_OK
    assert main(["diff", str(tmp_path / "a.json"), str(tmp_path / "b.json")]) == EXIT_FAIL
    assert main(["diff", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--tol", "a=0.6"]) == EXIT_OK


@pytest.mark.parametrize("argv", [
    ["estimate", "--data", "/nonexistent.jsonl", "--out", "/tmp/x.jsonl"],
    ["simulate", "--out", "/tmp/x.jsonl", "--track", "nowhere"],
    ["simulate", "--out", "/tmp/x.jsonl", "--set", "duration=abc"],
    ["simulate", "--out", "/tmp/x.jsonl", "--set", "novalue"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_malformed_log_exit_2(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text('{"format": "minicar-log", "n_bs": 1}\n{"t": 0,\n')
    assert main(["estimate", "--data", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "e.jsonl")]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err


def test_argparse_rejects_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code == 2
