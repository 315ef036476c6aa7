import json

import pytest

from tinyforge.cli import main
from tinyforge.exchange import EpisodeExchange
from tinyforge.pipeline import read_report


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_demos_deterministic(tmp_path):
    assert run("gen-demos", "--task", "collect_simple", "--episodes", 10, "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("gen-demos", "--task", "collect_simple", "--episodes", 10, "--seed", 7, "--out", tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len([f for f in files if f.endswith(".jsonl")]) == 10
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ingest_then_inspect_matches_header(tmp_path, capsys):
    run("gen-demos", "--task", "deliver_simple", "--episodes", 3, "--seed", 1, "--out", tmp_path / "d")
    assert run("ingest", "--input", tmp_path / "d", "--store", tmp_path / "s", "--clip-len", 16) == 0
    path = sorted((tmp_path / "d").glob("*.jsonl"))[0]
    ex = EpisodeExchange.read(path)
    capsys.readouterr()
    assert run("inspect", "--store", tmp_path / "s", "--episode", ex.episode_id.hex()) == 0
    man = json.loads(capsys.readouterr().out)
    assert man["episode_id"] == ex.episode_id.hex()
    assert man["length"] == ex.length
    assert man["frame_shapes"]["0"] == [ex.obs_dim]
    assert man["labels"] == [[ex.task_id, 0, ex.length]]
    assert man["clip_len"] == 16
    assert run("inspect", "--store", tmp_path / "s", "--label", "deliver_simple") == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


@pytest.mark.parametrize("argv", [[], ["bogus"], ["gen-demos", "--task", "x"], ["ingest", "--nope", "1"],
                                  ["rollout", "--policy", "expert", "--task", "collect_simple", "--episodes", "x",
                                   "--report", "r"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert run("inspect", "--store", tmp_path / "missing") == 2
    assert run("gen-demos", "--task", "no_such_task", "--episodes", 1, "--out", tmp_path / "d") == 2
    assert "error" in capsys.readouterr().err


def test_bad_override_is_usage_error(tmp_path):
    run("gen-demos", "--task", "collect_simple", "--episodes", 2, "--out", tmp_path / "d")
    run("ingest", "--input", tmp_path / "d", "--store", tmp_path / "s")
    assert run("train-bc", "--store", tmp_path / "s", "--out", tmp_path / "p.tfpl", "--set", "nokeyvalue") == 1
    assert run("train-bc", "--store", tmp_path / "s", "--out", tmp_path / "p.tfpl", "--set", "bogus=1") == 2


def test_log_level_env(monkeypatch, tmp_path):
    monkeypatch.setenv("TF_LOG_LEVEL", "loud")
    assert run("inspect", "--store", tmp_path) == 1
    monkeypatch.setenv("TF_LOG_LEVEL", "debug")
    assert run("inspect", "--store", tmp_path / "missing") == 2


def test_bench_report(tmp_path, capsys):
    report = tmp_path / "bench.json"
    assert run("bench", "--suite", "builtin", "--policy", "expert", "random", "--seeds-per-task", 5,
               "--report", report) == 0
    doc = json.loads(report.read_text())
    assert doc["config"]["policies"] == ["expert", "random"]
    assert doc["comparison"]["scripted-expert vs random"]["summary"]["win"] == 6
    assert "expert vs random" in capsys.readouterr().out


def test_full_loop(tmp_path):
    d = tmp_path
    assert run("gen-demos", "--task", "collect_simple", "--episodes", 20, "--seed", 0, "--out", d / "demos") == 0
    assert run("ingest", "--input", d / "demos", "--store", d / "store", "--clip-len", 32) == 0
    (d / "bc.json").write_text(json.dumps({"total_steps": 60, "warmup_steps": 10, "batch_size": 8, "seq_len": 16,
                                           "hidden": 16, "base_lr": 0.2}))
    assert run("train-bc", "--store", d / "store", "--config", d / "bc.json", "--out", d / "bc.tfpl",
               "--checkpoint-dir", d / "ck", "--set", "checkpoint_every=30") == 0
    curve = (d / "bc.tfpl.loss.txt").read_text().splitlines()
    assert curve[0].startswith("# config ") and json.loads(curve[0][9:])["checkpoint_every"] == 30
    (d / "ppo.json").write_text(json.dumps({"total_env_steps": 512, "num_envs": 2, "fragment_len": 32}))
    assert run("train-ppo", "--task", "collect_simple", "--anchor", d / "bc.tfpl", "--config", d / "ppo.json",
               "--out", d / "ppo.tfpl") == 0
    metrics = [json.loads(l) for l in (d / "ppo.tfpl.metrics.jsonl").read_text().splitlines()]
    assert metrics[0]["config"]["num_envs"] == 2 and metrics[-1]["step"] == 512
    assert run("rollout", "--policy", d / "ppo.tfpl", "--task", "collect_simple", "--generators", 2,
               "--episodes", 5, "--report", d / "roll.jsonl", "--to-store", d / "synth") == 0
    header, rows = read_report(d / "roll.jsonl")
    assert header["config"]["agent"]["kind"] == "policy" and len(rows) == 10
    assert run("train-bc", "--store", d / "synth", "--config", d / "bc.json", "--out", d / "bc2.tfpl") == 0
    assert run("bench", "--policy", d / "bc.tfpl", d / "ppo.tfpl", "--seeds-per-task", 3, "--report", d / "b.json") == 0
    doc = json.loads((d / "b.json").read_text())
    # small-grid policies do not fit the 12x12 tasks; that is reported per task, not fatal
    assert "does not fit" in doc["reports"][0]["tasks"]["collect_hard"]["error"]
